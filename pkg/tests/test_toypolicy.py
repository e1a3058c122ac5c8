import math

import numpy as np
import pytest

from alive.config import Config
from alive.datamodel import ConstructedTask, SolverRollout
from alive.optim import distill_loss, fcp_loss, grpo_objective
from alive.toypolicy import (
    CATEGORIES, CRITIQUE_TEXT, OPERATORS, Decision, DistillSample, FcpSample, NonFiniteGradientError,
    ToyCorpusSpec, ToyDocument, ToyParams, ToyPolicy, ToyTrainingConfig, apply_distill_update, apply_fcp_update,
    apply_grpo_update, apply_unified_update, category_of_critique, circular_distance, critique_category,
    critique_decision, critique_logprob, entropy_estimate, evaluate_solver, fcp_decision, fcp_nll, feature_count,
    feature_index, gen_corpus, grad_logprob, grpo_gradient, grpo_surrogate, local_solutions, logprob, nll,
    nll_gradient, softmax, solver_decision, toy_construct, toy_review, toy_solve,
)

V, MOD = 5, 3
EPS_LOW, EPS_HIGH = 0.2, 0.28
# Ratios kept away from the clip boundaries 0.8 and 1.28
RATIO_BANDS = ((0.5, 0.7), (0.9, 1.2), (1.4, 1.6))


def random_params(rng, vocab_size=V, modulus=MOD, scale=1.0):
    params = ToyParams.zeros(vocab_size, modulus)
    return ToyParams(rng.normal(scale=scale, size=params.constructor_logits.shape),
                     rng.normal(scale=scale, size=params.solver_logits.shape),
                     rng.normal(scale=scale, size=params.fcp_logits.shape))


def flat_entries(params, table):
    return params.table(table).reshape(-1)


def numeric_gradient(fn, params, table, entries, h=1e-6):
    grads = []
    for e in entries:
        plus, minus = params.copy(), params.copy()
        flat_entries(plus, table)[e] += h
        flat_entries(minus, table)[e] -= h
        grads.append((fn(plus) - fn(minus)) / (2 * h))
    return np.array(grads)


def relative_error(analytic, numeric):
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return np.linalg.norm(analytic - numeric) / scale


def random_group(rng, params):
    """Mixed constructor and solver decisions with sampling-time log-probs placing ρ inside known bands."""
    f = feature_count(MOD)
    decisions = []
    for _ in range(3):
        entries = tuple(int(e) for e in rng.choice(f, size=int(rng.integers(2, 5)), replace=False))
        decisions.append(Decision('constructor', entries, int(rng.integers(len(entries)))))
    for _ in range(5):
        decisions.append(solver_decision(int(rng.integers(f)), int(rng.integers(V)), V))
    advantages = rng.normal(size=len(decisions)).tolist()
    logprobs_old = []
    for d in decisions:
        lo, hi = RATIO_BANDS[int(rng.integers(len(RATIO_BANDS)))]
        logprobs_old.append(logprob(params, d) - math.log(rng.uniform(lo, hi)))
    return decisions, advantages, logprobs_old


class TestCorpus:
    def test_seeded_determinism(self):
        spec = ToyCorpusSpec(seed=11)
        assert gen_corpus(spec, 20) == gen_corpus(spec, 20)
        assert gen_corpus(spec, 20) != gen_corpus(ToyCorpusSpec(seed=12), 20)

    def test_single_equation_always_maskable(self):
        for doc in gen_corpus(ToyCorpusSpec(chain_length=1, modulus=10, seed=3), 200):
            assert len(doc.maskable_positions) >= 1
            assert 2 in doc.maskable_positions

    def test_maskable_positions_uniquely_recoverable(self):
        for doc in gen_corpus(ToyCorpusSpec(operators=('+', '-', '*'), seed=5), 100):
            for pos in range(len(doc.tokens)):
                k, slot = doc.equation(pos)
                x, y = doc.visible_pair(pos)
                consistent = [v for v in range(doc.modulus)
                              if v in local_solutions(doc.operators[k], slot, x, y, doc.modulus)]
                if pos in doc.maskable_positions:
                    assert consistent == [doc.tokens[pos]]
                else:
                    assert len(consistent) != 1

    def test_chain_links_results(self):
        doc = gen_corpus(ToyCorpusSpec(chain_length=3, seed=1), 1)[0]
        assert doc.tokens[2] == doc.tokens[3]
        assert doc.tokens[5] == doc.tokens[6]

    def test_render_masks_one_position(self):
        doc = ToyDocument('d', (2, 3, 5), ('+',), 10, (0, 1, 2))
        assert doc.render() == '2 + 3 = 5 (mod 10)'
        assert doc.render(masked=1) == '2 + ? = 5 (mod 10)'
        assert doc.to_document().text == '2 + 3 = 5 (mod 10)'

    def test_spec_from_config(self):
        spec = ToyCorpusSpec.from_config(Config.from_dict({'loop': {'seed': 4}, 'toy': {'chain_length': 2}}))
        assert (spec.seed, spec.chain_length, spec.vocab_size) == (4, 2, 10)

    @pytest.mark.parametrize('kwargs', [dict(vocab_size=1), dict(chain_length=0), dict(modulus=11),
                                        dict(operators=('/',))])
    def test_spec_violations(self, kwargs):
        spec = ToyCorpusSpec(**kwargs)
        assert spec.violations()
        with pytest.raises(ValueError):
            gen_corpus(spec, 1)

    def test_training_violations(self):
        assert ToyTrainingConfig().violations() == []
        assert ToyTrainingConfig(solver_lr=0.0, ppo_epochs=0).violations() == \
            ["toy solver_lr must be > 0", "toy ppo_epochs must be ≥ 1"]


class TestSampling:
    def test_uniform_construct_frequencies(self):
        doc = ToyDocument('d', (2, 3, 5), ('+',), 10, (1, 2))
        tasks = toy_construct(ToyParams.zeros(10, 10), doc, 10_000, np.random.default_rng(0))
        first = sum(1 for t in tasks if t.position == 1)
        assert abs(first - 5000) <= 3 * math.sqrt(10_000 * 0.25)

    def test_single_maskable_position(self):
        doc = ToyDocument('d', (2, 3, 5), ('+',), 10, (2,))
        tasks = toy_construct(ToyParams.zeros(10, 10), doc, 4, np.random.default_rng(0))
        assert [t.position for t in tasks] == [2, 2, 2, 2]
        assert all(t.task.logprob_old == 0.0 for t in tasks)
        assert tasks[0].task.hidden_truth == '5'
        assert '?' in tasks[0].task.query
        assert [t.task.task_id for t in tasks] == ['d-t00', 'd-t01', 'd-t02', 'd-t03']

    def test_peaked_constructor_logits(self):
        doc = ToyDocument('d', (2, 3, 5), ('+',), 10, (1, 2))
        params = ToyParams.zeros(10, 10)
        params.constructor_logits[feature_index(doc.context(1), 10)] = 10.0
        params.constructor_logits[feature_index(doc.context(2), 10)] = -10.0
        tasks = toy_construct(params, doc, 200, np.random.default_rng(1))
        assert all(t.position == 1 for t in tasks)
        assert math.exp(tasks[0].task.logprob_old) > 0.999

    def test_no_maskable_position(self):
        doc = ToyDocument('d', (0, 0, 0), ('*',), 10, ())
        with pytest.raises(ValueError):
            toy_construct(ToyParams.zeros(10, 10), doc, 1, np.random.default_rng(0))

    def _task(self, params):
        doc = ToyDocument('d', (2, 3, 5), ('+',), 10, (2,))
        return toy_construct(params, doc, 1, np.random.default_rng(0))[0]

    def test_uniform_solver_frequencies(self):
        params = ToyParams.zeros(10, 10)
        solutions = toy_solve(params, self._task(params), 20_000, np.random.default_rng(2))
        counts = np.bincount([s.answer for s in solutions], minlength=10)
        sigma = math.sqrt(20_000 * 0.1 * 0.9)
        assert np.all(np.abs(counts - 2000) <= 3 * sigma)

    def test_forced_candidate(self):
        params = ToyParams.zeros(10, 10)
        task = self._task(params)
        params.solver_logits[task.feature, 7] = 50.0
        solutions = toy_solve(params, task, 32, np.random.default_rng(3))
        assert {s.rollout.answer for s in solutions} == {'7'}

    def test_rollout_count_and_indices(self):
        params = ToyParams.zeros(10, 10)
        solutions = toy_solve(params, self._task(params), 16, np.random.default_rng(4))
        assert len(solutions) == 16
        assert [s.rollout.sample_index for s in solutions] == list(range(16))
        assert solutions[3].rollout.rollout_id == 'd-t00-s03'
        assert all(s.rollout.logprob_old == pytest.approx(math.log(0.1)) for s in solutions)

    def test_invalid_task_not_solved(self):
        params = ToyParams.zeros(10, 10)
        task = self._task(params)
        invalid = task.__class__(task=ConstructedTask('x', 'd', 'q', '', '', 0, False), document=task.document,
                                 position=task.position, feature=task.feature, decision=task.decision)
        with pytest.raises(ValueError):
            toy_solve(params, invalid, 1, np.random.default_rng(0))


class TestReview:
    def _review(self, answer, truth='3', vocab_size=10):
        task = ConstructedTask('t', 'd', 'q', truth, '', 0, True)
        return toy_review(task, SolverRollout('r', 't', '', answer, 0), vocab_size)

    def test_exact(self):
        review = self._review('3')
        assert review.soft_score == 1.0
        assert review.critique == CRITIQUE_TEXT['exact']

    def test_maximal_distance(self):
        assert self._review('8').soft_score == 0.0

    def test_distance_one(self):
        review = self._review('2')
        assert review.soft_score == pytest.approx(0.8)
        assert review.critique == CRITIQUE_TEXT['near_miss']

    def test_wraps_around(self):
        assert self._review('9', truth='0').soft_score == pytest.approx(0.8)

    @pytest.mark.parametrize('answer', ['seven', '12', ''])
    def test_unparseable(self, answer):
        review = self._review(answer)
        assert review.soft_score == 0.0
        assert review.critique == CRITIQUE_TEXT['far_miss']

    def test_reviewer_kind(self):
        assert self._review('3').reviewer_kind == 'teacher'

    @pytest.mark.parametrize('distance,category', [(0, 'exact'), (1, 'near_miss'), (2, 'near_miss'),
                                                   (3, 'far_miss'), (5, 'far_miss')])
    def test_categories(self, distance, category):
        assert critique_category(distance) == category

    def test_category_of_critique(self):
        assert category_of_critique(CRITIQUE_TEXT['near_miss']) == CATEGORIES.index('near_miss')
        assert category_of_critique('something else') == CATEGORIES.index('far_miss')

    def test_circular_distance(self):
        assert circular_distance(9, 0, 10) == 1
        assert circular_distance(0, 5, 10) == 5


class TestGradients:
    def test_equal_logits(self):
        params = ToyParams.zeros(2, 2)
        assert logprob(params, solver_decision(0, 1, 2)) == pytest.approx(math.log(0.5))

    def test_grad_at_chosen(self):
        params = random_params(np.random.default_rng(0))
        decision = solver_decision(4, 2, V)
        probs = softmax(decision.logits(params))
        grad = grad_logprob(params, decision)
        assert grad.values[2] == pytest.approx(1.0 - probs[2])
        assert grad.values.sum() == pytest.approx(0.0, abs=1e-12)

    def test_grad_logprob_finite_difference(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            params = random_params(rng)
            decision = fcp_decision(int(rng.integers(feature_count(MOD))), int(rng.integers(3)),
                                    int(rng.integers(V)), V)
            analytic = grad_logprob(params, decision).values
            numeric = numeric_gradient(lambda p: logprob(p, decision), params, 'fcp', decision.entries)
            assert relative_error(analytic, numeric) <= 1e-5

    def test_grpo_gradient_finite_difference(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            params = random_params(rng)
            ref = random_params(rng)
            decisions, advantages, logprobs_old = random_group(rng, params)
            kl = float(rng.choice([0.0, 0.3]))

            def objective(p):
                return grpo_surrogate(p, decisions, advantages, logprobs_old, EPS_LOW, EPS_HIGH, kl, ref)

            grad = grpo_gradient(params, decisions, advantages, logprobs_old, EPS_LOW, EPS_HIGH, kl, ref)
            for table in ('constructor', 'solver'):
                touched = sorted({e for d in decisions if d.table == table for e in d.entries})
                analytic = flat_entries(grad, table)[touched]
                numeric = numeric_gradient(objective, params, table, touched)
                assert relative_error(analytic, numeric) <= 1e-5
                untouched = np.delete(flat_entries(grad, table), touched)
                assert not np.any(untouched)
            assert not np.any(grad.fcp_logits)

    def test_fcp_nll_gradient_finite_difference(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            params = random_params(rng)
            samples = [FcpSample(int(rng.integers(feature_count(MOD))), int(rng.integers(3)), int(rng.integers(V)),
                                 float(rng.choice([1.0, 2.0]))) for _ in range(6)]
            decisions = [fcp_decision(s.feature, s.category, s.answer, V) for s in samples]
            weights = [s.weight for s in samples]
            grad = nll_gradient(params, decisions, weights)
            touched = sorted({e for d in decisions for e in d.entries})
            numeric = numeric_gradient(lambda p: fcp_nll(p, samples), params, 'fcp', touched)
            assert relative_error(flat_entries(grad, 'fcp')[touched], numeric) <= 1e-5

    def test_critique_head_gradient_finite_difference(self):
        rng = np.random.default_rng(4)
        params = random_params(rng)
        decisions = [critique_decision(int(rng.integers(feature_count(MOD))), int(rng.integers(V)),
                                       int(rng.integers(3)), V) for _ in range(5)]
        grad = nll_gradient(params, decisions)
        touched = sorted({e for d in decisions for e in d.entries})
        numeric = numeric_gradient(lambda p: nll(p, decisions), params, 'fcp', touched)
        assert relative_error(flat_entries(grad, 'fcp')[touched], numeric) <= 1e-5


class TestUpdates:
    def test_zero_advantages_leave_params(self):
        rng = np.random.default_rng(0)
        params = random_params(rng)
        decisions, _, logprobs_old = random_group(rng, params)
        updated = apply_grpo_update(params, decisions, [0.0] * len(decisions), logprobs_old, EPS_LOW, EPS_HIGH, 1.0)
        assert updated.equals(params)

    def test_positive_advantage_raises_probability(self):
        params = random_params(np.random.default_rng(1))
        decision = solver_decision(7, 3, V)
        before = math.exp(logprob(params, decision))
        updated = apply_grpo_update(params, [decision], [1.0], [logprob(params, decision)], EPS_LOW, EPS_HIGH, 0.5)
        assert math.exp(logprob(updated, decision)) > before
        untouched = np.delete(np.arange(params.solver_logits.size), decision.entries)
        assert np.array_equal(updated.solver_logits.ravel()[untouched], params.solver_logits.ravel()[untouched])

    def test_clipped_ratio_gives_zero_gradient(self):
        params = random_params(np.random.default_rng(2))
        decision = solver_decision(7, 3, V)
        old = logprob(params, decision) - math.log(1.5)
        grad = grpo_gradient(params, [decision], [1.0], [old], EPS_LOW, EPS_HIGH)
        assert not np.any(grad.solver_logits)

    def test_non_finite_gradient_leaves_params(self):
        params = random_params(np.random.default_rng(3))
        snapshot = params.copy()
        decision = solver_decision(1, 1, V)
        with pytest.raises(NonFiniteGradientError):
            apply_grpo_update(params, [decision], [float('nan')], [logprob(params, decision)],
                              EPS_LOW, EPS_HIGH, 1.0)
        assert params.equals(snapshot)

    def test_softmax_rows_conserved(self):
        rng = np.random.default_rng(4)
        params = random_params(rng)
        for _ in range(20):
            decisions, advantages, logprobs_old = random_group(rng, params)
            params = apply_grpo_update(params, decisions, advantages, logprobs_old, EPS_LOW, EPS_HIGH, 5.0)
        sums = softmax(params.solver_logits, axis=-1).sum(axis=-1)
        assert np.max(np.abs(sums - 1.0)) <= 1e-12

    def test_fcp_descent_monotone(self):
        rng = np.random.default_rng(5)
        params = random_params(rng)
        samples = [FcpSample(3, 1, int(a)) for a in rng.integers(V, size=8)] + [FcpSample(9, 0, 2)]
        previous = fcp_nll(params, samples)
        for _ in range(100):
            params, current = apply_fcp_update(params, samples, 0.1)
            assert current <= previous + 1e-12
            previous = current

    def test_fcp_single_sample_converges(self):
        params = ToyParams.zeros(10, 10)
        samples = [FcpSample(12, 2, 4)]
        for _ in range(20):
            params, loss = apply_fcp_update(params, samples, 10.0)
        assert loss < 0.01

    def test_fcp_other_rows_untouched(self):
        params = random_params(np.random.default_rng(6))
        updated, _ = apply_fcp_update(params, [FcpSample(12, 2, 4)], 1.0)
        assert np.array_equal(updated.fcp_logits[12, :2], params.fcp_logits[12, :2])
        assert np.array_equal(updated.fcp_logits[13], params.fcp_logits[13])
        assert updated.solver_logits is not params.solver_logits
        assert np.array_equal(updated.solver_logits, params.solver_logits)

    def test_fcp_requires_samples(self):
        with pytest.raises(ValueError):
            apply_fcp_update(ToyParams.zeros(V, MOD), [], 1.0)

    def test_distill_update_lowers_critique_nll(self):
        params = ToyParams.zeros(10, 10)
        sample = DistillSample(feature=5, answer=3, category=CATEGORIES.index('near_miss'))
        before = -critique_logprob(params, sample)
        params, after = apply_distill_update(params, [sample], 1.0)
        assert after < before
        assert after == pytest.approx(-critique_logprob(params, sample))

    def test_unified_update_reports_pre_update_terms(self):
        spec, training = ToyCorpusSpec(vocab_size=V, modulus=MOD), ToyTrainingConfig()
        policy = ToyPolicy.initial(spec, training, seed=0)
        start = policy.params.copy()
        decision = solver_decision(4, 1, V)
        report = apply_unified_update(
            policy, [Decision('constructor', (0, 1), 0)] * 2, [1.0, -1.0], [math.log(0.5)] * 2,
            [([decision] * 2, [1.0, -1.0], [math.log(0.2)] * 2)],
            [FcpSample(4, 0, 1)], [DistillSample(4, 1, 0)],
            EPS_LOW, EPS_HIGH, 0.0, 0.0, 0.5, 1.0)
        assert report.l_fcp == pytest.approx(math.log(V))
        assert report.l_distill == pytest.approx(math.log(3))
        assert report.fcp_nll_after < report.l_fcp
        assert not policy.params.equals(start)
        assert policy.ref.equals(start)

    def test_unified_update_terms_come_from_objective_kernels(self):
        rng = np.random.default_rng(11)
        spec = ToyCorpusSpec(vocab_size=V, modulus=MOD)
        policy = ToyPolicy.initial(spec, ToyTrainingConfig(), seed=0)
        policy.params = random_params(rng)
        start = policy.params.copy()
        decisions, advantages, logprobs_old = random_group(rng, start)
        fcp = [FcpSample(4, 0, 1), FcpSample(9, 2, 3)]
        distill = [DistillSample(4, 1, 0), DistillSample(7, 2, 1)]
        group = (decisions, advantages, logprobs_old)
        report = apply_unified_update(policy, *group, [group], fcp, distill, EPS_LOW, EPS_HIGH, 0.0, 0.0, 0.5, 1.0)
        terms = [(math.exp(logprob(start, d) - lp), a) for d, a, lp in zip(decisions, advantages, logprobs_old)]
        assert report.j_const == pytest.approx(grpo_objective(terms, EPS_LOW, EPS_HIGH))
        assert report.j_solver == pytest.approx(grpo_objective(terms, EPS_LOW, EPS_HIGH))
        assert report.l_fcp == pytest.approx(fcp_loss([logprob(start, fcp_decision(s.feature, s.category, s.answer, V))
                                                       for s in fcp]))
        assert report.l_distill == pytest.approx(distill_loss([critique_logprob(start, s) for s in distill]))


class TestEntropy:
    def test_uniform(self):
        assert entropy_estimate(ToyParams.zeros(10, 10), [0]) == pytest.approx(math.log(10), abs=1e-12)

    def test_deterministic(self):
        params = ToyParams.zeros(10, 10)
        params.solver_logits[1, 4] = 1000.0
        assert entropy_estimate(params, [1]) == pytest.approx(0.0, abs=1e-12)

    def test_mixture(self):
        params = ToyParams.zeros(10, 10)
        params.solver_logits[1, 4] = 1000.0
        assert abs(entropy_estimate(params, [0, 1]) - 1.151293) <= 1e-6
        assert entropy_estimate(params, [0, 1]) == pytest.approx(math.log(10) / 2, abs=1e-9)

    def test_empty(self):
        with pytest.raises(ValueError):
            entropy_estimate(ToyParams.zeros(10, 10), [])


class TestParamsIO:
    def test_save_load(self, tmp_path):
        params = random_params(np.random.default_rng(0))
        params.save(tmp_path / 'params.npz')
        assert ToyParams.load(tmp_path / 'params.npz').equals(params)

    def test_check_rejects_non_finite(self):
        params = ToyParams.zeros(V, MOD)
        params.fcp_logits[0, 0, 0] = np.inf
        with pytest.raises(NonFiniteGradientError):
            params.check()

    def test_feature_layout(self):
        assert feature_count(10) == len(OPERATORS) * 3 * 100
        assert feature_index((2, 2, 9, 9), 10) == feature_count(10) - 1

    def test_policy_restore(self):
        policy = ToyPolicy.initial(ToyCorpusSpec(), ToyTrainingConfig(), seed=3)
        state = policy.rng_state()
        draws = policy.rng.random(5)
        policy.restore(policy.params, state)
        assert np.array_equal(policy.rng.random(5), draws)

    def test_evaluate_solver_uniform(self):
        corpus = gen_corpus(ToyCorpusSpec(seed=2), 10)
        assert evaluate_solver(ToyParams.zeros(10, 10), corpus) == pytest.approx(0.1)
