# ALIVE Toy Policy Module
# Differentiable tabular policy, synthetic modular-arithmetic corpus and oracle reviewer
# Runs the full loop with real GRPO / FCP updates at desk scale

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import Config
from .datamodel import ConstructedTask, Document, Review, SolverRollout
from .optim import clipped_term_grad, distill_loss, fcp_loss, grpo_objective, weighted_fcp_loss
from .promptio import format_sections, parse_constructor, parse_reviewer, parse_solver

logger = logging.getLogger(__name__)

# Fixed operator universe so table shapes do not depend on the configured subset
OPERATORS = ('+', '-', '*')
SLOTS = ('a', 'b', 'c')
TABLES = ('constructor', 'solver', 'fcp')

CATEGORIES = ('exact', 'near_miss', 'far_miss')
CRITIQUE_TEXT = {
    'exact': 'The answer matches the hidden value; the local equation is solved correctly.',
    'near_miss': 'The answer is close to the hidden value but the modular arithmetic is off by a small amount.',
    'far_miss': 'The answer is far from the hidden value; re-derive it from the two visible operands.',
}
_CATEGORY_BY_TEXT = {text: name for name, text in CRITIQUE_TEXT.items()}


class NonFiniteGradientError(FloatingPointError):
    """An update produced a non-finite gradient; parameters were left unchanged."""


def _apply_op(op: str, a: int, b: int, modulus: int) -> int:
    if op == '+':
        return (a + b) % modulus
    if op == '-':
        return (a - b) % modulus
    if op == '*':
        return (a * b) % modulus
    raise ValueError(f"Unknown operator: {op}")


@dataclass(frozen=True)
class ToyCorpusSpec:
    """Shape of the synthetic corpus: digit vocabulary, chain length, modulus, seed."""

    vocab_size: int = 10
    chain_length: int = 4
    modulus: int = 10
    seed: int = 0
    operators: Tuple[str, ...] = ('+', '-')

    @classmethod
    def from_config(cls, config: Config) -> 'ToyCorpusSpec':
        d = cls()
        return cls(
            vocab_size=int(config.get('toy.vocab_size', d.vocab_size)),
            chain_length=int(config.get('toy.chain_length', d.chain_length)),
            modulus=int(config.get('toy.modulus', d.modulus)),
            seed=int(config.get('toy.seed', config.get('loop.seed', d.seed))),
            operators=tuple(config.get('toy.operators', list(d.operators))),
        )

    def violations(self) -> List[str]:
        problems = []
        if self.vocab_size < 2:
            problems.append("vocab_size must be ≥ 2")
        if self.chain_length < 1:
            problems.append("chain_length must be ≥ 1")
        if not 2 <= self.modulus <= self.vocab_size:
            problems.append("modulus must lie in [2, vocab_size]")
        if not self.operators or any(op not in OPERATORS for op in self.operators):
            problems.append(f"operators must be a non-empty subset of {OPERATORS}")
        return problems


@dataclass(frozen=True)
class ToyTrainingConfig:
    """Plain gradient step sizes and corpus size for toy training."""

    constructor_lr: float = 2.0
    solver_lr: float = 30.0
    fcp_lr: float = 10.0
    ppo_epochs: int = 2
    corpus_size: int = 512

    @classmethod
    def from_config(cls, config: Config) -> 'ToyTrainingConfig':
        d = cls()
        return cls(
            constructor_lr=float(config.get('toy.constructor_lr', d.constructor_lr)),
            solver_lr=float(config.get('toy.solver_lr', d.solver_lr)),
            fcp_lr=float(config.get('toy.fcp_lr', d.fcp_lr)),
            ppo_epochs=int(config.get('toy.ppo_epochs', d.ppo_epochs)),
            corpus_size=int(config.get('toy.corpus_size', d.corpus_size)),
        )

    def violations(self) -> List[str]:
        problems = []
        for name in ('constructor_lr', 'solver_lr', 'fcp_lr'):
            if not getattr(self, name) > 0:
                problems.append(f"toy {name} must be > 0")
        if self.ppo_epochs < 1:
            problems.append("toy ppo_epochs must be ≥ 1")
        if self.corpus_size < 1:
            problems.append("toy corpus_size must be ≥ 1")
        return problems


def local_solutions(op: str, slot: int, x: int, y: int, modulus: int) -> List[int]:
    """
    Every value of the masked slot consistent with the visible pair.

    Args:
        op (str): Equation operator.
        slot (int): Masked slot index (0 = a, 1 = b, 2 = c).
        x (int): First visible value (b for slot a, a otherwise).
        y (int): Second visible value (c for slots a and b, b for slot c).
        modulus (int): Arithmetic modulus.

    Returns:
        List[int]: Consistent candidates in increasing order.
    """
    if slot == 2:
        return [_apply_op(op, x, y, modulus)]
    if slot == 0:
        return [v for v in range(modulus) if _apply_op(op, v, x, modulus) == y]
    return [v for v in range(modulus) if _apply_op(op, x, v, modulus) == y]


@dataclass(frozen=True)
class ToyDocument:
    """A chain of modular equations a∘b=c where each result feeds the next equation."""

    document_id: str
    tokens: Tuple[int, ...]
    operators: Tuple[str, ...]
    modulus: int
    maskable_positions: Tuple[int, ...]
    seed: int = 0

    def equation(self, position: int) -> Tuple[int, int]:
        """(equation index, slot) of a token position."""
        return divmod(position, 3)

    def visible_pair(self, position: int) -> Tuple[int, int]:
        k, slot = self.equation(position)
        a, b, c = self.tokens[3 * k:3 * k + 3]
        return {0: (b, c), 1: (a, c), 2: (a, b)}[slot]

    def context(self, position: int) -> Tuple[int, int, int, int]:
        """(operator index, slot, x, y): everything the masked value depends on."""
        k, slot = self.equation(position)
        x, y = self.visible_pair(position)
        return OPERATORS.index(self.operators[k]), slot, x, y

    def render(self, masked: Optional[int] = None) -> str:
        parts = []
        for k, op in enumerate(self.operators):
            values = ['?' if 3 * k + i == masked else str(self.tokens[3 * k + i]) for i in range(3)]
            parts.append(f"{values[0]} {op} {values[1]} = {values[2]}")
        return '; '.join(parts) + f" (mod {self.modulus})"

    def to_document(self) -> Document:
        return Document(id=self.document_id, text=self.render(), source='toy', seed=self.seed)


def gen_corpus(spec: ToyCorpusSpec, count: int) -> List[ToyDocument]:
    """
    Generate ``count`` equation-chain documents, deterministic under ``spec.seed``.

    Args:
        spec (ToyCorpusSpec): Corpus shape.
        count (int): Number of documents.

    Returns:
        List[ToyDocument]: Documents whose maskable positions are uniquely recoverable.
    """
    problems = spec.violations()
    if problems:
        raise ValueError(f"Invalid toy corpus spec: {problems}")
    rng = np.random.default_rng(spec.seed)
    m = spec.modulus
    corpus = []
    for index in range(count):
        tokens: List[int] = []
        ops: List[str] = []
        a = int(rng.integers(m))
        for _ in range(spec.chain_length):
            op = spec.operators[int(rng.integers(len(spec.operators)))]
            b = int(rng.integers(m))
            c = _apply_op(op, a, b, m)
            tokens.extend((a, b, c))
            ops.append(op)
            a = c
        maskable = []
        for pos in range(len(tokens)):
            k, slot = divmod(pos, 3)
            x, y = {0: (tokens[3 * k + 1], tokens[3 * k + 2]),
                    1: (tokens[3 * k], tokens[3 * k + 2]),
                    2: (tokens[3 * k], tokens[3 * k + 1])}[slot]
            if len(local_solutions(ops[k], slot, x, y, m)) == 1:
                maskable.append(pos)
        corpus.append(ToyDocument(
            document_id=f"toy-{spec.seed}-{index:06d}",
            tokens=tuple(tokens),
            operators=tuple(ops),
            modulus=m,
            maskable_positions=tuple(maskable),
            seed=spec.seed,
        ))
    logger.info(f"Generated toy corpus: {count} documents, L={spec.chain_length}, mod {m}")
    return corpus


def feature_count(modulus: int) -> int:
    return len(OPERATORS) * len(SLOTS) * modulus * modulus


def feature_index(context: Tuple[int, int, int, int], modulus: int) -> int:
    op, slot, x, y = context
    return ((op * len(SLOTS) + slot) * modulus + x) * modulus + y


@dataclass
class ToyParams:
    """Logit tables for the three roles' decisions."""

    constructor_logits: np.ndarray  # (F,)
    solver_logits: np.ndarray       # (F, V)
    fcp_logits: np.ndarray          # (F, 3, V)

    @classmethod
    def zeros(cls, vocab_size: int, modulus: int) -> 'ToyParams':
        f = feature_count(modulus)
        return cls(np.zeros(f), np.zeros((f, vocab_size)), np.zeros((f, len(CATEGORIES), vocab_size)))

    @property
    def vocab_size(self) -> int:
        return self.solver_logits.shape[1]

    def table(self, name: str) -> np.ndarray:
        return getattr(self, f"{name}_logits")

    def copy(self) -> 'ToyParams':
        return ToyParams(self.constructor_logits.copy(), self.solver_logits.copy(), self.fcp_logits.copy())

    def zeros_like(self) -> 'ToyParams':
        return ToyParams(np.zeros_like(self.constructor_logits), np.zeros_like(self.solver_logits),
                         np.zeros_like(self.fcp_logits))

    def axpy(self, alpha: float, other: 'ToyParams') -> 'ToyParams':
        """Return self + alpha · other."""
        return ToyParams(self.constructor_logits + alpha * other.constructor_logits,
                         self.solver_logits + alpha * other.solver_logits,
                         self.fcp_logits + alpha * other.fcp_logits)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(self.table(t))) for t in TABLES)

    def check(self) -> None:
        """Raise unless every entry is finite and every softmax row sums to 1."""
        if not self.all_finite():
            raise NonFiniteGradientError("non-finite parameter entry")
        for rows in (self.solver_logits, self.fcp_logits):
            sums = softmax(rows, axis=-1).sum(axis=-1)
            if np.max(np.abs(sums - 1.0)) > 1e-12:
                raise FloatingPointError("softmax row does not sum to 1")

    def equals(self, other: 'ToyParams') -> bool:
        return all(np.array_equal(self.table(t), other.table(t)) for t in TABLES)

    def save(self, path: Union[str, Path]) -> None:
        with open(path, 'wb') as f:
            np.savez_compressed(f, constructor=self.constructor_logits, solver=self.solver_logits, fcp=self.fcp_logits)

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'ToyParams':
        with np.load(path) as data:
            return cls(data['constructor'].copy(), data['solver'].copy(), data['fcp'].copy())


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z)
    return shifted - math.log(float(np.exp(shifted).sum()))


@dataclass(frozen=True)
class Decision:
    """A categorical choice among ``entries`` (flat indices into one table)."""

    table: str
    entries: Tuple[int, ...]
    chosen: int

    def logits(self, params: ToyParams) -> np.ndarray:
        return params.table(self.table).ravel()[list(self.entries)]


@dataclass(frozen=True)
class SparseGrad:
    """Gradient restricted to one decision's entries; zeros elsewhere."""

    table: str
    entries: Tuple[int, ...]
    values: np.ndarray

    def to_dense(self, like: ToyParams) -> ToyParams:
        grad = like.zeros_like()
        np.add.at(grad.table(self.table).reshape(-1), list(self.entries), self.values)
        return grad


def solver_decision(feature: int, answer: int, vocab_size: int) -> Decision:
    base = feature * vocab_size
    return Decision('solver', tuple(range(base, base + vocab_size)), answer)


def fcp_decision(feature: int, category: int, answer: int, vocab_size: int) -> Decision:
    base = (feature * len(CATEGORIES) + category) * vocab_size
    return Decision('fcp', tuple(range(base, base + vocab_size)), answer)


def critique_decision(feature: int, answer: int, category: int, vocab_size: int) -> Decision:
    """The critique-category head: the fcp table read along its category axis."""
    entries = tuple((feature * len(CATEGORIES) + c) * vocab_size + answer for c in range(len(CATEGORIES)))
    return Decision('fcp', entries, category)


def logprob(params: ToyParams, decision: Decision) -> float:
    """Log-softmax of the decision's logits at the chosen candidate."""
    return float(log_softmax(decision.logits(params))[decision.chosen])


def grad_logprob(params: ToyParams, decision: Decision) -> SparseGrad:
    """(one-hot − softmax) on the decision's logits."""
    probs = softmax(decision.logits(params))
    values = -probs
    values[decision.chosen] += 1.0
    return SparseGrad(decision.table, decision.entries, values)


def entropy_estimate(params: ToyParams, contexts: Sequence[int]) -> float:
    """Mean Shannon entropy (nats) of the solver's distributions over ``contexts`` (feature indices)."""
    if len(contexts) == 0:
        raise ValueError("contexts must be non-empty")
    rows = params.solver_logits[list(contexts)]
    logp = rows - np.max(rows, axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    entropies = -(p * logp).sum(axis=1)
    return float(np.mean(entropies))


def kl_divergence(params: ToyParams, ref: ToyParams, decision: Decision) -> float:
    """KL(π_θ ‖ π_ref) over one decision's candidates."""
    logp = log_softmax(decision.logits(params))
    logq = log_softmax(decision.logits(ref))
    return float(np.sum(np.exp(logp) * (logp - logq)))


def grad_kl(params: ToyParams, ref: ToyParams, decision: Decision) -> SparseGrad:
    logp = log_softmax(decision.logits(params))
    logq = log_softmax(decision.logits(ref))
    p = np.exp(logp)
    kl = float(np.sum(p * (logp - logq)))
    return SparseGrad(decision.table, decision.entries, p * (logp - logq - kl))


def grpo_surrogate(params: ToyParams, decisions: Sequence[Decision], advantages: Sequence[float],
                   logprobs_old: Sequence[float], eps_low: float, eps_high: float,
                   kl_coeff: float = 0.0, ref: Optional[ToyParams] = None) -> float:
    """Clipped group objective of one sampled group under ``params``, with the KL hook toward ``ref``."""
    terms = [(math.exp(logprob(params, d) - lp_old), a) for d, a, lp_old in zip(decisions, advantages, logprobs_old)]
    kl_value = 0.0
    if kl_coeff and ref is not None:
        kl_value = float(np.mean([kl_divergence(params, ref, d) for d in decisions]))
    return grpo_objective(terms, eps_low, eps_high, kl_coeff, kl_value)


def grpo_gradient(params: ToyParams, decisions: Sequence[Decision], advantages: Sequence[float],
                  logprobs_old: Sequence[float], eps_low: float, eps_high: float,
                  kl_coeff: float = 0.0, ref: Optional[ToyParams] = None) -> ToyParams:
    """Analytic gradient of ``grpo_surrogate`` with respect to every table."""
    if not (len(decisions) == len(advantages) == len(logprobs_old)) or not decisions:
        raise ValueError("decisions, advantages and logprobs_old must be equal-length and non-empty")
    grad = params.zeros_like()
    scale = 1.0 / len(decisions)
    for d, a, lp_old in zip(decisions, advantages, logprobs_old):
        if lp_old is None:
            raise ValueError("logprob_old is required for a policy-gradient update")
        rho = math.exp(logprob(params, d) - lp_old)
        coef = clipped_term_grad(rho, a, eps_low, eps_high)
        if coef:
            g = grad_logprob(params, d)
            np.add.at(grad.table(d.table).reshape(-1), list(d.entries), scale * coef * g.values)
        if kl_coeff and ref is not None:
            g = grad_kl(params, ref, d)
            np.add.at(grad.table(d.table).reshape(-1), list(d.entries), -scale * kl_coeff * g.values)
    return grad


def apply_grpo_update(params: ToyParams, decisions: Sequence[Decision], advantages: Sequence[float],
                      logprobs_old: Sequence[float], eps_low: float, eps_high: float, learning_rate: float,
                      kl_coeff: float = 0.0, ref: Optional[ToyParams] = None) -> ToyParams:
    """
    One gradient-ascent step on the clipped group objective.

    Args:
        params (ToyParams): Current parameters (not modified).
        decisions (Sequence[Decision]): Sampled decisions of the group.
        advantages (Sequence[float]): Group-normalized advantages.
        logprobs_old (Sequence[float]): Sampling-time log-probabilities.
        eps_low (float): Lower clip width.
        eps_high (float): Upper clip width.
        learning_rate (float): Step size.
        kl_coeff (float): KL penalty coefficient against ``ref``.
        ref (Optional[ToyParams]): Reference snapshot for the KL hook.

    Returns:
        ToyParams: Updated parameters; entries no decision touches are unchanged.
    """
    grad = grpo_gradient(params, decisions, advantages, logprobs_old, eps_low, eps_high, kl_coeff, ref)
    if not grad.all_finite():
        raise NonFiniteGradientError("non-finite GRPO gradient")
    updated = params.axpy(learning_rate, grad)
    updated.check()
    return updated


def nll(params: ToyParams, decisions: Sequence[Decision], weights: Optional[Sequence[float]] = None) -> float:
    """Weighted mean negative log-likelihood of the chosen candidates."""
    if not decisions:
        raise ValueError("samples must be non-empty")
    logprobs = [logprob(params, d) for d in decisions]
    if weights is None:
        return fcp_loss(logprobs)
    return weighted_fcp_loss(logprobs, weights)


def nll_gradient(params: ToyParams, decisions: Sequence[Decision],
                 weights: Optional[Sequence[float]] = None) -> ToyParams:
    """Gradient of ``nll`` (points uphill; descend by subtracting)."""
    weights = weights if weights is not None else [1.0] * len(decisions)
    total_w = float(sum(weights))
    grad = params.zeros_like()
    for d, w in zip(decisions, weights):
        g = grad_logprob(params, d)
        np.add.at(grad.table(d.table).reshape(-1), list(d.entries), -(w / total_w) * g.values)
    return grad


def _descend(params: ToyParams, decisions: Sequence[Decision], weights: Optional[Sequence[float]],
             learning_rate: float) -> Tuple[ToyParams, float]:
    grad = nll_gradient(params, decisions, weights)
    if not grad.all_finite():
        raise NonFiniteGradientError("non-finite NLL gradient")
    updated = params.axpy(-learning_rate, grad)
    updated.check()
    return updated, nll(updated, decisions, weights)


@dataclass(frozen=True)
class FcpSample:
    """π(answer | context, critique category) training target."""

    feature: int
    category: int
    answer: int
    weight: float = 1.0


@dataclass(frozen=True)
class DistillSample:
    """Teacher critique category for (context, answer)."""

    feature: int
    answer: int
    category: int


def apply_fcp_update(params: ToyParams, samples: Sequence[FcpSample],
                     learning_rate: float) -> Tuple[ToyParams, float]:
    """Descend the feedback-conditional NLL of the fcp table; returns (params, new NLL)."""
    if not samples:
        raise ValueError("samples must be non-empty")
    v = params.vocab_size
    decisions = [fcp_decision(s.feature, s.category, s.answer, v) for s in samples]
    return _descend(params, decisions, [s.weight for s in samples], learning_rate)


def fcp_nll(params: ToyParams, samples: Sequence[FcpSample]) -> float:
    v = params.vocab_size
    return nll(params, [fcp_decision(s.feature, s.category, s.answer, v) for s in samples],
               [s.weight for s in samples])


def critique_logprob(params: ToyParams, sample: DistillSample) -> float:
    return logprob(params, critique_decision(sample.feature, sample.answer, sample.category, params.vocab_size))


def apply_distill_update(params: ToyParams, samples: Sequence[DistillSample],
                         learning_rate: float) -> Tuple[ToyParams, float]:
    """Descend the teacher-critique NLL under the critique-category head."""
    if not samples:
        raise ValueError("samples must be non-empty")
    v = params.vocab_size
    decisions = [critique_decision(s.feature, s.answer, s.category, v) for s in samples]
    return _descend(params, decisions, None, learning_rate)


def circular_distance(a: int, b: int, vocab_size: int) -> int:
    d = abs(a - b) % vocab_size
    return min(d, vocab_size - d)


def critique_category(distance: int) -> str:
    if distance == 0:
        return 'exact'
    if distance <= 2:
        return 'near_miss'
    return 'far_miss'


def category_of_critique(critique: str) -> int:
    """Index of the category whose template produced ``critique`` (far_miss when unknown)."""
    return CATEGORIES.index(_CATEGORY_BY_TEXT.get(critique, 'far_miss'))


def parse_answer_token(answer: str, vocab_size: int) -> Optional[int]:
    try:
        value = int(answer.strip())
    except ValueError:
        return None
    return value if 0 <= value < vocab_size else None


def toy_review(task: ConstructedTask, rollout: SolverRollout, vocab_size: int = 10,
               reviewer_kind: str = 'teacher') -> Review:
    """
    Deterministic oracle review: v = 1 − d_circ(a, y*) / ⌊V/2⌋ plus the category critique.

    Args:
        task (ConstructedTask): Task carrying the hidden digit.
        rollout (SolverRollout): Rollout whose answer is judged.
        vocab_size (int): V.
        reviewer_kind (str): Stored reviewer kind.

    Returns:
        Review: Parsed from the rendered tag output.
    """
    truth = parse_answer_token(task.hidden_truth, vocab_size)
    answer = parse_answer_token(rollout.answer, vocab_size)
    if truth is None or answer is None:
        category, score = 'far_miss', 0.0
        analysis = f"Answer {rollout.answer!r} is not a token in [0, {vocab_size})."
    else:
        distance = circular_distance(answer, truth, vocab_size)
        category = critique_category(distance)
        score = 1.0 - distance / (vocab_size // 2)
        analysis = f"Answer {answer} vs hidden {truth}: circular distance {distance} (mod {vocab_size})."
    text = format_sections([('Analysis', analysis), ('Critique', CRITIQUE_TEXT[category]), ('Score', repr(score))])
    parsed = parse_reviewer(text)
    return Review(rollout_id=rollout.rollout_id, analysis=parsed.analysis, critique=parsed.critique,
                  soft_score=parsed.soft_score, reviewer_kind=reviewer_kind, clamped=parsed.clamped)


@dataclass(frozen=True)
class ToyTask:
    """A constructed toy task with the decision that produced it."""

    task: ConstructedTask
    document: ToyDocument
    position: int
    feature: int
    decision: Decision


@dataclass(frozen=True)
class ToySolution:
    rollout: SolverRollout
    decision: Decision
    answer: int


def toy_construct(params: ToyParams, doc: ToyDocument, M: int, rng: np.random.Generator) -> List[ToyTask]:
    """
    Sample M tasks, each masking one maskable position.

    Args:
        params (ToyParams): Policy parameters.
        doc (ToyDocument): Source document.
        M (int): Tasks to sample.
        rng (np.random.Generator): Sampling stream.

    Returns:
        List[ToyTask]: Tasks whose ``logprob_old`` is the log-probability of the chosen position.
    """
    if not doc.maskable_positions:
        raise ValueError(f"Document {doc.document_id} has no maskable position")
    m = doc.modulus
    features = [feature_index(doc.context(p), m) for p in doc.maskable_positions]
    entries = tuple(features)
    probs = softmax(params.constructor_logits[features])
    picks = rng.choice(len(features), size=M, p=probs)
    tasks = []
    for i, pick in enumerate(picks):
        pick = int(pick)
        position = doc.maskable_positions[pick]
        decision = Decision('constructor', entries, pick)
        lp = logprob(params, decision)
        k, slot = doc.equation(position)
        thought = f"Equation {k + 1} links the chain; masking its {SLOTS[slot]} term forces solving it."
        completion = format_sections([
            ('Thought', thought),
            ('Task', f"Fill in the ? so that every equation holds: {doc.render(masked=position)}"),
            ('Hidden_Truth', str(doc.tokens[position])),
        ])
        parsed = parse_constructor(completion, check_leak=False)
        task = ConstructedTask(
            task_id=f"{doc.document_id}-t{i:02d}",
            document_id=doc.document_id,
            query=parsed.query,
            hidden_truth=parsed.hidden_truth,
            thought=parsed.thought,
            rollout_index=i,
            valid=parsed.valid,
            logprob_old=lp,
            completion=completion,
            leak_checked=False,
        )
        tasks.append(ToyTask(task=task, document=doc, position=position, feature=features[pick], decision=decision))
    return tasks


def toy_solve(params: ToyParams, toy_task: ToyTask, N: int, rng: np.random.Generator) -> List[ToySolution]:
    """
    Sample N answers from the solver's distribution for the task's context.

    Args:
        params (ToyParams): Policy parameters.
        toy_task (ToyTask): A valid task.
        N (int): Samples.
        rng (np.random.Generator): Sampling stream.

    Returns:
        List[ToySolution]: Rollouts with templated reasoning and ``logprob_old``.
    """
    if not toy_task.task.valid:
        raise ValueError(f"Task {toy_task.task.task_id} is not valid")
    v = params.vocab_size
    doc, position = toy_task.document, toy_task.position
    k, _ = doc.equation(position)
    equation = doc.render(masked=position).split('; ')[k]
    probs = softmax(params.solver_logits[toy_task.feature])
    answers = rng.choice(v, size=N, p=probs)
    solutions = []
    for j, answer in enumerate(answers):
        answer = int(answer)
        decision = solver_decision(toy_task.feature, answer, v)
        reasoning = f"The gap sits in {equation}; solving the local equation gives {answer}."
        completion = format_sections([('Reasoning', reasoning), ('Answer', str(answer))])
        parsed = parse_solver(completion)
        rollout = SolverRollout(
            rollout_id=f"{toy_task.task.task_id}-s{j:02d}",
            task_id=toy_task.task.task_id,
            reasoning=parsed.reasoning,
            answer=parsed.answer,
            sample_index=j,
            logprob_old=logprob(params, decision),
            completion=completion,
        )
        solutions.append(ToySolution(rollout=rollout, decision=decision, answer=answer))
    return solutions


def evaluate_solver(params: ToyParams, documents: Sequence[ToyDocument]) -> float:
    """Expected exact-match accuracy over every maskable position of ``documents``."""
    probs = []
    for doc in documents:
        for pos in doc.maskable_positions:
            f = feature_index(doc.context(pos), doc.modulus)
            probs.append(float(softmax(params.solver_logits[f])[doc.tokens[pos]]))
    return float(np.mean(probs)) if probs else 0.0


@dataclass(frozen=True)
class UnifiedUpdateReport:
    j_const: float
    j_solver: float
    l_fcp: float
    l_distill: float
    fcp_nll_after: float


@dataclass
class ToyPolicy:
    """Parameters, reference snapshot and sampling stream of one toy run."""

    spec: ToyCorpusSpec
    training: ToyTrainingConfig
    params: ToyParams
    ref: ToyParams
    rng: np.random.Generator = field(repr=False, default=None)

    @classmethod
    def initial(cls, spec: ToyCorpusSpec, training: ToyTrainingConfig, seed: int) -> 'ToyPolicy':
        params = ToyParams.zeros(spec.vocab_size, spec.modulus)
        return cls(spec=spec, training=training, params=params, ref=params.copy(),
                   rng=np.random.default_rng(seed))

    def rng_state(self) -> Dict[str, Any]:
        return self.rng.bit_generator.state

    def restore(self, params: ToyParams, rng_state: Dict[str, Any]) -> None:
        self.params = params
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = rng_state


def apply_unified_update(policy: ToyPolicy, constructor_decisions: Sequence[Decision],
                         constructor_advantages: Sequence[float], constructor_logprobs: Sequence[float],
                         solver_groups: Sequence[Tuple[Sequence[Decision], Sequence[float], Sequence[float]]],
                         fcp_samples: Sequence[FcpSample], distill_samples: Sequence[DistillSample],
                         eps_low: float, eps_high: float, alpha_kl: float, beta_kl: float,
                         lambda2: float, lambda3: float) -> UnifiedUpdateReport:
    """
    Apply every gradient source of one step to ``policy.params``.

    Constructor and per-task solver GRPO ascents run ``ppo_epochs`` times against
    the sampling-time log-probabilities; FCP and distillation descents are scaled
    by λ₂ and λ₃.

    Returns:
        UnifiedUpdateReport: Objective terms measured before the update.
    """
    train = policy.training
    params, ref = policy.params, policy.ref

    j_const = grpo_surrogate(params, constructor_decisions, constructor_advantages, constructor_logprobs,
                             eps_low, eps_high, alpha_kl, ref)
    j_solver_terms = [grpo_surrogate(params, d, a, lp, eps_low, eps_high, beta_kl, ref)
                      for d, a, lp in solver_groups]
    j_solver = float(np.mean(j_solver_terms)) if j_solver_terms else 0.0
    l_fcp = fcp_nll(params, fcp_samples) if fcp_samples else 0.0
    l_distill = distill_loss([critique_logprob(params, s) for s in distill_samples]) if distill_samples else 0.0

    for _ in range(train.ppo_epochs):
        params = apply_grpo_update(params, constructor_decisions, constructor_advantages, constructor_logprobs,
                                   eps_low, eps_high, train.constructor_lr, alpha_kl, ref)
        for decisions, advantages, logprobs_old in solver_groups:
            params = apply_grpo_update(params, decisions, advantages, logprobs_old,
                                       eps_low, eps_high, train.solver_lr, beta_kl, ref)

    fcp_after = l_fcp
    if fcp_samples and lambda2 > 0:
        params, fcp_after = apply_fcp_update(params, fcp_samples, train.fcp_lr * lambda2)
    if distill_samples and lambda3 > 0:
        params, _ = apply_distill_update(params, distill_samples, train.fcp_lr * lambda3)

    policy.params = params
    return UnifiedUpdateReport(j_const=j_const, j_solver=j_solver, l_fcp=l_fcp, l_distill=l_distill,
                               fcp_nll_after=fcp_after)
