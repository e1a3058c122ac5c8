# ALIVE Engine Module
# Orchestrates construct → solve → review → update steps, warm-up distillation and run persistence
# Toy and remote roles share one phase pipeline; step directories are committed atomically

import hashlib
import json
import logging
import os
import re
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

from .backend import BackendConfig, BackendError, GenRequest, GenerationBackend, RemoteBackend
from .config import Config
from .corpus import CorpusLoader, document_digest
from .datamodel import (
    SCHEMA_VERSION,
    ConstructedTask,
    Document,
    LoopConfig,
    ObjectiveBreakdown,
    Review,
    RewardRecord,
    SkippedSlots,
    SolverRollout,
    StepMetrics,
    TrainingBatchItem,
    count_batch_items,
    realized_batch_items,
    to_envelope,
    validate_config,
)
from .optim import AdvantageGroup, lambda3_schedule, mean_or_none, normalize_group, total_objective
from .promptio import PromptTemplate, TagParseError, load_templates, parse_constructor, parse_reviewer, parse_solver
from .reward import (
    MatchPolicy,
    constructor_reward,
    exact_match,
    group_accuracy,
    lambda1,
    solver_reward,
    token_length,
)
from .store import BATCHES, METRICS, REWARDS, TRAJECTORIES, RecordStore, read_records
from .toypolicy import (
    DistillSample,
    FcpSample,
    ToyCorpusSpec,
    ToyDocument,
    ToyParams,
    ToyPolicy,
    ToySolution,
    ToyTask,
    ToyTrainingConfig,
    UnifiedUpdateReport,
    apply_unified_update,
    category_of_critique,
    entropy_estimate,
    gen_corpus,
    toy_construct,
    toy_review,
    toy_solve,
)

STEPS_DIR = 'steps'
STEP_MANIFEST = 'step.json'
PARAMS_FILE = 'params.npz'
STATE_FILE = 'state.json'
CONFIG_SNAPSHOT = 'config.yaml'
_STEP_DIR = re.compile(r'^step_(\d{6})$')

logger = logging.getLogger(__name__)


class EngineError(RuntimeError):
    """The loop cannot proceed (bad configuration, schedule violation, role contract breach)."""


class ResumeError(EngineError):
    """Persisted run state cannot be resumed; ``step`` names the offending step."""

    def __init__(self, step: int, message: str):
        super().__init__(f"Cannot resume at step {step}: {message}")
        self.step = step


def step_dir_name(step: int) -> str:
    return f"step_{step:06d}"


def committed_steps(run_dir: Union[str, Path]) -> List[int]:
    """Indices of committed step directories, ascending."""
    steps_root = Path(run_dir) / STEPS_DIR
    if not steps_root.exists():
        return []
    steps = []
    for entry in steps_root.iterdir():
        match = _STEP_DIR.match(entry.name)
        if match and entry.is_dir():
            steps.append(int(match.group(1)))
    return sorted(steps)


@dataclass(frozen=True)
class RunMode:
    """Toy or remote execution, and who reviews (the policy itself or an oracle model)."""

    mode: str = 'toy'
    reviewer_source: str = 'self'
    oracle_backend: Optional[BackendConfig] = None

    def violations(self) -> List[str]:
        problems = []
        if self.mode not in ('toy', 'remote'):
            problems.append(f"mode must be toy or remote, got {self.mode!r}")
        if self.reviewer_source not in ('self', 'oracle'):
            problems.append(f"reviewer_source must be self or oracle, got {self.reviewer_source!r}")
        if self.reviewer_source == 'oracle' and self.oracle_backend is None and self.mode == 'remote':
            problems.append("reviewer_source oracle requires oracle_backend")
        return problems


@dataclass
class StepPlan:
    """Everything one loop step produced, before and after persistence."""

    step: int
    warmup: bool
    document: Document
    tasks: List[ConstructedTask]
    skipped: List[SkippedSlots]
    rollouts: Dict[str, List[SolverRollout]]
    reviews: Dict[str, Review]
    teacher_reviews: Dict[str, Union[Review, str]]
    accuracies: Dict[str, float]
    rewards: List[RewardRecord]
    constructor_group: AdvantageGroup
    solver_groups: Dict[str, AdvantageGroup]
    batch_items: List[TrainingBatchItem] = field(default_factory=list)
    objective: Optional[ObjectiveBreakdown] = None

    @property
    def valid_tasks(self) -> List[ConstructedTask]:
        return [t for t in self.tasks if t.valid]

    def ordered_rollouts(self) -> List[SolverRollout]:
        return [r for t in self.valid_tasks for r in self.rollouts[t.task_id]]

    @property
    def distill_ok(self) -> int:
        return sum(1 for v in self.teacher_reviews.values() if isinstance(v, Review))

    def realized_items(self) -> int:
        """1 + M + realized rollouts + successful distillation samples."""
        return realized_batch_items(len(self.tasks), len(self.ordered_rollouts()), self.distill_ok)

    def manifest(self) -> Dict[str, object]:
        return {
            'schema_version': SCHEMA_VERSION,
            'step': self.step,
            'warmup': self.warmup,
            'document_id': self.document.id,
            'M': len(self.tasks),
            'N': max((len(v) for v in self.rollouts.values()), default=0),
            'valid_tasks': len(self.valid_tasks),
            'rollouts': len(self.ordered_rollouts()),
            'distill_ok': self.distill_ok,
            'distill_failed': len(self.teacher_reviews) - self.distill_ok,
            'expected_items': self.realized_items(),
        }

    def records(self) -> Dict[str, List[object]]:
        """Records per stream, in phase order."""
        trajectories: List[object] = [self.document, *self.tasks, *self.skipped]
        rollouts = self.ordered_rollouts()
        trajectories.extend(rollouts)
        trajectories.extend(self.reviews[r.rollout_id] for r in rollouts)
        trajectories.extend(v for v in self.teacher_reviews.values() if isinstance(v, Review))
        return {
            TRAJECTORIES: trajectories,
            REWARDS: list(self.rewards),
            BATCHES: list(self.batch_items),
        }

    def digest(self) -> str:
        """Content hash over every record of the step."""
        h = hashlib.sha256()
        for stream, records in self.records().items():
            h.update(stream.encode())
            for record in records:
                h.update(json.dumps(to_envelope(record), sort_keys=True).encode())
        return h.hexdigest()


class Roles(Protocol):
    """Role adapter surface shared by toy and remote execution."""

    has_teacher: bool

    def construct(self, document: Document, M: int, step: int) -> List[ConstructedTask]: ...

    def solve(self, tasks: Sequence[ConstructedTask], N: int) -> Dict[str, List[SolverRollout]]: ...

    def review(self, pairs: Sequence[Tuple[ConstructedTask, SolverRollout]]) -> List[Review]: ...

    def teacher_review(self, pairs: Sequence[Tuple[ConstructedTask, SolverRollout]]) -> List[Union[Review, str]]: ...

    def entropy(self, plan: StepPlan) -> Optional[float]: ...

    def update(self, plan: StepPlan, cfg: LoopConfig) -> Optional[UnifiedUpdateReport]: ...

    def save_state(self, directory: Path) -> None: ...

    def load_state(self, directory: Path, step: int) -> None: ...


class ToyRoles:
    """Roles played by the tabular toy policy, with the oracle reviewer as critic and teacher."""

    has_teacher = True

    def __init__(self, policy: ToyPolicy, corpus: Sequence[ToyDocument]):
        self.policy = policy
        self.documents = {doc.document_id: doc for doc in corpus}
        self.logger = logging.getLogger(__name__)
        self._tasks: Dict[str, ToyTask] = {}
        self._solutions: Dict[str, List[ToySolution]] = {}

    @property
    def vocab_size(self) -> int:
        return self.policy.spec.vocab_size

    def construct(self, document: Document, M: int, step: int) -> List[ConstructedTask]:
        toy_tasks = toy_construct(self.policy.params, self.documents[document.id], M, self.policy.rng)
        self._tasks = {t.task.task_id: t for t in toy_tasks}
        self._solutions = {}
        return [t.task for t in toy_tasks]

    def solve(self, tasks: Sequence[ConstructedTask], N: int) -> Dict[str, List[SolverRollout]]:
        out = {}
        for task in tasks:
            solutions = toy_solve(self.policy.params, self._tasks[task.task_id], N, self.policy.rng)
            self._solutions[task.task_id] = solutions
            out[task.task_id] = [s.rollout for s in solutions]
        return out

    def review(self, pairs: Sequence[Tuple[ConstructedTask, SolverRollout]]) -> List[Review]:
        return [toy_review(task, rollout, self.vocab_size, reviewer_kind='self') for task, rollout in pairs]

    def teacher_review(self, pairs: Sequence[Tuple[ConstructedTask, SolverRollout]]) -> List[Union[Review, str]]:
        return [toy_review(task, rollout, self.vocab_size, reviewer_kind='teacher') for task, rollout in pairs]

    def entropy(self, plan: StepPlan) -> Optional[float]:
        features = [self._tasks[t.task_id].feature for t in plan.valid_tasks]
        return entropy_estimate(self.policy.params, features) if features else None

    def update(self, plan: StepPlan, cfg: LoopConfig) -> UnifiedUpdateReport:
        constructor_decisions = [self._tasks[t.task_id].decision for t in plan.tasks]
        constructor_logprobs = [t.logprob_old for t in plan.tasks]

        solver_groups = []
        fcp_samples = []
        distill_samples = []
        for task in plan.valid_tasks:
            toy_task = self._tasks[task.task_id]
            solutions = self._solutions[task.task_id]
            group = plan.solver_groups[task.task_id]
            solver_groups.append(([s.decision for s in solutions], group.advantages,
                                  [s.rollout.logprob_old for s in solutions]))
            for solution in solutions:
                rid = solution.rollout.rollout_id
                category = category_of_critique(plan.reviews[rid].critique)
                weight = 1.0 if category == 0 else cfg.fcp_negative_weight
                fcp_samples.append(FcpSample(toy_task.feature, category, solution.answer, weight))
                teacher = plan.teacher_reviews.get(rid)
                if isinstance(teacher, Review):
                    distill_samples.append(DistillSample(toy_task.feature, solution.answer,
                                                         category_of_critique(teacher.critique)))

        if fcp_samples and sum(s.weight for s in fcp_samples) <= 0:
            fcp_samples = []
        lam3 = lambda3_schedule(plan.step, cfg.warmup_steps, cfg.lambda3_warmup_value) if plan.warmup else 0.0
        return apply_unified_update(
            self.policy, constructor_decisions, plan.constructor_group.advantages, constructor_logprobs,
            solver_groups, fcp_samples, distill_samples,
            cfg.eps_clip_low, cfg.eps_clip_high, cfg.alpha_kl, cfg.beta_kl, cfg.lambda2, lam3,
        )

    def save_state(self, directory: Path) -> None:
        self.policy.params.save(directory / PARAMS_FILE)
        with open(directory / STATE_FILE, 'w') as f:
            json.dump({'rng': self.policy.rng_state()}, f)

    def load_state(self, directory: Path, step: int) -> None:
        try:
            params = ToyParams.load(directory / PARAMS_FILE)
            with open(directory / STATE_FILE, 'r') as f:
                state = json.load(f)
            self.policy.restore(params, state['rng'])
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise ResumeError(step, f"toy policy state unreadable ({e})") from e


class RemoteRoles:
    """Roles played by remote models through rendered prompts; never updates parameters."""

    def __init__(self, backend: GenerationBackend, cfg: LoopConfig,
                 templates: Dict[str, PromptTemplate], oracle: Optional[GenerationBackend] = None,
                 reviewer_source: str = 'self'):
        """
        Initialize remote role adapter.

        Args:
            backend (GenerationBackend): Policy model serving constructor, solver and self-review.
            cfg (LoopConfig): Temperature, per-role token limits and review samples.
            templates (Dict[str, PromptTemplate]): Role templates.
            oracle (Optional[GenerationBackend]): Teacher model for warm-up critiques and oracle review.
            reviewer_source (str): ``self`` or ``oracle``.
        """
        self.backend = backend
        self.oracle = oracle
        self.cfg = cfg
        self.templates = templates
        self.reviewer_source = reviewer_source
        self.logger = logging.getLogger(__name__)
        self.prompt_log: List[Tuple[str, str, str]] = []

    @property
    def has_teacher(self) -> bool:
        return self.oracle is not None

    def _render(self, role: str, key: str, **bindings: str) -> str:
        prompt = self.templates[role].render(bindings)
        self.prompt_log.append((role, key, prompt))
        return prompt

    @staticmethod
    def _unwrap(results: List[Union[object, BackendError]], what: str) -> List[object]:
        for result in results:
            if isinstance(result, BackendError):
                raise EngineError(f"{what} failed: {result}") from result
        return results

    def construct(self, document: Document, M: int, step: int) -> List[ConstructedTask]:
        prompt = self._render('constructor', document.id, RAW_DOCUMENT=document.text)
        req = GenRequest('constructor', prompt, n=M, temperature=self.cfg.temperature,
                         max_tokens=self.cfg.max_tokens_constructor, tag=f"s{step:06d}-construct")
        result = self._unwrap(self.backend.generate_group([req]), 'constructor generation')[0]
        tasks = []
        for i, completion in enumerate(result.completions):
            lp = min(result.logprobs[i], 0.0) if result.logprobs else None
            task_id = f"s{step:06d}-t{i:02d}"
            try:
                parsed = parse_constructor(completion)
            except TagParseError as e:
                tasks.append(ConstructedTask(task_id=task_id, document_id=document.id, query='', hidden_truth='',
                                             thought='', rollout_index=i, valid=False, logprob_old=lp,
                                             completion=completion, parse_error=str(e)))
                continue
            valid, error = parsed.valid, ('hidden truth leaked into task' if parsed.leaked else None)
            tasks.append(ConstructedTask(task_id=task_id, document_id=document.id, query=parsed.query,
                                         hidden_truth=parsed.hidden_truth, thought=parsed.thought,
                                         rollout_index=i, valid=valid, logprob_old=lp,
                                         completion=completion, parse_error=error))
        return tasks

    def solve(self, tasks: Sequence[ConstructedTask], N: int) -> Dict[str, List[SolverRollout]]:
        reqs = [GenRequest('solver', self._render('solver', t.task_id, CONSTRUCTED_TASK=t.query), n=N,
                           temperature=self.cfg.temperature, max_tokens=self.cfg.max_tokens_solver,
                           tag=f"{t.task_id}-solve") for t in tasks]
        results = self._unwrap(self.backend.generate_group(reqs), 'solver generation')
        out = {}
        for task, result in zip(tasks, results):
            rollouts = []
            for j, completion in enumerate(result.completions):
                lp = min(result.logprobs[j], 0.0) if result.logprobs else None
                try:
                    parsed = parse_solver(completion)
                    reasoning, answer, error = parsed.reasoning, parsed.answer, None
                except TagParseError as e:
                    reasoning, answer, error = '', '', str(e)
                rollouts.append(SolverRollout(rollout_id=f"{task.task_id}-s{j:02d}", task_id=task.task_id,
                                              reasoning=reasoning, answer=answer, sample_index=j,
                                              logprob_old=lp, completion=completion, parse_error=error))
            out[task.task_id] = rollouts
        return out

    def _review_requests(self, pairs: Sequence[Tuple[ConstructedTask, SolverRollout]], n: int,
                         label: str) -> List[GenRequest]:
        return [GenRequest('reviewer',
                           self._render('reviewer', rollout.rollout_id, CONSTRUCTED_TASK=task.query,
                                        SOLVER_OUTPUT=rollout.completion, HIDDEN_TRUTH=task.hidden_truth),
                           n=n, temperature=self.cfg.temperature, max_tokens=self.cfg.max_tokens_reviewer,
                           tag=f"{rollout.rollout_id}-{label}")
                for task, rollout in pairs]

    def review(self, pairs: Sequence[Tuple[ConstructedTask, SolverRollout]]) -> List[Review]:
        k = self.cfg.review_samples
        kind = 'teacher' if self.reviewer_source == 'oracle' else 'self'
        backend = self.oracle if self.reviewer_source == 'oracle' else self.backend
        results = self._unwrap(backend.generate_group(self._review_requests(pairs, k, 'review')), 'review')
        reviews = []
        for (task, rollout), result in zip(pairs, results):
            parsed, errors = [], []
            for completion in result.completions:
                try:
                    parsed.append(parse_reviewer(completion))
                except TagParseError as e:
                    errors.append(str(e))
            if not parsed:
                reviews.append(Review(rollout_id=rollout.rollout_id, analysis='', critique='unparseable review',
                                      soft_score=0.0, reviewer_kind=kind, parse_error=errors[0], samples=k))
                continue
            score = sum(p.soft_score for p in parsed) / len(parsed)
            reviews.append(Review(rollout_id=rollout.rollout_id, analysis=parsed[0].analysis,
                                  critique=parsed[0].critique, soft_score=score, reviewer_kind=kind,
                                  clamped=any(p.clamped for p in parsed), samples=k))
        return reviews

    def teacher_review(self, pairs: Sequence[Tuple[ConstructedTask, SolverRollout]]) -> List[Union[Review, str]]:
        if self.oracle is None:
            raise EngineError("warm-up distillation requires an oracle backend")
        results = self.oracle.generate_group(self._review_requests(pairs, 1, 'teacher'))
        out: List[Union[Review, str]] = []
        for (task, rollout), result in zip(pairs, results):
            if isinstance(result, BackendError):
                self.logger.warning(f"Teacher review of {rollout.rollout_id} failed: {result}")
                out.append(str(result))
                continue
            try:
                parsed = parse_reviewer(result.completions[0])
            except TagParseError as e:
                self.logger.warning(f"Teacher review of {rollout.rollout_id} unparseable: {e}")
                out.append(str(e))
                continue
            out.append(Review(rollout_id=rollout.rollout_id, analysis=parsed.analysis, critique=parsed.critique,
                              soft_score=parsed.soft_score, reviewer_kind='teacher', clamped=parsed.clamped))
        return out

    def entropy(self, plan: StepPlan) -> Optional[float]:
        return None

    def update(self, plan: StepPlan, cfg: LoopConfig) -> None:
        return None

    def save_state(self, directory: Path) -> None:
        pass

    def load_state(self, directory: Path, step: int) -> None:
        pass


class AliveEngine:
    """Sequential state machine running construct → solve → review → update steps."""

    def __init__(self, config: Config, mode: RunMode, roles: Roles, corpus: Sequence[Document],
                 run_dir: Optional[Union[str, Path]] = None):
        """
        Initialize the engine.

        Args:
            config (Config): Loop, match and store settings.
            mode (RunMode): Toy or remote execution.
            roles (Roles): Role adapter matching ``mode``.
            corpus (Sequence[Document]): Documents, one per step in order (wrapping).
            run_dir (Optional[Union[str, Path]]): Run directory; required by ``run``.
        """
        self.config = config
        self.logger = logging.getLogger(__name__)
        self.loop = LoopConfig.from_config(config)
        problems = validate_config(self.loop) + mode.violations()
        if problems:
            raise EngineError(f"Invalid configuration: {'; '.join(problems)}")
        if not corpus:
            raise EngineError("corpus must be non-empty")
        self.mode = mode
        self.roles = roles
        self.corpus = list(corpus)
        self.match = MatchPolicy.from_config(config)
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.fsync_each_record = bool(config.get('store.fsync_each_record', False))
        self.keep_checkpoints = max(1, int(config.get('store.keep_checkpoints', 2)))
        self.logger.info(f"Initialized AliveEngine ({mode.mode}, reviewer={mode.reviewer_source}, "
                         f"M={self.loop.M}, N={self.loop.N}, corpus={len(self.corpus)})")

    def document_for_step(self, step: int) -> Document:
        return self.corpus[(step - 1) % len(self.corpus)]

    def run_step(self, document: Document, step: int) -> Tuple[StepPlan, StepMetrics]:
        """
        Run one self-play step (no teacher critiques).

        Args:
            document (Document): Source document.
            step (int): 1-based step index.

        Returns:
            Tuple[StepPlan, StepMetrics]: The step's records and metrics.
        """
        return self._execute(document, step, warmup=False)

    def run_warmup_step(self, document: Document, step: int) -> Tuple[StepPlan, StepMetrics]:
        """Run one warm-up step: a self-play step plus teacher critiques for distillation."""
        if step > self.loop.warmup_steps:
            raise EngineError(f"step {step} is past the warm-up schedule (warmup_steps={self.loop.warmup_steps})")
        if not self.roles.has_teacher:
            raise EngineError("warm-up step requires a teacher (oracle backend)")
        return self._execute(document, step, warmup=True)

    def _execute(self, document: Document, step: int, warmup: bool) -> Tuple[StepPlan, StepMetrics]:
        if step < 1:
            raise EngineError("step indices start at 1")
        cfg = self.loop
        self.logger.debug(f"Step {step}: document {document.id} ({document_digest(document)})")

        # Phase I: construct
        tasks = self.roles.construct(document, cfg.M, step)
        if len(tasks) != cfg.M:
            raise EngineError(f"constructor returned {len(tasks)} tasks, expected {cfg.M}")
        valid = [t for t in tasks if t.valid]
        skipped = [SkippedSlots(t.task_id, cfg.N, t.parse_error or 'invalid task') for t in tasks if not t.valid]
        if not valid:
            self.logger.warning(f"Step {step}: all {cfg.M} constructed tasks are invalid")

        # Phase II: solve
        rollouts = self.roles.solve(valid, cfg.N) if valid else {}
        for task in valid:
            if len(rollouts.get(task.task_id, [])) != cfg.N:
                raise EngineError(f"task {task.task_id} has {len(rollouts.get(task.task_id, []))} rollouts, "
                                  f"expected {cfg.N}")

        # Phase III: review
        pairs = [(t, r) for t in valid for r in rollouts[t.task_id]]
        reviews = {r.rollout_id: r for r in (self.roles.review(pairs) if pairs else [])}
        if len(reviews) != len(pairs):
            raise EngineError(f"{len(pairs)} rollouts but {len(reviews)} reviews")
        teacher_reviews: Dict[str, Union[Review, str]] = {}
        if warmup and pairs:
            for (_, rollout), result in zip(pairs, self.roles.teacher_review(pairs)):
                teacher_reviews[rollout.rollout_id] = result

        # Rewards and group advantages
        rewards: List[RewardRecord] = []
        accuracies: Dict[str, float] = {}
        solver_groups: Dict[str, AdvantageGroup] = {}
        solver_totals: Dict[str, Tuple[int, float, float, float]] = {}
        for task in valid:
            group_rollouts = rollouts[task.task_id]
            accuracies[task.task_id] = group_accuracy([r.answer for r in group_rollouts], task.hidden_truth,
                                                      self.match)
            lam1 = lambda1(token_length(task.hidden_truth), cfg)
            totals = []
            for rollout in group_rollouts:
                hard = int(exact_match(rollout.answer, task.hidden_truth, self.match))
                soft = reviews[rollout.rollout_id].soft_score
                total = solver_reward(hard, soft, lam1)
                solver_totals[rollout.rollout_id] = (hard, soft, total, lam1)
                totals.append(total)
            solver_groups[task.task_id] = normalize_group(totals, cfg.sigma_floor)

        constructor_rewards = [
            constructor_reward(accuracies[t.task_id], cfg.gate_epsilon, cfg.gate_enabled) if t.valid else 0.0
            for t in tasks
        ]
        constructor_group = normalize_group(constructor_rewards, cfg.sigma_floor)
        for task, value in zip(tasks, constructor_rewards):
            rewards.append(RewardRecord(subject=task.task_id, kind='constructor', value=value))
        for task in valid:
            for rollout in rollouts[task.task_id]:
                hard, soft, total, lam1 = solver_totals[rollout.rollout_id]
                rewards.append(RewardRecord(rollout.rollout_id, 'solver_hard', float(hard)))
                rewards.append(RewardRecord(rollout.rollout_id, 'solver_soft', soft))
                rewards.append(RewardRecord(rollout.rollout_id, 'solver_total', total, lambda1_used=lam1))

        plan = StepPlan(step=step, warmup=warmup, document=document, tasks=tasks, skipped=skipped,
                        rollouts=rollouts, reviews=reviews, teacher_reviews=teacher_reviews,
                        accuracies=accuracies, rewards=rewards, constructor_group=constructor_group,
                        solver_groups=solver_groups)
        plan.batch_items = self._batch_items(plan, solver_totals)
        if not skipped and not any(isinstance(v, str) for v in teacher_reviews.values()):
            expected = count_batch_items(cfg.M, cfg.N, warmup)
            if len(plan.batch_items) != expected:
                raise EngineError(f"step {step} produced {len(plan.batch_items)} batch items, expected {expected}")

        # Phase IV: update
        entropy = self.roles.entropy(plan)
        report = self.roles.update(plan, cfg)
        if report is not None:
            plan.objective = total_objective(report.j_const, report.j_solver, report.l_fcp, report.l_distill,
                                             step, cfg)

        zero_acc = [acc == 0.0 for acc in accuracies.values()]
        metrics = StepMetrics(
            step=step,
            constructor_reward_mean=sum(constructor_rewards) / len(constructor_rewards),
            valid_task_fraction=len(valid) / len(tasks),
            solver_acc_mean=mean_or_none(list(accuracies.values())),
            fcp_loss=report.l_fcp if report is not None and pairs else None,
            entropy_estimate=entropy,
            warmup=warmup,
            all_tasks_invalid=not valid,
            distill_loss=report.l_distill if report is not None and plan.distill_ok else None,
            objective_total=plan.objective.total if plan.objective is not None else None,
            zero_acc_task_fraction=(sum(zero_acc) / len(zero_acc)) if zero_acc else None,
        )
        self.logger.info(f"Step {step}{' (warm-up)' if warmup else ''}: "
                         f"valid {len(valid)}/{cfg.M}, acc {metrics.solver_acc_mean}, "
                         f"constructor reward {metrics.constructor_reward_mean:.3f}, "
                         f"items {plan.realized_items()}")
        return plan, metrics

    def _batch_items(self, plan: StepPlan,
                     solver_totals: Dict[str, Tuple[int, float, float, float]]) -> List[TrainingBatchItem]:
        step = plan.step
        items = [TrainingBatchItem('document', {'document_id': plan.document.id, 'text': plan.document.text}, step)]
        for task, advantage in zip(plan.tasks, plan.constructor_group.advantages):
            payload = {
                'task_id': task.task_id,
                'document_id': task.document_id,
                'completion': task.completion,
                'query': task.query,
                'hidden_truth': task.hidden_truth,
                'valid': task.valid,
                'reward': plan.constructor_group.rewards[task.rollout_index],
                'accuracy': plan.accuracies.get(task.task_id),
            }
            items.append(TrainingBatchItem('constructor_task', payload, step, advantage))
        tasks = {t.task_id: t for t in plan.tasks}
        for task in plan.valid_tasks:
            group = plan.solver_groups[task.task_id]
            for rollout, advantage in zip(plan.rollouts[task.task_id], group.advantages):
                hard, soft, total, lam1 = solver_totals[rollout.rollout_id]
                review = plan.reviews[rollout.rollout_id]
                payload = {
                    'task_id': task.task_id,
                    'rollout_id': rollout.rollout_id,
                    'query': task.query,
                    'completion': rollout.completion,
                    'answer': rollout.answer,
                    'critique': review.critique,
                    'hard': hard,
                    'soft': soft,
                    'reward': total,
                    'lambda1': lam1,
                }
                items.append(TrainingBatchItem('fcp_sample', payload, step, advantage))
        for rollout in plan.ordered_rollouts():
            if rollout.rollout_id not in plan.teacher_reviews:
                continue
            teacher = plan.teacher_reviews[rollout.rollout_id]
            task = tasks[rollout.task_id]
            payload = {
                'task_id': task.task_id,
                'rollout_id': rollout.rollout_id,
                'query': task.query,
                'answer': rollout.answer,
                'hidden_truth': task.hidden_truth,
                'status': 'ok' if isinstance(teacher, Review) else 'failed',
                'teacher_critique': teacher.critique if isinstance(teacher, Review) else None,
                'error': None if isinstance(teacher, Review) else teacher,
            }
            items.append(TrainingBatchItem('distill_sample', payload, step))
        return items

    def commit_step(self, plan: StepPlan, metrics: StepMetrics) -> Path:
        """
        Persist a step into a temporary directory and rename it into place.

        Returns:
            Path: The committed step directory.
        """
        if self.run_dir is None:
            raise EngineError("commit_step requires a run directory")
        final = self.run_dir / STEPS_DIR / step_dir_name(plan.step)
        if final.exists():
            raise EngineError(f"step {plan.step} is already committed")
        tmp = final.with_name(final.name + '.tmp')
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)

        streams = plan.records()
        streams[METRICS] = [metrics] + ([plan.objective] if plan.objective is not None else [])
        for stream, records in streams.items():
            with RecordStore(tmp / stream, self.fsync_each_record) as store:
                for record in records:
                    store.append(record)
        with open(tmp / STEP_MANIFEST, 'w') as f:
            json.dump(plan.manifest(), f, indent=2, sort_keys=True)
        self.roles.save_state(tmp)
        os.replace(tmp, final)
        self._prune_checkpoints()
        return final

    def _prune_checkpoints(self) -> None:
        steps = committed_steps(self.run_dir)
        for step in steps[:-self.keep_checkpoints]:
            directory = self.run_dir / STEPS_DIR / step_dir_name(step)
            for name in (PARAMS_FILE, STATE_FILE):
                (directory / name).unlink(missing_ok=True)

    def resume(self) -> int:
        """
        Restore state from the last committed step.

        Returns:
            int: Last committed step (0 for a fresh run).
        """
        steps_root = self.run_dir / STEPS_DIR
        if steps_root.exists():
            for stale in steps_root.glob('*.tmp'):
                self.logger.warning(f"Discarding uncommitted step directory {stale.name}")
                shutil.rmtree(stale)
        steps = committed_steps(self.run_dir)
        if not steps:
            return 0
        for expected, actual in enumerate(steps, start=1):
            if expected != actual:
                raise ResumeError(expected, "step directory missing")
        last = steps[-1]
        directory = steps_root / step_dir_name(last)
        try:
            with open(directory / STEP_MANIFEST, 'r') as f:
                manifest = json.load(f)
        except (OSError, ValueError) as e:
            raise ResumeError(last, f"manifest unreadable ({e})") from e
        if manifest.get('step') != last:
            raise ResumeError(last, "manifest names a different step")
        self.roles.load_state(directory, last)
        self.logger.info(f"Resuming after step {last}")
        return last

    def run(self, total_steps: Optional[int] = None) -> Optional[StepMetrics]:
        """
        Run (or resume) warm-up steps, then self-play steps, up to ``total_steps``.

        Returns:
            Optional[StepMetrics]: Metrics of the last step run, None when nothing ran.
        """
        if self.run_dir is None:
            raise EngineError("run requires a run directory")
        total = self.loop.total_steps if total_steps is None else total_steps
        self.run_dir.mkdir(parents=True, exist_ok=True)
        snapshot = self.run_dir / CONFIG_SNAPSHOT
        if not snapshot.exists():
            self.config.save(snapshot)

        start = self.resume() + 1
        if start <= min(total, self.loop.warmup_steps) and not self.roles.has_teacher:
            self.logger.warning("No teacher configured; warm-up steps run without distillation")
        metrics = None
        for step in range(start, total + 1):
            document = self.document_for_step(step)
            if step <= self.loop.warmup_steps and self.roles.has_teacher:
                plan, metrics = self.run_warmup_step(document, step)
            else:
                plan, metrics = self.run_step(document, step)
            self.commit_step(plan, metrics)
        self.logger.info(f"Run in {self.run_dir} complete at step {max(total, start - 1)}")
        return metrics


def read_run_metrics(run_dir: Union[str, Path]) -> List[object]:
    """Concatenate every committed step's metrics stream in step order."""
    records = []
    for step in committed_steps(run_dir):
        records.extend(r for _, r in read_records(Path(run_dir) / STEPS_DIR / step_dir_name(step) / METRICS))
    return records


def build_toy_engine(config: Config, run_dir: Optional[Union[str, Path]] = None) -> AliveEngine:
    """Assemble a seeded toy run from ``toy.*`` and ``loop.*`` settings."""
    spec = ToyCorpusSpec.from_config(config)
    training = ToyTrainingConfig.from_config(config)
    problems = spec.violations() + training.violations()
    if problems:
        raise EngineError(f"Invalid toy configuration: {'; '.join(problems)}")
    corpus = gen_corpus(spec, training.corpus_size)
    loop = LoopConfig.from_config(config)
    policy = ToyPolicy.initial(spec, training, seed=loop.seed)
    roles = ToyRoles(policy, corpus)
    return AliveEngine(config, RunMode('toy'), roles, [doc.to_document() for doc in corpus], run_dir)


def build_remote_engine(config: Config, backend_config: BackendConfig, corpus_path: Union[str, Path],
                        run_dir: Union[str, Path], oracle_config: Optional[BackendConfig] = None,
                        reviewer_source: str = 'self') -> AliveEngine:
    """Assemble a remote run over a corpus file or directory."""
    loop = LoopConfig.from_config(config)
    mode = RunMode('remote', reviewer_source, oracle_config)
    templates = load_templates(config.templates_dir)
    backend = RemoteBackend(backend_config)
    oracle = RemoteBackend(oracle_config) if oracle_config is not None else None
    roles = RemoteRoles(backend, loop, templates, oracle, reviewer_source)
    corpus = CorpusLoader(config).load(corpus_path)
    return AliveEngine(config, mode, roles, corpus, run_dir)
