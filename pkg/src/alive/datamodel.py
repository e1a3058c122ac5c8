# ALIVE Data Model Module
# Domain types flowing through the self-play loop and their record schemas
# Every persisted type is an immutable dataclass with invariant checks

import math
from dataclasses import dataclass, field, fields, asdict
from typing import Any, Dict, List, Optional, Type

from .config import Config

SCHEMA_VERSION = 1

REVIEWER_KINDS = ('self', 'teacher')
REWARD_KINDS = ('constructor', 'solver_hard', 'solver_soft', 'solver_total')
BATCH_KINDS = ('document', 'constructor_task', 'fcp_sample', 'distill_sample')


class RecordValidationError(ValueError):
    """A record failed its type invariants; ``field`` names the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name
        self.message = message


class NoDataError(ValueError):
    """A corpus or metrics source holds nothing to work on."""


def _finite(value: Optional[float]) -> bool:
    return value is None or (isinstance(value, (int, float)) and math.isfinite(value))


@dataclass(frozen=True)
class Document:
    """A raw text unit entering the loop."""

    id: str
    text: str
    source: str = 'toy'
    seed: Optional[int] = None

    def violations(self) -> List[RecordValidationError]:
        errors = []
        if not self.id:
            errors.append(RecordValidationError('id', 'must be non-empty'))
        if not self.text.strip():
            errors.append(RecordValidationError('text', 'must be non-empty'))
        return errors


@dataclass(frozen=True)
class ConstructedTask:
    """A masked query and its hindsight ground truth, produced by one constructor rollout."""

    task_id: str
    document_id: str
    query: str
    hidden_truth: str
    thought: str
    rollout_index: int
    valid: bool
    logprob_old: Optional[float] = None
    completion: str = ''
    parse_error: Optional[str] = None
    leak_checked: bool = True

    def violations(self) -> List[RecordValidationError]:
        errors = []
        if self.rollout_index < 0:
            errors.append(RecordValidationError('rollout_index', 'must be ≥ 0'))
        if self.valid and not self.hidden_truth.strip():
            errors.append(RecordValidationError('hidden_truth', 'must be non-empty when valid'))
        if self.valid and self.leak_checked and self.hidden_truth and self.hidden_truth in self.query:
            errors.append(RecordValidationError('query', 'contains hidden_truth verbatim'))
        if not _finite(self.logprob_old) or (self.logprob_old is not None and self.logprob_old > 0):
            errors.append(RecordValidationError('logprob_old', 'must be a finite value ≤ 0'))
        return errors


@dataclass(frozen=True)
class SolverRollout:
    """One sampled solution: reasoning trace plus the parsed final answer."""

    rollout_id: str
    task_id: str
    reasoning: str
    answer: str
    sample_index: int
    logprob_old: Optional[float] = None
    completion: str = ''
    parse_error: Optional[str] = None

    def violations(self) -> List[RecordValidationError]:
        errors = []
        if self.sample_index < 0:
            errors.append(RecordValidationError('sample_index', 'must be ≥ 0'))
        if not _finite(self.logprob_old) or (self.logprob_old is not None and self.logprob_old > 0):
            errors.append(RecordValidationError('logprob_old', 'must be a finite value ≤ 0'))
        return errors


@dataclass(frozen=True)
class Review:
    """Reviewer feedback on one rollout: analysis, critique and soft score."""

    rollout_id: str
    analysis: str
    critique: str
    soft_score: float
    reviewer_kind: str = 'self'
    clamped: bool = False
    parse_error: Optional[str] = None
    samples: int = 1

    def violations(self) -> List[RecordValidationError]:
        errors = []
        if not _finite(self.soft_score) or not 0.0 <= self.soft_score <= 1.0:
            errors.append(RecordValidationError('soft_score', 'must lie in [0, 1]'))
        if not self.critique.strip():
            errors.append(RecordValidationError('critique', 'must be non-empty'))
        if self.reviewer_kind not in REVIEWER_KINDS:
            errors.append(RecordValidationError('reviewer_kind', f"must be one of {REVIEWER_KINDS}"))
        if self.samples < 1:
            errors.append(RecordValidationError('samples', 'must be ≥ 1'))
        return errors


@dataclass(frozen=True)
class RewardRecord:
    """A scalar reward attached to a task (constructor) or a rollout (solver)."""

    subject: str
    kind: str
    value: float
    lambda1_used: Optional[float] = None

    def violations(self) -> List[RecordValidationError]:
        errors = []
        if self.kind not in REWARD_KINDS:
            return [RecordValidationError('kind', f"must be one of {REWARD_KINDS}")]
        if not _finite(self.value):
            return [RecordValidationError('value', 'must be finite')]
        if self.kind in ('constructor', 'solver_soft') and not 0.0 <= self.value <= 1.0:
            errors.append(RecordValidationError('value', f"{self.kind} reward must lie in [0, 1]"))
        if self.kind == 'solver_hard' and self.value not in (0, 1):
            errors.append(RecordValidationError('value', 'solver_hard reward must be 0 or 1'))
        if self.kind == 'solver_total':
            if self.lambda1_used is None or not _finite(self.lambda1_used):
                errors.append(RecordValidationError('lambda1_used', 'required for solver_total'))
            elif not 0.0 <= self.value <= 1.0 + self.lambda1_used + 1e-12:
                errors.append(RecordValidationError('value', 'solver_total must lie in [0, 1 + lambda1_used]'))
        return errors


@dataclass(frozen=True)
class TrainingBatchItem:
    """One exported training record; the unit of batch accounting."""

    kind: str
    payload: Dict[str, Any]
    step: int
    advantage: Optional[float] = None

    def violations(self) -> List[RecordValidationError]:
        errors = []
        if self.kind not in BATCH_KINDS:
            errors.append(RecordValidationError('kind', f"must be one of {BATCH_KINDS}"))
        if not isinstance(self.payload, dict):
            errors.append(RecordValidationError('payload', 'must be a mapping'))
        if self.advantage is not None and (isinstance(self.advantage, bool) or not _finite(self.advantage)):
            errors.append(RecordValidationError('advantage', 'must be finite when present'))
        if self.advantage is not None and self.kind in ('document', 'distill_sample'):
            errors.append(RecordValidationError('advantage', f"not defined for {self.kind} items"))
        if self.step < 0:
            errors.append(RecordValidationError('step', 'must be ≥ 0'))
        return errors


@dataclass(frozen=True)
class SkippedSlots:
    """The N solver slots of an invalid task, recorded instead of rollouts."""

    task_id: str
    count: int
    reason: str

    def violations(self) -> List[RecordValidationError]:
        if self.count < 0:
            return [RecordValidationError('count', 'must be ≥ 0')]
        return []


@dataclass(frozen=True)
class StepMetrics:
    """Per-step training dynamics (constructor reward, accuracy, FCP loss, entropy)."""

    step: int
    constructor_reward_mean: float
    valid_task_fraction: float
    solver_acc_mean: Optional[float] = None
    fcp_loss: Optional[float] = None
    entropy_estimate: Optional[float] = None
    warmup: bool = False
    all_tasks_invalid: bool = False
    distill_loss: Optional[float] = None
    objective_total: Optional[float] = None
    zero_acc_task_fraction: Optional[float] = None

    def violations(self) -> List[RecordValidationError]:
        errors = []
        if not _finite(self.valid_task_fraction) or not 0.0 <= self.valid_task_fraction <= 1.0:
            errors.append(RecordValidationError('valid_task_fraction', 'must lie in [0, 1]'))
        for name in ('constructor_reward_mean', 'solver_acc_mean', 'fcp_loss', 'entropy_estimate',
                     'distill_loss', 'objective_total', 'zero_acc_task_fraction'):
            if not _finite(getattr(self, name)):
                errors.append(RecordValidationError(name, 'must be finite when present'))
        return errors


@dataclass(frozen=True)
class ObjectiveBreakdown:
    """Components of the unified objective for one step."""

    j_const: float
    j_solver: float
    l_fcp: float
    l_distill: float
    total: float
    step: int
    lambda2: float
    lambda3: float

    def violations(self) -> List[RecordValidationError]:
        errors = []
        for f in fields(self):
            if f.name != 'step' and not _finite(getattr(self, f.name)):
                errors.append(RecordValidationError(f.name, 'must be finite'))
        if not errors:
            expected = self.j_const + self.j_solver - self.lambda2 * self.l_fcp - self.lambda3 * self.l_distill
            if abs(expected - self.total) > 1e-12 * max(1.0, abs(expected)):
                errors.append(RecordValidationError('total', 'inconsistent with components'))
        return errors


# kind discriminator -> type; the envelope keeps field names verbatim under "data"
RECORD_TYPES: Dict[str, Type[Any]] = {
    'document': Document,
    'constructed_task': ConstructedTask,
    'solver_rollout': SolverRollout,
    'review': Review,
    'reward': RewardRecord,
    'training_batch_item': TrainingBatchItem,
    'skipped_slots': SkippedSlots,
    'step_metrics': StepMetrics,
    'objective_breakdown': ObjectiveBreakdown,
}
_KIND_BY_TYPE = {cls: kind for kind, cls in RECORD_TYPES.items()}


def record_kind(record: Any) -> str:
    """Return the discriminator for a record instance."""
    try:
        return _KIND_BY_TYPE[type(record)]
    except KeyError:
        raise TypeError(f"Not a persistable record type: {type(record).__name__}") from None


def check_record(record: Any) -> None:
    """Raise the first invariant violation of ``record``, if any."""
    errors = record.violations()
    if errors:
        raise errors[0]


def to_envelope(record: Any) -> Dict[str, Any]:
    """Wrap a record as ``{"kind", "schema_version", "data"}``."""
    return {
        'kind': record_kind(record),
        'schema_version': SCHEMA_VERSION,
        'data': asdict(record),
    }


def from_envelope(envelope: Dict[str, Any]) -> Any:
    """Rebuild a record from its envelope."""
    kind = envelope.get('kind')
    if kind not in RECORD_TYPES:
        raise RecordValidationError('kind', f"unknown record kind {kind!r}")
    version = envelope.get('schema_version')
    if version != SCHEMA_VERSION:
        raise RecordValidationError('schema_version', f"unsupported version {version!r}")
    data = envelope.get('data')
    if not isinstance(data, dict):
        raise RecordValidationError('data', 'must be a mapping')
    cls = RECORD_TYPES[kind]
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise RecordValidationError(sorted(unknown)[0], f"not a field of {cls.__name__}")
    try:
        return cls(**data)
    except TypeError as e:
        raise RecordValidationError('data', str(e)) from e


@dataclass(frozen=True)
class LoopConfig:
    """Self-play loop hyperparameters."""

    M: int = 8
    N: int = 16
    temperature: float = 1.0
    eps_clip_low: float = 0.2
    eps_clip_high: float = 0.28
    alpha_kl: float = 0.0
    beta_kl: float = 0.0
    lambda1_long: float = 1.0
    lambda1_short: float = 0.6
    lambda1_threshold_tokens: int = 16
    lambda2: float = 0.5
    lambda3_warmup_value: float = 1.0
    warmup_steps: int = 256
    total_steps: int = 2048
    gate_epsilon: float = 0.0
    gate_enabled: bool = True
    sigma_floor: float = 1e-8
    review_samples: int = 1
    fcp_negative_weight: float = 1.0
    max_tokens_constructor: int = 2048
    max_tokens_solver: int = 4096
    max_tokens_reviewer: int = 2048
    seed: int = 0

    @classmethod
    def from_config(cls, config: Config) -> 'LoopConfig':
        """Build loop settings from the configuration keys."""
        d = cls()
        return cls(
            M=int(config.get('loop.M', d.M)),
            N=int(config.get('loop.N', d.N)),
            temperature=float(config.get('loop.temperature', d.temperature)),
            eps_clip_low=float(config.get('clip.eps_low', d.eps_clip_low)),
            eps_clip_high=float(config.get('clip.eps_high', d.eps_clip_high)),
            alpha_kl=float(config.get('kl.alpha', d.alpha_kl)),
            beta_kl=float(config.get('kl.beta', d.beta_kl)),
            lambda1_long=float(config.get('lambda1.long', d.lambda1_long)),
            lambda1_short=float(config.get('lambda1.short', d.lambda1_short)),
            lambda1_threshold_tokens=int(config.get('lambda1.threshold_tokens', d.lambda1_threshold_tokens)),
            lambda2=float(config.get('lambda2', d.lambda2)),
            lambda3_warmup_value=float(config.get('lambda3.warmup_value', d.lambda3_warmup_value)),
            warmup_steps=int(config.get('loop.warmup_steps', d.warmup_steps)),
            total_steps=int(config.get('loop.total_steps', d.total_steps)),
            gate_epsilon=float(config.get('gate_epsilon', d.gate_epsilon)),
            gate_enabled=bool(config.get('gate_enabled', d.gate_enabled)),
            sigma_floor=float(config.get('sigma_floor', d.sigma_floor)),
            review_samples=int(config.get('review.samples', d.review_samples)),
            fcp_negative_weight=float(config.get('fcp.negative_weight', d.fcp_negative_weight)),
            max_tokens_constructor=int(config.get('max_tokens.constructor', d.max_tokens_constructor)),
            max_tokens_solver=int(config.get('max_tokens.solver', d.max_tokens_solver)),
            max_tokens_reviewer=int(config.get('max_tokens.reviewer', d.max_tokens_reviewer)),
            seed=int(config.get('loop.seed', d.seed)),
        )


def validate_config(cfg: LoopConfig) -> List[str]:
    """
    Check every LoopConfig invariant.

    Args:
        cfg (LoopConfig): Settings to check.

    Returns:
        List[str]: One message per violation, each naming the offending field; empty when valid.
    """
    violations = []
    if cfg.M < 1:
        violations.append("M must be ≥ 1")
    if cfg.N < 1:
        violations.append("N must be ≥ 1")
    if cfg.temperature < 0:
        violations.append("temperature must be ≥ 0")
    if not cfg.eps_clip_low > 0:
        violations.append("eps_clip_low must be > 0")
    if cfg.eps_clip_low > cfg.eps_clip_high:
        violations.append("eps_clip_low must be ≤ eps_clip_high")
    if cfg.alpha_kl < 0 or cfg.beta_kl < 0:
        violations.append("alpha_kl and beta_kl must be ≥ 0")
    if cfg.lambda1_threshold_tokens < 0:
        violations.append("lambda1_threshold_tokens must be ≥ 0")
    if cfg.warmup_steps < 0:
        violations.append("warmup_steps must be ≥ 0")
    if cfg.total_steps < 0:
        violations.append("total_steps must be ≥ 0")
    if cfg.warmup_steps > cfg.total_steps:
        violations.append("warmup_steps must be ≤ total_steps")
    if not 0.0 <= cfg.gate_epsilon < 1.0:
        violations.append("gate_epsilon must lie in [0, 1)")
    if not cfg.sigma_floor > 0:
        violations.append("sigma_floor must be > 0")
    if cfg.review_samples < 1:
        violations.append("review_samples must be ≥ 1")
    if cfg.fcp_negative_weight < 0:
        violations.append("fcp_negative_weight must be ≥ 0")
    for role in ('constructor', 'solver', 'reviewer'):
        if getattr(cfg, f"max_tokens_{role}") < 1:
            violations.append(f"max_tokens_{role} must be ≥ 1")
    return violations


def count_batch_items(M: int, N: int, warmup: bool) -> int:
    """
    Number of training batch items one fully-valid loop step exports.

    1 document + M constructor tasks + M·N FCP samples, plus M·N distillation
    samples during warm-up (137 and 265 for M=8, N=16).
    """
    if M < 1 or N < 1:
        raise ValueError(f"M and N must be ≥ 1, got M={M}, N={N}")
    return 1 + M + M * N * (2 if warmup else 1)


def realized_batch_items(M: int, rollouts: int, distill_ok: int) -> int:
    """Item count for a step with skipped or failed slots (realized accounting)."""
    return 1 + M + rollouts + distill_ok
