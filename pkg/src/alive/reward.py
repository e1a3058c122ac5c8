# ALIVE Reward Module
# Pure numeric kernels: exact match, group accuracy, gated constructor reward
# Also the length-based soft-reward weight and the hybrid solver reward

import re
from dataclasses import dataclass
from typing import Sequence

from .config import Config
from .datamodel import LoopConfig

_WHITESPACE = re.compile(r'\s+')


@dataclass(frozen=True)
class MatchPolicy:
    """Normalization applied to both sides before exact matching."""

    trim_outer: bool = True
    collapse_inner_whitespace: bool = True
    case_sensitive: bool = True

    @classmethod
    def from_config(cls, config: Config) -> 'MatchPolicy':
        return cls(
            trim_outer=bool(config.get('match.trim_outer', True)),
            collapse_inner_whitespace=bool(config.get('match.collapse_inner_whitespace', True)),
            case_sensitive=bool(config.get('match.case_sensitive', True)),
        )

    def normalize(self, text: str) -> str:
        if self.trim_outer:
            text = text.strip()
        if self.collapse_inner_whitespace:
            text = _WHITESPACE.sub(' ', text)
        if not self.case_sensitive:
            text = text.casefold()
        return text


DEFAULT_MATCH = MatchPolicy()


def exact_match(a: str, y_star: str, policy: MatchPolicy = DEFAULT_MATCH) -> bool:
    """True iff the normalized answer and hidden truth are identical strings."""
    return policy.normalize(a) == policy.normalize(y_star)


def group_accuracy(answers: Sequence[str], y_star: str, policy: MatchPolicy = DEFAULT_MATCH) -> float:
    """
    Fraction of a solver group's answers that exactly match the hidden truth.

    Args:
        answers (Sequence[str]): Final answers of the N rollouts.
        y_star (str): Hidden truth.
        policy (MatchPolicy): Normalization.

    Returns:
        float: Accuracy in [0, 1].
    """
    if not answers:
        raise ValueError("empty group")
    hits = sum(1 for a in answers if exact_match(a, y_star, policy))
    return hits / len(answers)


def constructor_reward(acc: float, gate_epsilon: float = 0.0, gated: bool = True) -> float:
    """
    Validity-gated difficulty reward: 1(acc > gate_epsilon) · (1 − acc).

    The KL regularizer is applied by the optimizer, not here. ``gated=False``
    drops the indicator (always-on difficulty reward).
    """
    if not 0.0 <= acc <= 1.0:
        raise ValueError(f"accuracy must lie in [0, 1], got {acc}")
    if not 0.0 <= gate_epsilon < 1.0:
        raise ValueError(f"gate_epsilon must lie in [0, 1), got {gate_epsilon}")
    if gated and not acc > gate_epsilon:
        return 0.0
    return 1.0 - acc


def token_length(y_star: str) -> int:
    """Whitespace-delimited unit count of the hidden truth (tokenizer-free)."""
    return len(y_star.split())


def lambda1(y_star_token_length: int, cfg: LoopConfig) -> float:
    """
    Soft-reward weight from the hidden truth length.

    Lengths at or above the threshold use ``lambda1_long``; shorter ones use
    ``lambda1_short``.
    """
    if y_star_token_length < 0:
        raise ValueError("length must be ≥ 0")
    if y_star_token_length >= cfg.lambda1_threshold_tokens:
        return cfg.lambda1_long
    return cfg.lambda1_short


def solver_reward(hard: int, soft: float, lambda1_value: float) -> float:
    """Hybrid solver reward: hard + λ₁ · soft."""
    if hard not in (0, 1):
        raise ValueError(f"hard reward must be 0 or 1, got {hard}")
    if not 0.0 <= soft <= 1.0:
        raise ValueError(f"soft reward must lie in [0, 1], got {soft}")
    return hard + lambda1_value * soft
