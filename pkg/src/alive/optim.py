# ALIVE Optimization Module
# Group-relative advantages, clipped surrogate, FCP and distillation losses
# Unified objective assembly and the warm-up coefficient schedule

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .datamodel import LoopConfig, ObjectiveBreakdown

DEFAULT_SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class AdvantageGroup:
    """Rewards of one sampling group and their standardized advantages."""

    rewards: Tuple[float, ...]
    advantages: Tuple[float, ...]
    degenerate: bool
    mean: float
    std: float


def normalize_group(rewards: Sequence[float], sigma_floor: float = DEFAULT_SIGMA_FLOOR) -> AdvantageGroup:
    """
    Standardize rewards within their group: (r − μ) / σ with population σ.

    Args:
        rewards (Sequence[float]): Group rewards (M constructor or N solver rewards).
        sigma_floor (float): Groups with σ below this get all-zero advantages.

    Returns:
        AdvantageGroup: Advantages plus the group statistics.
    """
    if len(rewards) == 0:
        raise ValueError("empty reward group")
    r = np.asarray(rewards, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise FloatingPointError(f"non-finite reward in group: {list(rewards)}")
    mu = float(np.mean(r))
    sigma = float(np.std(r))
    if sigma < sigma_floor:
        advantages = tuple(0.0 for _ in rewards)
        return AdvantageGroup(tuple(float(x) for x in r), advantages, True, mu, sigma)
    advantages = tuple(float(a) for a in (r - mu) / sigma)
    return AdvantageGroup(tuple(float(x) for x in r), advantages, False, mu, sigma)


def clip(rho: float, eps_low: float, eps_high: float) -> float:
    return min(max(rho, 1.0 - eps_low), 1.0 + eps_high)


def clipped_term(rho: float, advantage: float, eps_low: float, eps_high: Optional[float] = None) -> float:
    """min(ρ·A, clip(ρ, 1 − ε_low, 1 + ε_high)·A)."""
    if not rho > 0:
        raise ValueError(f"ratio must be positive, got {rho}")
    if eps_high is None:
        eps_high = eps_low
    return min(rho * advantage, clip(rho, eps_low, eps_high) * advantage)


def clipped_term_grad(rho: float, advantage: float, eps_low: float, eps_high: Optional[float] = None) -> float:
    """
    Derivative of ``clipped_term`` with respect to log π (ρ = π / π_old).

    ρ·A while the unclipped branch is active, 0 once the clip holds the term constant.
    """
    if not rho > 0:
        raise ValueError(f"ratio must be positive, got {rho}")
    if eps_high is None:
        eps_high = eps_low
    if rho * advantage <= clip(rho, eps_low, eps_high) * advantage:
        return rho * advantage
    return 0.0


def grpo_objective(terms: Sequence[Tuple[float, float]], eps_low: float, eps_high: Optional[float] = None,
                   kl_coeff: float = 0.0, kl_value: float = 0.0) -> float:
    """
    Clipped-surrogate group objective.

    Args:
        terms (Sequence[Tuple[float, float]]): (ρ, A) per sample.
        eps_low (float): Lower clip width.
        eps_high (Optional[float]): Upper clip width (defaults to eps_low).
        kl_coeff (float): KL penalty coefficient (α for the constructor, β for the solver).
        kl_value (float): KL divergence estimate to the reference policy.

    Returns:
        float: Mean clipped term minus kl_coeff · kl_value.
    """
    if not terms:
        raise ValueError("empty group")
    surrogate = sum(clipped_term(rho, a, eps_low, eps_high) for rho, a in terms) / len(terms)
    return surrogate - kl_coeff * kl_value


def _check_logprobs(logprobs: Sequence[float]) -> None:
    if len(logprobs) == 0:
        raise ValueError("empty sample set")
    for lp in logprobs:
        if not math.isfinite(lp):
            raise FloatingPointError(f"non-finite log-probability {lp}")
        if lp > 0:
            raise ValueError(f"log-probability {lp} > 0: improper distribution")


def fcp_loss(logprobs: Sequence[float]) -> float:
    """Feedback-conditional NLL: −(1/(M·N)) Σ log π(ŷ | x̃, c), the list length being M·N."""
    _check_logprobs(logprobs)
    return -sum(logprobs) / len(logprobs)


def weighted_fcp_loss(logprobs: Sequence[float], weights: Sequence[float]) -> float:
    """FCP NLL with per-sample weights (negative-critique up-weighting), normalized by Σw."""
    _check_logprobs(logprobs)
    if len(weights) != len(logprobs):
        raise ValueError("weights and logprobs differ in length")
    total = sum(weights)
    if total <= 0:
        raise ValueError("weights must sum to a positive value")
    return -sum(w * lp for w, lp in zip(weights, logprobs)) / total


def distill_loss(logprobs_of_teacher_critiques: Sequence[float]) -> float:
    """Mean NLL of the teacher's critiques under the policy."""
    _check_logprobs(logprobs_of_teacher_critiques)
    return -sum(logprobs_of_teacher_critiques) / len(logprobs_of_teacher_critiques)


def lambda3_schedule(step: int, warmup_steps: int, warmup_value: float = 1.0) -> float:
    """Distillation weight: ``warmup_value`` through the warm-up steps, 0 afterwards."""
    if step < 0:
        raise ValueError("step must be ≥ 0")
    return warmup_value if step <= warmup_steps else 0.0


def total_objective(j_const: float, j_solver: float, l_fcp: float, l_distill: float,
                    step: int, cfg: LoopConfig) -> ObjectiveBreakdown:
    """
    Assemble the unified objective J_const + J_solver − λ₂·L_fcp − λ₃(step)·L_distill.

    Args:
        j_const (float): Constructor GRPO objective.
        j_solver (float): Solver GRPO objective.
        l_fcp (float): Feedback-conditional NLL.
        l_distill (float): Critique distillation NLL (0 outside warm-up).
        step (int): Loop step (1-based).
        cfg (LoopConfig): Supplies λ₂, the warm-up length and λ₃'s warm-up value.

    Returns:
        ObjectiveBreakdown: Components and total.
    """
    for name, value in (('j_const', j_const), ('j_solver', j_solver), ('l_fcp', l_fcp), ('l_distill', l_distill)):
        if not math.isfinite(value):
            raise FloatingPointError(f"{name} is not finite: {value}")
    lam2 = cfg.lambda2
    lam3 = lambda3_schedule(step, cfg.warmup_steps, cfg.lambda3_warmup_value)
    total = j_const + j_solver - lam2 * l_fcp - lam3 * l_distill
    return ObjectiveBreakdown(j_const=j_const, j_solver=j_solver, l_fcp=l_fcp, l_distill=l_distill,
                              total=total, step=step, lambda2=lam2, lambda3=lam3)


def mean_or_none(values: List[float]) -> Optional[float]:
    return sum(values) / len(values) if values else None
