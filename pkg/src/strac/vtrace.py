"""Truncated importance weights and n-step off-policy value targets.

Targets follow the recursion form of the n-step corrected value estimate
over a single trajectory segment: the temporal differences are weighted by
rho (capped at rho_bar) and propagated backwards through the c-weight trace
(capped at c_bar). Segments never cross episode boundaries; the bootstrap
value past the segment end is the critic's own estimate (zero at a
terminal cut).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "BehaviorProbabilityError",
    "VTraceConfig",
    "VTraceResult",
    "truncated_weights",
    "vtrace_targets",
]


class BehaviorProbabilityError(ValueError):
    """A stored behavior probability is invalid (the actor cannot have
    taken an action with probability zero)."""


@dataclass(frozen=True)
class VTraceConfig:
    rho_bar: float = 1.0
    c_bar: float = 5.0
    gamma: float = 0.99
    n_steps: int = 5

    def __post_init__(self):
        if not (self.rho_bar > 0.0 and self.c_bar > 0.0):
            raise ValueError("truncation levels must be positive")
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.rho_bar > self.c_bar:
            warnings.warn(
                f"rho_bar={self.rho_bar} > c_bar={self.c_bar}; rho_bar <= c_bar is recommended",
                RuntimeWarning,
                stacklevel=2,
            )


@dataclass(frozen=True)
class VTraceResult:
    targets: np.ndarray      # v_k, one per segment step
    advantages: np.ndarray   # r_k + gamma * v_{k+1} - V(b_k)
    rho: np.ndarray
    c: np.ndarray


def truncated_weights(pi_probs, mu_probs, cfg: VTraceConfig):
    """Per-step importance weights rho = min(rho_bar, pi/mu), c = min(c_bar, pi/mu)."""
    pi_probs = np.asarray(pi_probs, dtype=np.float64)
    mu_probs = np.asarray(mu_probs, dtype=np.float64)
    if pi_probs.shape != mu_probs.shape:
        raise ValueError(f"shape mismatch: {pi_probs.shape} vs {mu_probs.shape}")
    if np.any(mu_probs <= 0.0):
        raise BehaviorProbabilityError("behavior probability <= 0 in trajectory")
    if np.any(pi_probs < 0.0):
        raise ValueError("negative target-policy probability")
    ratio = pi_probs / mu_probs
    return np.minimum(cfg.rho_bar, ratio), np.minimum(cfg.c_bar, ratio)


def vtrace_targets(
    rewards,
    values,
    bootstrap_value: float,
    rho,
    c,
    cfg: VTraceConfig,
) -> VTraceResult:
    """Corrected n-step targets and advantages for one trajectory segment.

    `values` are the critic estimates at the segment's own states; the value
    of the state just past the segment is `bootstrap_value` (0.0 when the
    segment ends the episode). Targets satisfy

        v_k = V_k + delta_k + gamma * c_k * (v_{k+1} - V_{k+1}),
        delta_k = rho_k * (r_k + gamma * V_{k+1} - V_k),

    with v at the segment end falling back to the bootstrap value.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    t = rewards.shape[0]
    if t == 0:
        raise ValueError("empty trajectory segment")
    if t > cfg.n_steps:
        raise ValueError(f"segment length {t} exceeds horizon n={cfg.n_steps}")
    if not (values.shape == rewards.shape == rho.shape == c.shape):
        raise ValueError("rewards, values, rho, c must share one shape")

    next_values = np.append(values[1:], bootstrap_value)
    deltas = rho * (rewards + cfg.gamma * next_values - values)

    targets = np.empty(t, dtype=np.float64)
    v_next = bootstrap_value
    for k in range(t - 1, -1, -1):
        targets[k] = values[k] + deltas[k] + cfg.gamma * c[k] * (v_next - next_values[k])
        v_next = targets[k]

    next_targets = np.append(targets[1:], bootstrap_value)
    advantages = rewards + cfg.gamma * next_targets - values
    return VTraceResult(targets=targets, advantages=advantages, rho=rho, c=c)
