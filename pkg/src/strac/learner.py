"""Central learner: corrected value/policy gradients accumulated across domains.

Per update round, one minibatch of segments is drawn from every domain's
replay. For each batch the current network (with one fresh noise draw per
minibatch) is evaluated once; the value targets and advantages come from
the off-policy correction, treated as constants. Two scalar objectives are
then differentiated against the shared parameters:

  value:  0.5 * sum_k (v_k - V(b_k))^2                       (descent)
  policy: sum_k [lam1 * rho_k * A_k * log pi(a_k|b_k)
                 + lam2 * H(pi(.|b_k))]                      (ascent)

Their gradients add on the shared parameter set, are normalized by the
total step count of the round, norm-clipped, and applied with one Adam
step. Actors only ever see immutable snapshots published under a lock.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .nn import Adam, GradientError, clip_by_global_norm
from .policy import NetworkConfig, PolicyForward, PolicyNetwork, PolicySnapshot
from .replay import ReplayMemory, Segment
from .vtrace import VTraceConfig, truncated_weights, vtrace_targets

__all__ = [
    "DomainBatchStats",
    "GradientAccumulator",
    "Learner",
    "LossWeights",
    "UpdateStats",
    "policy_loss",
    "value_loss",
]

log = logging.getLogger("strac.learner")


@dataclass(frozen=True)
class LossWeights:
    policy_coef: float = 0.3     # lam1, scales the corrected policy gradient
    entropy_coef: float = 0.001  # lam2, scales the entropy bonus

    def __post_init__(self):
        if self.policy_coef <= 0.0:
            raise ValueError("policy coefficient must be positive")
        if self.entropy_coef < 0.0:
            raise ValueError("entropy coefficient must be non-negative")


class GradientAccumulator:
    """Running gradient sums (value and policy parts kept separate) plus the
    step-count normalizer; zeroed after every applied update."""

    def __init__(self):
        self.d_beta: dict[str, np.ndarray] = {}
        self.d_theta: dict[str, np.ndarray] = {}
        self.n_steps = 0

    @staticmethod
    def _merge(into: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name in into:
                into[name] = into[name] + g
            else:
                into[name] = g.copy()

    def add_value(self, grads: dict[str, np.ndarray]) -> None:
        self._merge(self.d_beta, grads)

    def add_policy(self, grads: dict[str, np.ndarray]) -> None:
        self._merge(self.d_theta, grads)

    def combined(self) -> dict[str, np.ndarray]:
        out = {k: v.copy() for k, v in self.d_beta.items()}
        self._merge(out, self.d_theta)
        return out

    def reset(self) -> None:
        self.d_beta = {}
        self.d_theta = {}
        self.n_steps = 0


def value_loss(v_pred: ad.Tensor, targets: np.ndarray) -> ad.Tensor:
    """Half squared error against fixed targets, summed over steps.

    Its descent gradient is -(v_k - V) dV, i.e. the ascent form
    (v_k - V) dV of the corrected value update.
    """
    diff = ad.Tensor(np.asarray(targets, dtype=np.float64)) - v_pred
    return (diff * diff).sum() * 0.5


def policy_loss(
    log_pi: ad.Tensor,
    pi: ad.Tensor,
    actions: np.ndarray,
    rho: np.ndarray,
    advantages: np.ndarray,
    weights: LossWeights,
) -> ad.Tensor:
    """Negated policy objective (so descent on it ascends the objective).

    log_pi/pi are (S, A) rows for the stored decision contexts; rho and the
    advantages are constants from the off-policy correction.
    """
    log_pi_taken = ad.pick(log_pi, actions)
    scale = np.asarray(rho, dtype=np.float64) * np.asarray(advantages, dtype=np.float64)
    pg_term = (log_pi_taken * ad.Tensor(scale)).sum()
    entropy = -(pi * log_pi).sum()
    return -(weights.policy_coef * pg_term + weights.entropy_coef * entropy)


@dataclass
class DomainBatchStats:
    steps: int
    value_loss: float
    policy_loss: float
    entropy: float
    mean_rho: float
    zero_pi_actions: int = 0


@dataclass
class UpdateStats:
    version: int
    total_steps: int
    grad_norm: float
    domains: dict[str, DomainBatchStats] = field(default_factory=dict)
    skipped: tuple[str, ...] = ()
    aborted: bool = False


class _BatchArrays:
    """Flat views over a list of segments for one batched forward."""

    def __init__(self, segments: list[Segment]):
        rows_slots = []
        rows_global = []
        rows_mask = []
        self.step_rows: list[int] = []
        self.boot_rows: list[int] = []       # -1 where the segment ends its episode
        self.seg_bounds: list[tuple[int, int]] = []
        self.actions: list[int] = []
        self.rewards: list[float] = []
        self.mus: list[float] = []
        row = 0
        for seg in segments:
            start = len(self.step_rows)
            for step in seg.steps:
                rows_slots.append(step.features.phi_slots)
                rows_global.append(step.features.phi_global)
                rows_mask.append(step.action_mask)
                self.step_rows.append(row)
                self.rewards.append(step.reward)
                self.mus.append(step.behavior_prob)
                self.actions.append(-1)  # filled below, needs the spec
                row += 1
            if seg.bootstrap is not None:
                rows_slots.append(seg.bootstrap.features.phi_slots)
                rows_global.append(seg.bootstrap.features.phi_global)
                rows_mask.append(np.ones_like(seg.bootstrap.action_mask))
                self.boot_rows.append(row)
                row += 1
            else:
                self.boot_rows.append(-1)
            self.seg_bounds.append((start, len(self.step_rows)))
        self.phi_slots = np.stack(rows_slots)
        self.phi_global = np.stack(rows_global)
        self.mask = np.stack(rows_mask)
        self.step_rows_arr = np.asarray(self.step_rows, dtype=np.intp)
        self.rewards_arr = np.asarray(self.rewards)
        self.mus_arr = np.asarray(self.mus)


class Learner:
    """Owns the parameters, the Adam state, and the snapshot version counter."""

    def __init__(
        self,
        network: PolicyNetwork,
        vtrace_cfg: VTraceConfig,
        weights: LossWeights,
        *,
        lr: float = 1e-4,
        clip_norm: float = 10.0,
        batch_size: int = 64,
    ):
        self.network = network
        self.vtrace_cfg = vtrace_cfg
        self.weights = weights
        self.clip_norm = clip_norm
        self.batch_size = batch_size
        self.params = network.parameters()
        self.adam = Adam(self.params, lr=lr)
        self.version = 0
        self._lock = threading.Lock()

    def snapshot(self) -> PolicySnapshot:
        with self._lock:
            arrays = self.network.parameter_arrays()
            version = self.version
        return PolicySnapshot(
            version=version,
            network=PolicyNetwork.from_arrays(self.network.cfg, arrays),
        )

    def _harvest_grads(self) -> dict[str, np.ndarray]:
        grads = {}
        for name, tensor in self.params.items():
            if tensor.grad is not None:
                grads[name] = tensor.grad
                tensor.grad = None
        return grads

    def _batch_losses(
        self,
        segments: list[Segment],
        spec,
        noise=None,
    ) -> tuple[ad.Tensor, ad.Tensor, DomainBatchStats]:
        """Build both scalar losses for one domain minibatch on a shared graph.

        One batched forward serves both objectives; the correction targets
        and advantages enter the losses as constants.
        """
        batch = _BatchArrays(segments)
        for i, seg in enumerate(segments):
            start, end = batch.seg_bounds[i]
            for j, step in enumerate(seg.steps):
                batch.actions[start + j] = spec.flat_index(step.action)
        actions = np.asarray(batch.actions, dtype=np.intp)

        fwd: PolicyForward = self.network.forward(
            batch.phi_slots, batch.phi_global, mask=batch.mask, noise=noise
        )
        values = fwd.value.value
        pi_taken = fwd.pi.value[batch.step_rows_arr, actions]
        zero_pi = int(np.sum(pi_taken == 0.0))
        if zero_pi:
            log.warning(
                "target policy assigns zero probability to %d stored actions "
                "(stale behavior policy)",
                zero_pi,
            )

        targets = np.empty(len(batch.step_rows))
        advantages = np.empty(len(batch.step_rows))
        rho_all = np.empty(len(batch.step_rows))
        for i, seg in enumerate(segments):
            start, end = batch.seg_bounds[i]
            rows = batch.step_rows_arr[start:end]
            rho, c = truncated_weights(
                pi_taken[start:end], batch.mus_arr[start:end], self.vtrace_cfg
            )
            boot_row = batch.boot_rows[i]
            bootstrap = 0.0 if boot_row < 0 else float(values[boot_row])
            res = vtrace_targets(
                batch.rewards_arr[start:end], values[rows], bootstrap, rho, c, self.vtrace_cfg
            )
            targets[start:end] = res.targets
            advantages[start:end] = res.advantages
            rho_all[start:end] = rho

        v_pred = ad.take_rows(fwd.value, batch.step_rows_arr)
        loss_v = value_loss(v_pred, targets)

        log_pi_rows = ad.take_rows(fwd.log_pi, batch.step_rows_arr)
        pi_rows = ad.take_rows(fwd.pi, batch.step_rows_arr)
        loss_p = policy_loss(log_pi_rows, pi_rows, actions, rho_all, advantages, self.weights)

        entropy = float(-np.sum(pi_rows.value * log_pi_rows.value, axis=1).mean())
        stats = DomainBatchStats(
            steps=len(batch.step_rows),
            value_loss=float(loss_v.value) / max(len(batch.step_rows), 1),
            policy_loss=float(loss_p.value) / max(len(batch.step_rows), 1),
            entropy=entropy,
            mean_rho=float(rho_all.mean()),
            zero_pi_actions=zero_pi,
        )
        return loss_v, loss_p, stats

    def domain_gradients(
        self,
        segments: list[Segment],
        spec,
        noise=None,
    ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], DomainBatchStats]:
        """Separate value and policy gradient contributions for one minibatch."""
        loss_v, loss_p, stats = self._batch_losses(segments, spec, noise)
        ad.backward(loss_v)
        d_beta = self._harvest_grads()
        ad.backward(loss_p)
        d_theta = self._harvest_grads()
        return d_beta, d_theta, stats

    def multitask_update(
        self,
        memory: ReplayMemory,
        domains: dict,
        sample_rng: np.random.Generator,
        noise_rng: np.random.Generator,
    ) -> UpdateStats:
        """One round: a minibatch per domain, summed gradients, one Adam step.

        `domains` maps domain id to its GraphSpec (for flat action indices).
        Domains with empty memories are skipped with a notice. Never mutates
        replay contents or previously published snapshots.
        """
        acc = GradientAccumulator()
        stats = UpdateStats(version=self.version, total_steps=0, grad_norm=0.0)
        skipped = []
        for domain_id, spec in domains.items():
            segments = memory.sample_segments(domain_id, self.batch_size, sample_rng)
            if not segments:
                skipped.append(domain_id)
                log.info("domain %s has no experience yet; skipping this round", domain_id)
                continue
            noise = self.network.sample_noise(noise_rng)
            # one backward on the summed losses: the two contributions add on
            # the shared parameters anyway, and the trunk is traversed once
            loss_v, loss_p, batch_stats = self._batch_losses(segments, spec, noise)
            ad.backward(loss_v + loss_p)
            acc.add_value(self._harvest_grads())
            acc.n_steps += batch_stats.steps
            stats.domains[domain_id] = batch_stats
        stats.skipped = tuple(skipped)
        if acc.n_steps == 0:
            return stats

        grads = {k: g / acc.n_steps for k, g in acc.combined().items()}
        grads, norm = clip_by_global_norm(grads, self.clip_norm)
        stats.grad_norm = norm
        stats.total_steps = acc.n_steps
        try:
            with self._lock:
                self.adam.step(grads)
                self.version += 1
                stats.version = self.version
        except GradientError as exc:
            stats.aborted = True
            log.warning("update aborted: %s", exc)
        acc.reset()
        return stats
