"""Graph-network dialogue policy shared across domains of any slot count.

One slot-independent node (I) plus one node per slot (S). All S-nodes share
parameters and all edges of one type (S2S, S2I, I2S) share weights, so the
parameter set does not depend on the number of slots. Message passing runs
a fixed number of rounds; per-node heads then produce a slot-level
preference h_i, primitive preferences l_i, and a slot value q_i. Flat
action preferences compose hierarchically as f_i = h_i + (l_i - max l_i),
which makes the flat argmax equal to picking the best node by h and then
its best primitive. The state value is V = softmax(h) . q.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .nn import Dense

__all__ = [
    "ActionId",
    "GraphSpec",
    "MaskError",
    "NetworkConfig",
    "PolicyForward",
    "PolicyNetwork",
    "PolicySnapshot",
    "I_ACTION_COUNT",
    "S_ACTION_COUNT",
    "select_action",
]

S_ACTION_COUNT = 3
I_ACTION_COUNT = 5

# additive logit penalty for masked actions; large enough that exp() underflows
# to exactly zero, finite so gradients stay NaN-free
MASK_PENALTY = 1e9


class MaskError(ValueError):
    """Action mask leaves nothing selectable."""


@dataclass(frozen=True)
class ActionId:
    """Node index (0 is the slot-independent node, 1..n are slots) plus the
    primitive index within that node's action set."""

    node: int
    prim: int


@dataclass(frozen=True)
class GraphSpec:
    """Graph layout for a domain with `n_slots` slot nodes.

    Flat action order is [slot1 prims, ..., slotN prims, I prims]; the
    slot-vector order used by h/q/p_slot is [slot1, ..., slotN, I].
    """

    n_slots: int

    def __post_init__(self):
        if self.n_slots < 1:
            raise ValueError("need at least one slot node")

    @property
    def n_nodes(self) -> int:
        return self.n_slots + 1

    @property
    def n_actions(self) -> int:
        return S_ACTION_COUNT * self.n_slots + I_ACTION_COUNT

    def flat_index(self, action: ActionId) -> int:
        if action.node == 0:
            if not 0 <= action.prim < I_ACTION_COUNT:
                raise ValueError(f"bad I-node primitive {action.prim}")
            return S_ACTION_COUNT * self.n_slots + action.prim
        if not 1 <= action.node <= self.n_slots:
            raise ValueError(f"bad node index {action.node}")
        if not 0 <= action.prim < S_ACTION_COUNT:
            raise ValueError(f"bad S-node primitive {action.prim}")
        return (action.node - 1) * S_ACTION_COUNT + action.prim

    def action_at(self, flat: int) -> ActionId:
        if not 0 <= flat < self.n_actions:
            raise ValueError(f"flat action {flat} out of range")
        slot_area = S_ACTION_COUNT * self.n_slots
        if flat >= slot_area:
            return ActionId(node=0, prim=flat - slot_area)
        return ActionId(node=flat // S_ACTION_COUNT + 1, prim=flat % S_ACTION_COUNT)

    def node_axis_index(self, node: int) -> int:
        """Index of a node in the [slots..., I] vectors (h, q, p_slot)."""
        return self.n_slots if node == 0 else node - 1


@dataclass(frozen=True)
class NetworkConfig:
    """Layer sizes and switches. Defaults give the full-size network; tests
    shrink the dims. `hierarchical` and `noisy` are the ablation switches."""

    s_feat: int = 16
    i_feat: int = 32
    s_state: int = 40
    i_state: int = 250
    s_msg: int = 20
    i_msg: int = 100
    n_layers: int = 2
    noisy: bool = True
    hierarchical: bool = True
    sigma_scale: float = 0.4


@dataclass
class PolicyForward:
    """Forward products for a batch of states (all tensors, batch-first)."""

    flat_prefs: ad.Tensor      # (B, A) pre-mask preferences f
    pi: ad.Tensor              # (B, A) masked action distribution
    log_pi: ad.Tensor          # (B, A)
    slot_prefs: ad.Tensor      # (B, n+1) h vector, [slots..., I]
    p_slot: ad.Tensor          # (B, n+1)
    q_values: ad.Tensor        # (B, n+1)
    value: ad.Tensor           # (B,) V = p_slot . q
    n_slots: int = field(default=0)


def _mean_excluding_self(msgs: ad.Tensor, incoming: ad.Tensor, n: int) -> ad.Tensor:
    """Per-receiver mean over the n senders of an S-node.

    `msgs` holds each S-node's outgoing same-type message, shape (B, n, d);
    receiver j averages the other S-nodes' messages with the I-node message
    `incoming` (B, 1, d), i.e. (sum(msgs) - msgs_j + incoming) / n.
    """
    total = msgs.sum(axis=1, keepdims=True)
    return (total - msgs + incoming) / float(n)


def _mean_over_senders(msgs: ad.Tensor) -> ad.Tensor:
    """Mean over the slot-node messages arriving at the I-node; (B, n, d) -> (B, d)."""
    return msgs.sum(axis=1) / float(msgs.value.shape[1])


class PolicyNetwork:
    """The shared parameter set plus the forward computation."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg

        def dense(name, i, o, bias, noisy):
            return Dense(name, i, o, rng, bias=bias, noisy=noisy, sigma_scale=cfg.sigma_scale)

        nz = cfg.noisy
        self.input_s = dense("input_s", cfg.s_feat, cfg.s_state, True, nz)
        self.input_i = dense("input_i", cfg.i_feat, cfg.i_state, True, nz)
        self.msg_s2s = []
        self.msg_s2i = []
        self.msg_i2s = []
        self.upd_s = []
        self.upd_i = []
        self.proj_s = []
        self.proj_i = []
        for l in range(cfg.n_layers):
            self.msg_s2s.append(dense(f"msg_s2s.{l}", cfg.s_state, cfg.s_msg, False, nz))
            self.msg_s2i.append(dense(f"msg_s2i.{l}", cfg.s_state, cfg.i_msg, False, nz))
            self.msg_i2s.append(dense(f"msg_i2s.{l}", cfg.i_state, cfg.s_msg, False, nz))
            self.upd_s.append(dense(f"upd_s.{l}", cfg.s_state, cfg.s_msg, False, nz))
            self.upd_i.append(dense(f"upd_i.{l}", cfg.i_state, cfg.i_msg, False, nz))
            # the printed update weights land in message space; these linear
            # projections carry the activated result back to the node state
            # size so every parsing layer has identical shapes
            self.proj_s.append(dense(f"proj_s.{l}", cfg.s_msg, cfg.s_state, False, nz))
            self.proj_i.append(dense(f"proj_i.{l}", cfg.i_msg, cfg.i_state, False, nz))
        # output heads are plain linear layers, one set per node type
        self.head_sp_s = dense("head_slot_pref_s", cfg.s_state, 1, True, False)
        self.head_pp_s = dense("head_prim_pref_s", cfg.s_state, S_ACTION_COUNT, True, False)
        self.head_sq_s = dense("head_slot_value_s", cfg.s_state, 1, True, False)
        self.head_sp_i = dense("head_slot_pref_i", cfg.i_state, 1, True, False)
        self.head_pp_i = dense("head_prim_pref_i", cfg.i_state, I_ACTION_COUNT, True, False)
        self.head_sq_i = dense("head_slot_value_i", cfg.i_state, 1, True, False)

    def _layers(self) -> list[Dense]:
        return [
            self.input_s,
            self.input_i,
            *self.msg_s2s,
            *self.msg_s2i,
            *self.msg_i2s,
            *self.upd_s,
            *self.upd_i,
            *self.proj_s,
            *self.proj_i,
            self.head_sp_s,
            self.head_pp_s,
            self.head_sq_s,
            self.head_sp_i,
            self.head_pp_i,
            self.head_sq_i,
        ]

    def parameters(self) -> dict[str, ad.Tensor]:
        out: dict[str, ad.Tensor] = {}
        for layer in self._layers():
            out.update(layer.params())
        return out

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.parameters().items()}

    @classmethod
    def from_arrays(cls, cfg: NetworkConfig, arrays: Mapping[str, np.ndarray]) -> "PolicyNetwork":
        net = cls(cfg, np.random.default_rng(0))
        for layer in net._layers():
            layer.load_arrays(arrays)
        return net

    def sample_noise(self, rng: np.random.Generator):
        """One exploration-noise draw for every noisy layer (None when noise is off)."""
        if not self.cfg.noisy:
            return None
        return {layer.name: layer.sample_noise(rng) for layer in self._layers() if layer.noisy}

    # -- forward stages ------------------------------------------------------

    def encode_inputs(self, phi_s_flat: ad.Tensor, phi_i: ad.Tensor, noise=None):
        """Per-node input encoders; all S-nodes run through the same layer."""
        eps = (noise or {}).get
        h_s = ad.relu(self.input_s(phi_s_flat, eps("input_s")))
        h_i = ad.relu(self.input_i(phi_i, eps("input_i")))
        return h_s, h_i

    def parse_graph(self, h_s: ad.Tensor, h_i: ad.Tensor, n: int, noise=None):
        """Typed-edge message rounds: send, average per receiver, update."""
        eps = (noise or {}).get
        b = h_i.value.shape[0]
        for l in range(self.cfg.n_layers):
            m_s2s = self.msg_s2s[l](h_s, eps(f"msg_s2s.{l}"))
            m_s2i = self.msg_s2i[l](h_s, eps(f"msg_s2i.{l}"))
            m_i2s = self.msg_i2s[l](h_i, eps(f"msg_i2s.{l}"))
            agg_s = _mean_excluding_self(
                m_s2s.reshape(b, n, self.cfg.s_msg),
                m_i2s.reshape(b, 1, self.cfg.s_msg),
                n,
            ).reshape(b * n, self.cfg.s_msg)
            agg_i = _mean_over_senders(m_s2i.reshape(b, n, self.cfg.i_msg))
            inner_s = ad.relu(self.upd_s[l](h_s, eps(f"upd_s.{l}")) + agg_s)
            inner_i = ad.relu(self.upd_i[l](h_i, eps(f"upd_i.{l}")) + agg_i)
            h_s = self.proj_s[l](inner_s, eps(f"proj_s.{l}"))
            h_i = self.proj_i[l](inner_i, eps(f"proj_i.{l}"))
        return h_s, h_i

    def decision_heads(
        self,
        h_s: ad.Tensor,
        h_i: ad.Tensor,
        n: int,
        mask: np.ndarray | None,
    ) -> PolicyForward:
        b = h_i.value.shape[0]
        slot_pref_s = self.head_sp_s(h_s)             # (B*n, 1)
        prim_pref_s = self.head_pp_s(h_s)             # (B*n, 3)
        slot_val_s = self.head_sq_s(h_s)              # (B*n, 1)
        slot_pref_i = self.head_sp_i(h_i)             # (B, 1)
        prim_pref_i = self.head_pp_i(h_i)             # (B, 5)
        slot_val_i = self.head_sq_i(h_i)              # (B, 1)

        if self.cfg.hierarchical:
            f_s = slot_pref_s + (prim_pref_s - prim_pref_s.max(axis=1, keepdims=True))
            f_i = slot_pref_i + (prim_pref_i - prim_pref_i.max(axis=1, keepdims=True))
        else:
            f_s = prim_pref_s
            f_i = prim_pref_i

        flat_prefs = ad.concat([f_s.reshape(b, n * S_ACTION_COUNT), f_i], axis=1)
        slot_prefs = ad.concat([slot_pref_s.reshape(b, n), slot_pref_i], axis=1)
        q_values = ad.concat([slot_val_s.reshape(b, n), slot_val_i], axis=1)

        p_slot = ad.softmax(slot_prefs, axis=1)
        value = (p_slot * q_values).sum(axis=1)

        logits = flat_prefs
        if mask is not None:
            mask = np.asarray(mask, dtype=np.float64)
            if mask.ndim == 1:
                mask = np.broadcast_to(mask, flat_prefs.value.shape)
            if not np.all(mask.any(axis=1)):
                raise MaskError("a state has every action masked")
            logits = flat_prefs + ad.Tensor((mask - 1.0) * MASK_PENALTY)
        pi = ad.softmax(logits, axis=1)
        log_pi = ad.log_softmax(logits, axis=1)
        return PolicyForward(
            flat_prefs=flat_prefs,
            pi=pi,
            log_pi=log_pi,
            slot_prefs=slot_prefs,
            p_slot=p_slot,
            q_values=q_values,
            value=value,
            n_slots=n,
        )

    def forward(
        self,
        phi_slots: np.ndarray,
        phi_global: np.ndarray,
        mask: np.ndarray | None = None,
        noise=None,
    ) -> PolicyForward:
        """Full pass over a batch: phi_slots (B, n, s_feat), phi_global (B, i_feat)."""
        phi_slots = np.asarray(phi_slots, dtype=np.float64)
        phi_global = np.asarray(phi_global, dtype=np.float64)
        if phi_slots.ndim != 3 or phi_global.ndim != 2:
            raise ad.AutodiffUsageError("expected phi_slots (B, n, d_s) and phi_global (B, d_i)")
        b, n, _ = phi_slots.shape
        phi_s_flat = ad.Tensor(phi_slots.reshape(b * n, phi_slots.shape[2]))
        h_s, h_i = self.encode_inputs(phi_s_flat, ad.Tensor(phi_global), noise)
        h_s, h_i = self.parse_graph(h_s, h_i, n, noise)
        return self.decision_heads(h_s, h_i, n, mask)


@dataclass(frozen=True)
class PolicySnapshot:
    """Immutable published copy of the learner's parameters.

    Forward passes on a snapshot are pure; actors and evaluators may share
    one snapshot across threads.
    """

    version: int
    network: PolicyNetwork

    @property
    def cfg(self) -> NetworkConfig:
        return self.network.cfg


def select_action(
    fwd: PolicyForward,
    spec: GraphSpec,
    rng: np.random.Generator | None = None,
    greedy: bool = False,
) -> tuple[ActionId, float]:
    """Pick an action from a single-state forward; returns its probability
    under the masked distribution (the stored behavior probability)."""
    pi = fwd.pi.value[0]
    if not np.any(pi > 0.0):
        raise MaskError("all actions masked")
    if greedy:
        flat = int(np.argmax(pi))
    else:
        if rng is None:
            raise ValueError("sampling needs an rng")
        flat = int(rng.choice(pi.shape[0], p=pi / pi.sum()))
    return spec.action_at(flat), float(pi[flat])


def make_mask_error_checked(mask: np.ndarray) -> np.ndarray:
    if not np.any(np.asarray(mask) > 0):
        raise MaskError("mask allows no actions")
    return mask


def ablated(cfg: NetworkConfig, *, hierarchical: bool | None = None, noisy: bool | None = None) -> NetworkConfig:
    """Config copy with ablation switches applied."""
    kwargs = {}
    if hierarchical is not None:
        kwargs["hierarchical"] = hierarchical
    if noisy is not None:
        kwargs["noisy"] = noisy
    return replace(cfg, **kwargs)
