"""Synthetic slot-filling dialogue environment.

A hidden user goal (one value or "any" per slot, always satisfiable by at
least one database entity) drives a rule-based user. The system converses
through a noisy semantic channel: with probability `error_rate` an answer
is corrupted to a random wrong value. A per-slot Bayesian tracker folds
each observation into a belief over {none} + {any} + values, and fixed-size
feature vectors summarize the belief so the same policy runs on any domain.

Rewards: -1 per turn; a terminal inform matching every goal constraint adds
+20, so an episode of T turns returns 20 - T on success and -T on failure.
The dialogue fails outright on the second wrong inform, on a system `bye`,
or when the turn limit runs out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .domains import DomainSpec, EnvProfile
from .policy import ActionId, GraphSpec, I_ACTION_COUNT, S_ACTION_COUNT

__all__ = [
    "BeliefFeatures",
    "DialogueEnv",
    "DialogueFinishedError",
    "I_PRIMITIVES",
    "S_PRIMITIVES",
    "S_FEATURE_DIM",
    "I_FEATURE_DIM",
    "WRONG_INFORM_LIMIT",
]

S_PRIMITIVES = ("request", "confirm", "select")
I_PRIMITIVES = ("inform", "inform_alternatives", "bye", "repeat", "request_more")
assert len(S_PRIMITIVES) == S_ACTION_COUNT and len(I_PRIMITIVES) == I_ACTION_COUNT

S_FEATURE_DIM = 16
I_FEATURE_DIM = 32

WRONG_INFORM_LIMIT = 2      # second wrong inform ends the dialogue as a failure
SUCCESS_BONUS = 20.0
TURN_PENALTY = -1.0
GOAL_ANY_RATE = 0.25        # chance a goal slot is unconstrained
UNFRIENDLY_COMPLY = 0.7     # unfriendly users answer questions this often

ANY = -1                    # goal / conveyance token for "any value is fine"

# belief vector layout per slot: [none, any, value_0, ..., value_{m-1}]
B_NONE = 0
B_ANY = 1
B_VALUES = 2

USER_ACTS = ("none", "value", "any", "affirm", "deny", "silent")
SYS_ACTS = ("none",) + S_PRIMITIVES + I_PRIMITIVES
_MATCH_BUCKETS = 4          # candidate-count buckets: 0, 1, 2-4, 5+

_GLOBAL_USED = 1 + _MATCH_BUCKETS + len(USER_ACTS) + len(SYS_ACTS) + 1
assert _GLOBAL_USED <= I_FEATURE_DIM


class DialogueFinishedError(RuntimeError):
    """step() called after the episode ended."""


@dataclass(frozen=True)
class BeliefFeatures:
    """Fixed-dimension state features: one vector per slot plus one global."""

    phi_slots: np.ndarray    # (n_slots, S_FEATURE_DIM)
    phi_global: np.ndarray   # (I_FEATURE_DIM,)


class DialogueEnv:
    """One dialogue task instance; single-threaded, owned by one actor."""

    def __init__(self, domain: DomainSpec, profile: EnvProfile):
        self.domain = domain
        self.profile = profile
        self.spec = GraphSpec(domain.n_slots)
        self._entities = domain.entity_array()
        self._rng: np.random.Generator | None = None
        self._active = False
        self.success = False
        self.turns = 0

    # -- episode lifecycle ---------------------------------------------------

    def reset(self, rng: np.random.Generator) -> tuple[BeliefFeatures, np.ndarray]:
        """Draw a satisfiable hidden goal and return turn-0 features and mask."""
        self._rng = rng
        n = self.domain.n_slots
        seed_entity = self._entities[rng.integers(len(self._entities))]
        self._goal = tuple(
            ANY if rng.random() < GOAL_ANY_RATE else int(seed_entity[i]) for i in range(n)
        )
        self._beliefs = []
        for count in self.domain.value_counts:
            b = np.zeros(count + B_VALUES)
            b[B_NONE] = 1.0
            self._beliefs.append(b)
        self.turns = 0
        self.success = False
        self._active = True
        self._wrong_informs = 0
        self._informed: set[int] = set()
        self._got_affirm = [False] * n
        self._requested_last = [False] * n
        self._last_user_act = "none"
        self._last_sys_act = "none"
        self._last_true_utterance = None
        return self._features(), self._mask()

    def step(self, action: ActionId, rng: np.random.Generator | None = None):
        """Apply one system action; returns (features, reward, done, mask)."""
        if not self._active:
            raise DialogueFinishedError("episode already finished")
        if rng is not None:
            self._rng = rng
        self.turns += 1
        self._requested_last = [False] * self.domain.n_slots
        self._last_user_act = "silent"

        reward = TURN_PENALTY
        done = False
        if action.node == 0:
            prim = I_PRIMITIVES[action.prim]
            if prim == "inform" or prim == "inform_alternatives":
                done = self._do_inform(alternatives=prim == "inform_alternatives")
            elif prim == "bye":
                # an unsatisfied user refuses to end the conversation; the
                # dialogue only terminates on a matching inform, the second
                # wrong inform, or the turn limit
                self._last_user_act = "deny"
            elif prim == "repeat":
                self._replay_last_utterance()
            elif prim == "request_more":
                pass  # user has nothing to add
            self._last_sys_act = prim
        else:
            slot = action.node - 1
            prim = S_PRIMITIVES[action.prim]
            if prim == "request":
                self._do_request(slot)
            elif prim == "confirm":
                self._do_confirm(slot)
            elif prim == "select":
                self._do_select(slot)
            self._last_sys_act = prim

        if done and self.success:
            reward += SUCCESS_BONUS
        if not done and self.turns >= self.domain.max_turns:
            done = True
        if done:
            self._active = False
        return self._features(), reward, done, self._mask()

    # -- system actions --------------------------------------------------------

    def _comply(self) -> bool:
        if self.profile.user_style == "unfriendly":
            return self._rng.random() < UNFRIENDLY_COMPLY
        return True

    def _do_request(self, slot: int) -> None:
        self._requested_last[slot] = True
        if not self._comply():
            return
        self._deliver_value(slot, self._goal[slot])

    def _do_select(self, slot: int) -> None:
        # nothing to offer while the slot belief is all-"none"
        if self._beliefs[slot][B_NONE] >= 1.0:
            return
        if not self._comply():
            return
        self._deliver_value(slot, self._goal[slot])

    def _do_confirm(self, slot: int) -> None:
        belief = self._beliefs[slot]
        if belief[B_NONE] >= 1.0:
            return
        proposed_hyp = int(np.argmax(belief[B_ANY:])) + B_ANY
        if not self._comply():
            return
        goal_hyp = B_ANY if self._goal[slot] == ANY else B_VALUES + self._goal[slot]
        truly_affirms = self._goal[slot] == ANY or goal_hyp == proposed_hyp
        self._last_true_utterance = ("confirm", slot, proposed_hyp, truly_affirms)
        self._deliver_confirm(slot, proposed_hyp, truly_affirms)

    def _do_inform(self, alternatives: bool) -> bool:
        constraints = self._believed_constraints()
        candidates = self._query(constraints)
        entity_idx = None
        if candidates.size:
            entity_idx = int(candidates[0])
            if alternatives:
                fresh = [int(i) for i in candidates if int(i) not in self._informed]
                if fresh:
                    entity_idx = fresh[0]
            self._informed.add(entity_idx)
            if self._matches_goal(self._entities[entity_idx]):
                self.success = True
                return True
        self._wrong_informs += 1
        if self._wrong_informs >= WRONG_INFORM_LIMIT:
            return True
        self._correct_after_inform(constraints, entity_idx)
        return False

    # -- user responses ----------------------------------------------------------

    def _corrupt_token(self, slot: int, token: int) -> int:
        e = self.profile.error_rate
        if e <= 0.0 or self._rng.random() >= e:
            return token
        m = self.domain.value_counts[slot]
        if token == ANY:
            return int(self._rng.integers(m))
        r = int(self._rng.integers(m - 1))
        return r if r < token else r + 1

    def _deliver_value(self, slot: int, true_token: int) -> None:
        self._last_true_utterance = ("value", slot, true_token)
        obs = self._corrupt_token(slot, true_token)
        self._update_value_obs(slot, obs)
        self._last_user_act = "any" if obs == ANY else "value"

    def _deliver_confirm(self, slot: int, proposed_hyp: int, truly_affirms: bool) -> None:
        e = self.profile.error_rate
        flip = e > 0.0 and self._rng.random() < e
        observed_affirm = truly_affirms != flip
        self._update_confirm_obs(slot, proposed_hyp, observed_affirm)
        if observed_affirm:
            self._got_affirm[slot] = True
            self._last_user_act = "affirm"
        else:
            self._last_user_act = "deny"
            if not truly_affirms:
                # the user restates their actual constraint alongside the denial
                obs = self._corrupt_token(slot, self._goal[slot])
                self._update_value_obs(slot, obs)

    def _replay_last_utterance(self) -> None:
        last = self._last_true_utterance
        if last is None:
            return
        if last[0] == "value":
            _, slot, token = last
            obs = self._corrupt_token(slot, token)
            self._update_value_obs(slot, obs)
            self._last_user_act = "any" if obs == ANY else "value"
        else:
            _, slot, proposed_hyp, truly_affirms = last
            self._deliver_confirm(slot, proposed_hyp, truly_affirms)

    def _correct_after_inform(self, constraints: np.ndarray, entity_idx: int | None) -> None:
        if not self._comply():
            return
        goal = self._goal
        slot = None
        if entity_idx is not None:
            entity = self._entities[entity_idx]
            for i, g in enumerate(goal):
                if g != ANY and entity[i] != g:
                    slot = i
                    break
        else:
            for i, g in enumerate(goal):
                if g != ANY and constraints[i] != -1 and constraints[i] != g:
                    slot = i
                    break
            if slot is None:
                for i, g in enumerate(goal):
                    if g != ANY and constraints[i] == -1:
                        slot = i
                        break
            if slot is None:
                for i, g in enumerate(goal):
                    if g == ANY and constraints[i] != -1:
                        slot = i
                        break
        if slot is not None:
            self._deliver_value(slot, goal[slot])

    # -- belief tracking -----------------------------------------------------------

    def _spread_none(self, belief: np.ndarray) -> None:
        # first evidence converts ignorance into a uniform prior over the
        # concrete hypotheses (every value plus "any")
        none_mass = belief[B_NONE]
        if none_mass > 0.0:
            belief[B_ANY:] += none_mass / (belief.size - 1)
            belief[B_NONE] = 0.0

    def _posterior(self, slot: int, likelihood: np.ndarray) -> None:
        belief = self._beliefs[slot]
        self._spread_none(belief)
        belief *= likelihood
        total = belief.sum()
        if total <= 1e-300:
            # evidence contradicted the whole support (possible with e=0);
            # fall back to renewed ignorance over concrete hypotheses
            belief[B_NONE] = 0.0
            belief[B_ANY:] = 1.0 / (belief.size - 1)
            belief *= likelihood
            total = belief.sum()
            if total <= 1e-300:
                belief[B_ANY:] = 1.0 / (belief.size - 1)
                return
        belief /= total

    def _update_value_obs(self, slot: int, obs: int) -> None:
        e = self.profile.error_rate
        m = self.domain.value_counts[slot]
        lik = np.zeros(m + B_VALUES)
        if obs == ANY:
            lik[B_ANY] = 1.0 - e
        else:
            lik[B_ANY] = e / m
            lik[B_VALUES:] = e / (m - 1) if m > 1 else 0.0
            lik[B_VALUES + obs] = 1.0 - e
        self._posterior(slot, lik)

    def _update_confirm_obs(self, slot: int, proposed_hyp: int, affirmed: bool) -> None:
        e = self.profile.error_rate
        m = self.domain.value_counts[slot]
        lik = np.full(m + B_VALUES, e if affirmed else 1.0 - e)
        agree = 1.0 - e if affirmed else e
        lik[proposed_hyp] = agree
        lik[B_ANY] = agree  # an unconstrained user accepts any proposal
        lik[B_NONE] = 0.0
        self._posterior(slot, lik)

    # -- queries and features ---------------------------------------------------------

    def _believed_constraints(self) -> np.ndarray:
        """Top overall hypothesis per slot; -1 where none/any wins."""
        out = np.full(self.domain.n_slots, -1, dtype=np.int64)
        for i, belief in enumerate(self._beliefs):
            top = int(np.argmax(belief))
            if top >= B_VALUES:
                out[i] = top - B_VALUES
        return out

    def _query(self, constraints: np.ndarray) -> np.ndarray:
        match = (self._entities == constraints) | (constraints == -1)
        return np.flatnonzero(match.all(axis=1))

    def _matches_goal(self, entity: np.ndarray) -> bool:
        return all(g == ANY or entity[i] == g for i, g in enumerate(self._goal))

    def _features(self) -> BeliefFeatures:
        n = self.domain.n_slots
        phi_slots = np.zeros((n, S_FEATURE_DIM))
        top_probs = np.empty(n)
        for i, belief in enumerate(self._beliefs):
            m = self.domain.value_counts[i]
            concrete = belief[B_ANY:]
            order = np.sort(concrete)[::-1]
            top_probs[i] = order[0]
            probs = belief[belief > 0.0]
            entropy = -(probs * np.log(probs)).sum() / math.log(belief.size)
            top_value = int(np.argmax(belief[B_VALUES:]))
            top_hyp = int(np.argmax(belief))
            if top_hyp == B_NONE:
                match_frac = 0.0
            elif top_hyp == B_ANY:
                match_frac = 1.0
            else:
                match_frac = float(np.mean(self._entities[:, i] == top_value))
            phi_slots[i, 0] = order[0]
            phi_slots[i, 1] = order[1] if order.size > 1 else 0.0
            phi_slots[i, 2] = belief[B_NONE]
            phi_slots[i, 3] = entropy
            phi_slots[i, 4] = math.log(m) / math.log(64.0)
            phi_slots[i, 5] = match_frac
            phi_slots[i, 6] = 1.0 if self._requested_last[i] else 0.0
            phi_slots[i, 7] = 1.0 if top_hyp != B_NONE else 0.0
            phi_slots[i, 8] = 1.0 if self._got_affirm[i] else 0.0

        phi_global = np.zeros(I_FEATURE_DIM)
        phi_global[0] = self.turns / self.domain.max_turns
        count = self._query(self._believed_constraints()).size
        bucket = 0 if count == 0 else 1 if count == 1 else 2 if count <= 4 else 3
        phi_global[1 + bucket] = 1.0
        base = 1 + _MATCH_BUCKETS
        phi_global[base + USER_ACTS.index(self._last_user_act)] = 1.0
        base += len(USER_ACTS)
        phi_global[base + SYS_ACTS.index(self._last_sys_act)] = 1.0
        base += len(SYS_ACTS)
        phi_global[base] = float(top_probs.mean())
        return BeliefFeatures(phi_slots=phi_slots, phi_global=phi_global)

    def _mask(self) -> np.ndarray:
        mask = np.ones(self.spec.n_actions)
        if not self.profile.masks_on:
            return mask
        ready = all(b[B_ANY:].max() > 0.5 for b in self._beliefs)
        if not ready:
            for prim in ("inform", "inform_alternatives"):
                mask[self.spec.flat_index(ActionId(0, I_PRIMITIVES.index(prim)))] = 0.0
        for i, belief in enumerate(self._beliefs):
            if belief[B_NONE] >= 1.0:
                for prim in ("confirm", "select"):
                    mask[self.spec.flat_index(ActionId(i + 1, S_PRIMITIVES.index(prim)))] = 0.0
        if self.turns == 0:
            mask[self.spec.flat_index(ActionId(0, I_PRIMITIVES.index("repeat")))] = 0.0
        return mask

    # -- introspection used by tests and scripted policies ------------------------------

    @property
    def active(self) -> bool:
        return self._active

    @property
    def goal(self) -> tuple[int, ...]:
        return self._goal

    def belief(self, slot: int) -> np.ndarray:
        return self._beliefs[slot].copy()
