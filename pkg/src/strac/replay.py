"""Per-domain episode memory with uniform n-step segment sampling.

Actors append whole episodes; the learner samples fixed-horizon segments
cut from episode start (the final shorter block is kept). One lock makes
append/sample linearizable, and episodes are immutable tuples, so a sampler
never sees a partially written episode.
"""

from __future__ import annotations

import csv
import threading
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import BeliefFeatures
from .policy import ActionId

__all__ = ["Episode", "ReplayMemory", "Segment", "TrajectoryStep"]


@dataclass(frozen=True)
class TrajectoryStep:
    """One turn as the actor saw it: decision context, action, outcome."""

    features: BeliefFeatures
    action_mask: np.ndarray
    action: ActionId
    reward: float
    behavior_prob: float     # probability of `action` under the acting policy
    terminal: bool

    def __post_init__(self):
        if not 0.0 < self.behavior_prob <= 1.0:
            raise ValueError(f"behavior probability must be in (0, 1], got {self.behavior_prob}")


Episode = tuple[TrajectoryStep, ...]


@dataclass(frozen=True)
class Segment:
    """Up to n consecutive steps; `bootstrap` is the step right after the
    segment (None when the segment ends its episode)."""

    steps: tuple[TrajectoryStep, ...]
    bootstrap: TrajectoryStep | None


class ReplayMemory:
    def __init__(self, capacity_episodes: int = 1000, segment_len: int = 5):
        if capacity_episodes < 1 or segment_len < 1:
            raise ValueError("capacity and segment length must be positive")
        self.capacity = capacity_episodes
        self.segment_len = segment_len
        self._episodes: dict[str, deque[Episode]] = {}
        self._lock = threading.Lock()

    def append(self, domain_id: str, episode) -> None:
        steps = tuple(episode)
        if not steps:
            raise ValueError("refusing to store an empty episode")
        if not steps[-1].terminal:
            raise ValueError("episode does not end with a terminal step")
        if any(s.terminal for s in steps[:-1]):
            raise ValueError("terminal step in the middle of an episode")
        with self._lock:
            bucket = self._episodes.setdefault(domain_id, deque(maxlen=self.capacity))
            bucket.append(steps)

    def episode_count(self, domain_id: str) -> int:
        with self._lock:
            return len(self._episodes.get(domain_id, ()))

    def step_count(self, domain_id: str) -> int:
        with self._lock:
            return sum(len(ep) for ep in self._episodes.get(domain_id, ()))

    def _segments(self, domain_id: str) -> list[Segment]:
        out = []
        for episode in self._episodes.get(domain_id, ()):
            for start in range(0, len(episode), self.segment_len):
                end = start + self.segment_len
                bootstrap = episode[end] if end < len(episode) else None
                out.append(Segment(steps=episode[start:end], bootstrap=bootstrap))
        return out

    def sample_segments(self, domain_id: str, batch: int, rng: np.random.Generator) -> list[Segment]:
        """Uniform-with-replacement over every stored segment; [] when empty."""
        with self._lock:
            segments = self._segments(domain_id)
        if not segments:
            return []
        idx = rng.integers(0, len(segments), size=batch)
        return [segments[i] for i in idx]

    def export_log(self, path, domains=None) -> Path:
        """Dump stored steps as delimited text for offline analysis.

        Columns: domain, episode, turn, node, prim, reward, behavior_prob,
        terminal. Episode numbering restarts per domain.
        """
        path = Path(path)
        with self._lock:
            snapshot = {
                d: list(eps)
                for d, eps in self._episodes.items()
                if domains is None or d in domains
            }
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["domain", "episode", "turn", "node", "prim", "reward", "behavior_prob", "terminal"]
            )
            for domain_id in sorted(snapshot):
                for ep_idx, episode in enumerate(snapshot[domain_id]):
                    for turn, step in enumerate(episode):
                        writer.writerow(
                            [
                                domain_id,
                                ep_idx,
                                turn,
                                step.action.node,
                                step.action.prim,
                                f"{step.reward:.10g}",
                                f"{step.behavior_prob:.10g}",
                                int(step.terminal),
                            ]
                        )
        return path
