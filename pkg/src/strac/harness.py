"""Experiment orchestration: actors, the learner loop, milestone evaluation.

Single mode trains one domain; multi mode round-robins dialogues across
domains so every domain sees the same count, while each update consumes one
minibatch per domain against the shared parameters. `serial=True` runs the
whole schedule on one thread with per-purpose rng streams, which makes two
runs of the same seed bit-identical; the default threaded mode runs one
actor thread per domain plus the learner thread, pacing actors one
outstanding dialogue each.

Outputs per seed: a learning-curve file, a training log, and checkpoints;
plus one mean curve file across seeds. Formats are documented in the README.
"""

from __future__ import annotations

import csv
import logging
import queue
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .domains import BUNDLED_DOMAINS, BUNDLED_PROFILES, DomainSpec, EnvProfile
from .env import DialogueEnv
from .learner import Learner, LossWeights, UpdateStats
from .nn import save_checkpoint
from .policy import (
    GraphSpec,
    NetworkConfig,
    PolicyNetwork,
    PolicySnapshot,
    select_action,
)
from .replay import ReplayMemory, TrajectoryStep
from .vtrace import VTraceConfig

__all__ = [
    "ExperimentConfig",
    "Hyperparams",
    "MilestoneRecord",
    "evaluate_milestone",
    "run_actor_dialogue",
    "run_experiment",
    "write_curves",
]

log = logging.getLogger("strac.harness")

CURVE_HEADER = ("seed", "dialogues", "domain", "success_rate", "mean_reward")
TRAIN_LOG_HEADER = (
    "update", "domain", "steps", "value_loss", "policy_loss", "entropy", "mean_rho"
)


@dataclass(frozen=True)
class Hyperparams:
    gamma: float = 0.99
    n_steps: int = 5
    rho_bar: float = 1.0
    c_bar: float = 5.0
    policy_coef: float = 0.3
    entropy_coef: float = 0.001
    lr: float = 1e-4
    batch_size: int = 64
    replay_capacity: int = 1000
    clip_norm: float = 10.0

    def vtrace(self) -> VTraceConfig:
        return VTraceConfig(
            rho_bar=self.rho_bar, c_bar=self.c_bar, gamma=self.gamma, n_steps=self.n_steps
        )

    def weights(self) -> LossWeights:
        return LossWeights(self.policy_coef, self.entropy_coef)


@dataclass(frozen=True)
class MilestoneRecord:
    seed: int
    dialogues: int            # per-domain training dialogues seen so far
    domain: str
    success_rate: float
    mean_reward: float

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValueError("success rate out of [0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "single"                      # "single" or "multi"
    domains: tuple[str, ...] = ("cafes",)
    profile: str = "env1"
    dialogues: int = 4000                     # per domain
    milestone_every: int = 200
    eval_dialogues: int = 500
    seeds: tuple[int, ...] = tuple(range(10))
    hierarchical: bool = True
    noisy: bool = True
    serial: bool = False
    out_dir: Path | None = None
    checkpoint_milestones: bool = True
    hyper: Hyperparams = Hyperparams()
    network: NetworkConfig = NetworkConfig()
    domain_registry: dict[str, DomainSpec] = field(default_factory=dict)
    profile_registry: dict[str, EnvProfile] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("single", "multi"):
            raise ValueError(f"mode must be single or multi, got {self.mode!r}")
        if self.mode == "single" and len(self.domains) != 1:
            raise ValueError("single mode takes exactly one domain")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.dialogues % self.milestone_every != 0:
            raise ValueError("dialogues must be divisible by milestone_every")

    def domain_spec(self, name: str) -> DomainSpec:
        try:
            return self.domain_registry.get(name) or BUNDLED_DOMAINS[name]
        except KeyError:
            raise KeyError(f"unknown domain {name!r}") from None

    def profile_spec(self) -> EnvProfile:
        try:
            return self.profile_registry.get(self.profile) or BUNDLED_PROFILES[self.profile]
        except KeyError:
            raise KeyError(f"unknown profile {self.profile!r}") from None

    def network_config(self) -> NetworkConfig:
        return replace(self.network, hierarchical=self.hierarchical, noisy=self.noisy)


def make_rng(*tags: int) -> np.random.Generator:
    """Deterministic stream keyed by an integer tag tuple."""
    return np.random.default_rng(np.random.SeedSequence(list(tags)))


# stream ids for make_rng(seed, STREAM, ...)
_S_INIT = 0
_S_ENV = 1
_S_ACT = 2
_S_NOISE = 3
_S_SAMPLE = 4
_S_EVAL = 5


def run_actor_dialogue(
    snapshot: PolicySnapshot,
    env: DialogueEnv,
    env_rng: np.random.Generator,
    act_rng: np.random.Generator,
    noise_rng: np.random.Generator | None,
) -> list[TrajectoryStep]:
    """Roll one dialogue with sampled actions; exploration noise is drawn
    once and kept for the whole episode."""
    network = snapshot.network
    noise = network.sample_noise(noise_rng) if noise_rng is not None else None
    features, mask = env.reset(env_rng)
    steps: list[TrajectoryStep] = []
    done = False
    while not done:
        with ad.no_grad():
            fwd = network.forward(
                features.phi_slots[None], features.phi_global[None], mask=mask, noise=noise
            )
        action, mu = select_action(fwd, env.spec, rng=act_rng)
        next_features, reward, done, next_mask = env.step(action)
        steps.append(
            TrajectoryStep(
                features=features,
                action_mask=mask,
                action=action,
                reward=reward,
                behavior_prob=mu,
                terminal=done,
            )
        )
        features, mask = next_features, next_mask
    return steps


def evaluate_policy(
    network: PolicyNetwork,
    domain: DomainSpec,
    profile: EnvProfile,
    count: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Greedy, noise-free rollouts; returns (success rate, mean return)."""
    env = DialogueEnv(domain, profile)
    wins = 0
    total = 0.0
    for _ in range(count):
        features, mask = env.reset(rng)
        done = False
        ep_return = 0.0
        while not done:
            with ad.no_grad():
                fwd = network.forward(
                    features.phi_slots[None], features.phi_global[None], mask=mask
                )
            action, _ = select_action(fwd, env.spec, greedy=True)
            features, reward, done, mask = env.step(action)
            ep_return += reward
        wins += env.success
        total += ep_return
    return wins / count, total / count


def evaluate_milestone(
    snapshot: PolicySnapshot,
    domain: DomainSpec,
    profile: EnvProfile,
    count: int,
    seed: int,
    dialogues_seen: int,
    eval_rng: np.random.Generator | None = None,
) -> MilestoneRecord:
    """Frozen-policy evaluation; never touches replay or learner state."""
    rng = eval_rng if eval_rng is not None else make_rng(seed, _S_EVAL, dialogues_seen)
    success, reward = evaluate_policy(snapshot.network, domain, profile, count, rng)
    return MilestoneRecord(
        seed=seed,
        dialogues=dialogues_seen,
        domain=domain.name,
        success_rate=success,
        mean_reward=reward,
    )


class _SeedRun:
    """Everything one seed needs: learner, replay, environments, rng streams."""

    def __init__(self, config: ExperimentConfig, seed: int):
        self.config = config
        self.seed = seed
        self.domains = {name: config.domain_spec(name) for name in config.domains}
        self.profile = config.profile_spec()
        self.specs = {name: GraphSpec(d.n_slots) for name, d in self.domains.items()}
        hyper = config.hyper
        network = PolicyNetwork(config.network_config(), make_rng(seed, _S_INIT))
        self.learner = Learner(
            network,
            hyper.vtrace(),
            hyper.weights(),
            lr=hyper.lr,
            clip_norm=hyper.clip_norm,
            batch_size=hyper.batch_size,
        )
        self.memory = ReplayMemory(hyper.replay_capacity, hyper.n_steps)
        self.env_rngs = {
            name: make_rng(seed, _S_ENV, i) for i, name in enumerate(config.domains)
        }
        self.act_rngs = {
            name: make_rng(seed, _S_ACT, i) for i, name in enumerate(config.domains)
        }
        self.noise_rngs = {
            name: make_rng(seed, _S_NOISE, i) for i, name in enumerate(config.domains)
        }
        self.sample_rng = make_rng(seed, _S_SAMPLE, 0)
        self.update_noise_rng = make_rng(seed, _S_NOISE, 1000)
        self.records: list[MilestoneRecord] = []
        self.train_rows: list[tuple] = []
        self.update_index = 0

    def roll_and_store(self, domain_name: str, snapshot: PolicySnapshot) -> None:
        env = DialogueEnv(self.domains[domain_name], self.profile)
        episode = run_actor_dialogue(
            snapshot,
            env,
            self.env_rngs[domain_name],
            self.act_rngs[domain_name],
            self.noise_rngs[domain_name] if self.config.noisy else None,
        )
        self.memory.append(domain_name, episode)

    def update(self) -> UpdateStats:
        stats = self.learner.multitask_update(
            self.memory, self.specs, self.sample_rng, self.update_noise_rng
        )
        self.update_index += 1
        for domain_name, dstats in stats.domains.items():
            self.train_rows.append(
                (
                    self.update_index,
                    domain_name,
                    dstats.steps,
                    f"{dstats.value_loss:.10g}",
                    f"{dstats.policy_loss:.10g}",
                    f"{dstats.entropy:.10g}",
                    f"{dstats.mean_rho:.10g}",
                )
            )
        return stats

    def milestone(self, dialogues_seen: int) -> None:
        snapshot = self.learner.snapshot()
        for i, name in enumerate(self.config.domains):
            record = evaluate_milestone(
                snapshot,
                self.domains[name],
                self.profile,
                self.config.eval_dialogues,
                self.seed,
                dialogues_seen,
                eval_rng=make_rng(self.seed, _S_EVAL, dialogues_seen, i),
            )
            self.records.append(record)
            log.info(
                "seed %d | %d dialogues | %s: success %.3f, reward %.2f",
                self.seed,
                dialogues_seen,
                name,
                record.success_rate,
                record.mean_reward,
            )
        if self.config.out_dir is not None and self.config.checkpoint_milestones:
            self.save_checkpoint(dialogues_seen)

    def save_checkpoint(self, dialogues_seen: int) -> None:
        out = Path(self.config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(
            out / f"checkpoint_seed{self.seed}.npz",
            self.learner.network.parameter_arrays(),
            meta={
                "seed": self.seed,
                "dialogues": dialogues_seen,
                "version": self.learner.version,
                "hierarchical": self.config.hierarchical,
                "noisy": self.config.noisy,
            },
        )


def _run_seed_serial(config: ExperimentConfig, seed: int) -> _SeedRun:
    run = _SeedRun(config, seed)
    names = list(config.domains)
    for dialogue_idx in range(config.dialogues):
        for name in names:
            run.roll_and_store(name, run.learner.snapshot())
            run.update()
        done = dialogue_idx + 1
        if done % config.milestone_every == 0:
            run.milestone(done)
    return run


def _run_seed_threaded(config: ExperimentConfig, seed: int) -> _SeedRun:
    run = _SeedRun(config, seed)
    names = list(config.domains)
    episodes_done = queue.Queue()
    # one outstanding dialogue per actor keeps the update:dialogue ratio at 1
    tokens = {name: threading.Semaphore(1) for name in names}
    errors: list[BaseException] = []

    def actor(name: str) -> None:
        try:
            for _ in range(config.dialogues):
                tokens[name].acquire()
                run.roll_and_store(name, run.learner.snapshot())
                episodes_done.put(name)
        except BaseException as exc:  # pragma: no cover - surfaced in main thread
            errors.append(exc)
            episodes_done.put(None)

    threads = [threading.Thread(target=actor, args=(name,), daemon=True) for name in names]
    for t in threads:
        t.start()
    counts = {name: 0 for name in names}
    total = config.dialogues * len(names)
    next_milestone = config.milestone_every
    for _ in range(total):
        name = episodes_done.get()
        if name is None:
            break
        run.update()
        counts[name] += 1
        if min(counts.values()) >= next_milestone:
            run.milestone(next_milestone)
            next_milestone += config.milestone_every
        tokens[name].release()
    for t in threads:
        t.join(timeout=60.0)
    if errors:
        raise errors[0]
    return run


def write_curves(path: Path, records: list[MilestoneRecord]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_HEADER)
        for r in records:
            writer.writerow(
                [r.seed, r.dialogues, r.domain, f"{r.success_rate:.10g}", f"{r.mean_reward:.10g}"]
            )
    return path


def _write_mean_curves(path: Path, per_seed: dict[int, list[MilestoneRecord]]) -> Path:
    """Arithmetic mean over seeds for every (dialogues, domain) milestone."""
    keys: dict[tuple[int, str], list[MilestoneRecord]] = {}
    for records in per_seed.values():
        for r in records:
            keys.setdefault((r.dialogues, r.domain), []).append(r)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_HEADER)
        for (dialogues, domain), rs in sorted(keys.items(), key=lambda kv: (kv[0][0], kv[0][1])):
            success = sum(r.success_rate for r in rs) / len(rs)
            reward = sum(r.mean_reward for r in rs) / len(rs)
            writer.writerow(["mean", dialogues, domain, f"{success:.10g}", f"{reward:.10g}"])
    return path


def _write_train_log(path: Path, rows: list[tuple]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAIN_LOG_HEADER)
        writer.writerows(rows)
    return path


def run_experiment(config: ExperimentConfig) -> dict[int, list[MilestoneRecord]]:
    """Train every seed, write curves/logs/checkpoints, return all records."""
    per_seed: dict[int, list[MilestoneRecord]] = {}
    for seed in config.seeds:
        runner = _run_seed_serial if config.serial else _run_seed_threaded
        run = runner(config, seed)
        per_seed[seed] = run.records
        if config.out_dir is not None:
            out = Path(config.out_dir)
            write_curves(out / f"curves_seed{seed}.csv", run.records)
            _write_train_log(out / f"train_log_seed{seed}.csv", run.train_rows)
            run.save_checkpoint(config.dialogues)
    if config.out_dir is not None:
        _write_mean_curves(Path(config.out_dir) / "curves_mean.csv", per_seed)
    return per_seed
