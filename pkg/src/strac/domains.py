"""Slot-filling domain ontologies, environment profiles, and config loading.

Three bundled domains ladder up in complexity (3, 6, and 11 slots) and six
bundled profiles sweep the semantic error rate, the action-mask switch, and
the user style. Custom domains and profiles load from a JSON file; the
schema is documented in `load_config` and the README.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DomainSpec",
    "EnvProfile",
    "SlotSpec",
    "BUNDLED_DOMAINS",
    "BUNDLED_PROFILES",
    "load_config",
]

USER_STYLES = ("standard", "unfriendly")


@dataclass(frozen=True)
class SlotSpec:
    name: str
    values: tuple[str, ...]

    def __post_init__(self):
        if len(self.values) < 2:
            raise ValueError(f"slot {self.name!r} needs at least 2 values")
        if len(set(self.values)) != len(self.values):
            raise ValueError(f"slot {self.name!r} has duplicate values")


@dataclass(frozen=True)
class DomainSpec:
    """Ontology plus entity database. Determines the policy graph's size but
    never its parameter shapes."""

    name: str
    slots: tuple[SlotSpec, ...]
    database: tuple[tuple[int, ...], ...]   # per entity, one value index per slot
    max_turns: int = 25

    def __post_init__(self):
        if not self.slots:
            raise ValueError("domain needs at least one slot")
        if not self.database:
            raise ValueError("domain needs a non-empty entity database")
        if self.max_turns < 1:
            raise ValueError("max_turns must be positive")
        for entity in self.database:
            if len(entity) != len(self.slots):
                raise ValueError(f"entity {entity} does not cover every slot")
            for value, slot in zip(entity, self.slots):
                if not 0 <= value < len(slot.values):
                    raise ValueError(f"entity value {value} out of range for slot {slot.name!r}")

    @property
    def n_slots(self) -> int:
        return len(self.slots)

    @property
    def value_counts(self) -> tuple[int, ...]:
        return tuple(len(s.values) for s in self.slots)

    def entity_array(self) -> np.ndarray:
        return np.asarray(self.database, dtype=np.int64)


@dataclass(frozen=True)
class EnvProfile:
    """Environment axes: channel noise, masking, and user behavior."""

    name: str
    error_rate: float
    masks_on: bool
    user_style: str = "standard"

    def __post_init__(self):
        if not 0.0 <= self.error_rate <= 1.0:
            raise ValueError(f"error_rate must be in [0, 1], got {self.error_rate}")
        if self.user_style not in USER_STYLES:
            raise ValueError(f"user_style must be one of {USER_STYLES}")


def _generated_domain(name: str, slot_names: list[str], value_counts: list[int],
                      n_entities: int, seed: int) -> DomainSpec:
    rng = np.random.default_rng(seed)
    slots = tuple(
        SlotSpec(sname, tuple(f"{sname}_{j}" for j in range(count)))
        for sname, count in zip(slot_names, value_counts)
    )
    entities = []
    seen = set()
    while len(entities) < n_entities:
        entity = tuple(int(rng.integers(count)) for count in value_counts)
        if entity in seen:
            continue
        seen.add(entity)
        entities.append(entity)
    return DomainSpec(name=name, slots=slots, database=tuple(entities))


def _build_bundled_domains() -> dict[str, DomainSpec]:
    cafes = _generated_domain(
        "cafes",
        ["food", "area", "price"],
        [5, 4, 3],
        n_entities=30,
        seed=101,
    )
    restaurants = _generated_domain(
        "restaurants",
        ["food", "area", "price", "near", "goodformeal", "allowskids"],
        [7, 5, 3, 4, 4, 2],
        n_entities=150,
        seed=202,
    )
    laptops = _generated_domain(
        "laptops",
        [
            "family", "purpose", "price", "weight", "battery", "drive",
            "display", "graphics", "memory", "processor", "warranty",
        ],
        [5, 6, 3, 3, 3, 4, 4, 4, 4, 4, 2],
        n_entities=120,
        seed=303,
    )
    return {d.name: d for d in (cafes, restaurants, laptops)}


def _build_bundled_profiles() -> dict[str, EnvProfile]:
    profiles = [
        EnvProfile("env1", error_rate=0.0, masks_on=True),
        EnvProfile("env2", error_rate=0.0, masks_on=False),
        EnvProfile("env3", error_rate=0.15, masks_on=True),
        EnvProfile("env4", error_rate=0.15, masks_on=False),
        EnvProfile("env5", error_rate=0.30, masks_on=True),
        EnvProfile("env6", error_rate=0.15, masks_on=True, user_style="unfriendly"),
    ]
    return {p.name: p for p in profiles}


BUNDLED_DOMAINS: dict[str, DomainSpec] = _build_bundled_domains()
BUNDLED_PROFILES: dict[str, EnvProfile] = _build_bundled_profiles()


def load_config(path) -> tuple[dict[str, DomainSpec], dict[str, EnvProfile], dict]:
    """Read domains/profiles (and optional hyperparameter overrides) from JSON.

    Schema::

        {
          "domains": [
            {"name": "...", "max_turns": 25,
             "slots": [{"name": "food", "values": ["a", "b"]}, ...],
             "database": [["a", "b", ...], ...]}          # values by name
          ],
          "profiles": [
            {"name": "...", "error_rate": 0.15, "masks_on": true,
             "user_style": "standard"}
          ],
          "hyperparams": {"gamma": 0.99, ...}
        }

    All keys are optional; bundled domains/profiles are always available and
    entries here add to (or shadow) them.
    """
    raw = json.loads(Path(path).read_text())
    domains: dict[str, DomainSpec] = {}
    for dom in raw.get("domains", []):
        slots = tuple(SlotSpec(s["name"], tuple(s["values"])) for s in dom["slots"])
        index = [{v: i for i, v in enumerate(s.values)} for s in slots]
        database = tuple(
            tuple(index[i][value] for i, value in enumerate(entity))
            for entity in dom["database"]
        )
        spec = DomainSpec(
            name=dom["name"],
            slots=slots,
            database=database,
            max_turns=int(dom.get("max_turns", 25)),
        )
        domains[spec.name] = spec
    profiles: dict[str, EnvProfile] = {}
    for prof in raw.get("profiles", []):
        profile = EnvProfile(
            name=prof["name"],
            error_rate=float(prof["error_rate"]),
            masks_on=bool(prof["masks_on"]),
            user_style=prof.get("user_style", "standard"),
        )
        profiles[profile.name] = profile
    return domains, profiles, dict(raw.get("hyperparams", {}))
