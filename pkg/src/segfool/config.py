"""Run configuration: one JSON document with data/victim/attack/eval/paths sections and a seed."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import fields
from typing import Any, Dict, List, Optional

from .attack import AttackConfig
from .datagen import Sample, SceneSpec, generate_dataset
from .errors import ContractError

SEED_ENV = "SEGFOOL_SEED"
TEST_INDEX_OFFSET = 1_000_000  # held-out samples draw from a disjoint index range

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "data": {"n_train": 100, "n_test": 200},  # remaining keys fill SceneSpec
    "victim": {"epochs": 30, "lr": 5e-3, "prompts_per_step": 16, "optimizer": "adam", "jitter": 0.0},
    "attack": {},  # AttackConfig fields except seed
    "eval": {"n_points": 3, "grid": 8, "workers": 1},
    "paths": {"data": "data", "victim": "victim.msam", "uap": "uap.duap", "reports": "reports"},
}

_SCENE_KEYS = {f.name for f in fields(SceneSpec)} - {"seed"}
_ATTACK_KEYS = {f.name for f in fields(AttackConfig)} - {"seed"}
_ALLOWED = {
    "data": {"n_train", "n_test"} | _SCENE_KEYS,
    "victim": {"epochs", "lr", "prompts_per_step", "optimizer", "jitter"},
    "attack": _ATTACK_KEYS,
    "eval": {"n_points", "grid", "workers"},
    "paths": {"data", "victim", "uap", "reports"},
}


class RunConfig:
    def __init__(self, raw: Optional[dict] = None):
        raw = {} if raw is None else raw
        if not isinstance(raw, dict):
            raise ContractError("run config must be a JSON object")
        unknown = set(raw) - set(DEFAULTS)
        if unknown:
            raise ContractError(f"unknown config sections: {sorted(unknown)}")
        merged = copy.deepcopy(DEFAULTS)
        for section, allowed in _ALLOWED.items():
            given = raw.get(section, {})
            if not isinstance(given, dict):
                raise ContractError(f"config section {section!r} must be an object")
            bad = set(given) - allowed
            if bad:
                raise ContractError(f"unknown keys in {section!r}: {sorted(bad)}")
            merged[section].update(given)
        seed = raw.get("seed", DEFAULTS["seed"])
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ContractError(f"seed must be a non-negative integer, got {seed!r}")
        merged["seed"] = seed
        env = os.environ.get(SEED_ENV)
        if env is not None and env != "":
            try:
                merged["seed"] = int(env)
            except ValueError as exc:
                raise ContractError(f"{SEED_ENV}={env!r} is not an integer") from exc
            if merged["seed"] < 0:
                raise ContractError(f"{SEED_ENV} must be non-negative")
        self.values = merged
        for n in ("n_train", "n_test"):
            if int(merged["data"][n]) < 1:
                raise ContractError(f"data.{n} must be >= 1")
        # fail early on bad scene or attack settings
        self.scene_spec()
        self.attack_config()

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def section(self, name: str) -> dict:
        return self.values[name]

    def scene_spec(self) -> SceneSpec:
        kw = {k: v for k, v in self.values["data"].items() if k in _SCENE_KEYS}
        try:
            return SceneSpec(seed=self.seed, **kw)
        except TypeError as exc:
            raise ContractError(str(exc)) from exc

    def attack_config(self, **overrides) -> AttackConfig:
        kw = dict(self.values["attack"])
        kw.update(overrides)
        return AttackConfig.from_dict({**kw, "seed": self.seed})

    def to_dict(self) -> dict:
        return copy.deepcopy(self.values)


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig({})
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ContractError(f"{path}: not valid JSON: {exc}") from exc
    return RunConfig(raw)


def train_split(cfg: RunConfig) -> List[Sample]:
    return generate_dataset(cfg.scene_spec(), int(cfg.values["data"]["n_train"]))


def test_split(cfg: RunConfig) -> List[Sample]:
    return generate_dataset(cfg.scene_spec(), int(cfg.values["data"]["n_test"]), start=TEST_INDEX_OFFSET)
