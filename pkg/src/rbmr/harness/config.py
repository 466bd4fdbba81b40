"""Experiment configuration: a nested YAML document merged over defaults."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from ..dynamics import SCHEMES, ContractError, grid_index
from ..model import ModelSpec, build_model

THREADS_ENV = "RBMR_THREADS"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    name: str = "quadratic-saturating"
    params: dict = field(default_factory=lambda: {"lam": 1.0, "a": 0.4})


@dataclass
class LemmaConfig:
    samples: int = 100_000
    grid: list = field(default_factory=lambda: [[4, 2], [8, 2], [8, 4], [16, 2]])
    kappa: float = 0.1
    t: float = 1.0
    count_interval: int = 9
    gap_samples: int = 10_000
    moment_horizon: float = 20.0
    moment_kappa: float = 0.05
    moment_replicas: int = 200
    moment_sigma: float = 0.5
    holder_sigmas: list = field(default_factory=lambda: [0.5, 0.0])
    holder_kappa: float = 0.01
    holder_horizon: float = 1.0
    holder_base_step: float = 0.1
    holder_max_lag: int = 5
    holder_replicas: int = 400


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    n: int = 16
    p: int = 2
    d: int = 1
    sigma: float = 0.0
    horizon: float = 1.0
    kappas: list = field(default_factory=lambda: [0.1, 0.05, 0.025, 0.0125, 0.00625])
    substeps: int = 4
    replicas: int = 1000
    seed: int = 0
    eval_times: list | None = None
    eval_step: float = 0.1
    schemes: list = field(default_factory=lambda: ["ips", "rbm1", "rbmr"])
    init_scale: float = 1.0
    output: str = "out"
    crn: bool = False
    threads: int | None = None
    chunk: int = 500
    w2_directions: int = 256
    lemmas: LemmaConfig = field(default_factory=LemmaConfig)

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------------
    def validate(self) -> None:
        def bad(name, msg):
            raise ConfigError(f"{name}: {msg}")

        if self.n < 2:
            bad("n", "need at least two particles")
        if not 2 <= self.p <= self.n:
            bad("p", f"must satisfy 2 <= p <= n, got {self.p}")
        if "rbm1" in self.schemes and self.n % self.p:
            bad("p", "must divide n when rbm1 is among the schemes")
        if self.d < 1:
            bad("d", "must be >= 1")
        if self.sigma < 0:
            bad("sigma", "must be >= 0")
        if not self.horizon > 0:
            bad("horizon", "must be positive")
        if not self.kappas:
            bad("kappas", "empty")
        if any(k <= 0 for k in self.kappas):
            bad("kappas", "must be positive")
        if any(a <= b for a, b in zip(self.kappas, self.kappas[1:])):
            bad("kappas", "must be strictly decreasing")
        for k in self.kappas:
            try:
                grid_index(self.horizon, k)
                for t in self.times():
                    grid_index(t, k)
            except ContractError as exc:
                bad("kappas", str(exc))
        if self.substeps < 1:
            bad("substeps", "must be >= 1")
        if self.replicas < 2:
            bad("replicas", "need at least two replicas")
        if self.seed < 0:
            bad("seed", "must be nonnegative")
        unknown = set(self.schemes) - set(SCHEMES)
        if unknown or not self.schemes:
            bad("schemes", f"choose from {SCHEMES}")
        if self.chunk < 1:
            bad("chunk", "must be >= 1")
        if any(t < 0 or t > self.horizon + 1e-12 for t in self.times()):
            bad("eval_times", "must lie in [0, horizon]")

    def times(self) -> list[float]:
        if self.eval_times is not None:
            return [float(t) for t in self.eval_times]
        m = grid_index(self.horizon, self.eval_step) if self.eval_step else 0
        return [round(j * self.eval_step, 12) for j in range(1, m + 1)]

    def build_model(self) -> ModelSpec:
        params = dict(self.model.params)
        params["sigma"] = self.sigma
        params["dim"] = self.d
        return build_model(self.model.name, **params)

    def worker_count(self) -> int:
        if self.threads:
            return int(self.threads)
        return int(os.environ.get(THREADS_ENV, "1"))

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("threads", None)
        d.pop("output", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _merge(dc_type, data: dict | None, where: str):
    data = dict(data or {})
    names = {f.name: f for f in fields(dc_type)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key == "model" and dc_type is ExperimentConfig:
            value = _merge(ModelConfig, value, "model")
        elif key == "lemmas" and dc_type is ExperimentConfig:
            value = _merge(LemmaConfig, value, "lemmas")
        kwargs[key] = value
    return dc_type(**kwargs)


def config_from_dict(data: dict | None, **overrides: Any) -> ExperimentConfig:
    merged = copy.deepcopy(data or {})
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return _merge(ExperimentConfig, merged, "config")


def load_config(path: str | Path | None = None, **overrides: Any) -> ExperimentConfig:
    data = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data, **overrides)
