"""Flat ``key = value`` run configuration with strict validation.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Lists are comma separated. ``budget_grid`` also accepts ``linspace(a, b, n)``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from .attacks import TriggerSpec, parse_norm
from .barrier import BarrierLossWeights, BarrierTrainConfig
from .certifier import CertRequest
from .nn import OptimizerConfig
from .trajectories import TEST_TIME, TRAIN_TIME, DatasetSpec, ExperimentConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key = key
        self.line = line


REQUIRED = object()


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


_LINSPACE = re.compile(r"^linspace\(\s*([^,]+),\s*([^,]+),\s*(\d+)\s*\)$")


def _grid(s: str) -> tuple[float, ...]:
    m = _LINSPACE.match(s.strip())
    if m:
        a, b, n = float(m.group(1)), float(m.group(2)), int(m.group(3))
        return tuple(float(v) for v in np.round(np.linspace(a, b, n), 12))
    return _floats(s)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return s
    return parse


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def wrapped(s: str):
        return None if s.lower() in ("none", "") else parse(s)
    return wrapped


SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    # experiment
    "mode": (_choice(TRAIN_TIME, TEST_TIME), REQUIRED),
    "master_seed": (int, REQUIRED),
    "alpha": (float, REQUIRED),
    "budget_grid": (_grid, REQUIRED),
    "p": (parse_norm, "linf"),
    "rho": (float, 1.0),
    "attack": (_choice("pgd", "bda"), "pgd"),
    "horizon": (int, 200),
    "clean_runs": (int, 5),
    "g_c": (_optional(float), None),
    "paired": (_bool, False),
    "pgd_steps": (int, 40),
    "pgd_step_size": (_optional(float), None),
    "clip_min": (_optional(float), None),
    "clip_max": (_optional(float), None),
    "trigger_coords": (_optional(_ints), None),
    "trigger_target": (_optional(int), None),
    # dataset
    "dataset": (_choice("blobs", "moons", "idx"), REQUIRED),
    "n_train_samples": (int, 400),
    "n_test_samples": (int, 200),
    "features": (int, 2),
    "classes": (int, 2),
    "separation": (float, 3.0),
    "noise": (float, 0.1),
    "idx_train_images": (_optional(str), None),
    "idx_train_labels": (_optional(str), None),
    "idx_test_images": (_optional(str), None),
    "idx_test_labels": (_optional(str), None),
    # classifier and optimizer
    "hidden": (_ints, (16, 16)),
    "optimizer": (_choice("gd", "sgd", "adam"), "sgd"),
    "learning_rate": (float, 0.1),
    "batch_size": (int, 32),
    # barrier
    "barrier_hidden": (_ints, (64, 64)),
    "barrier_learning_rate": (float, 1e-3),
    "barrier_max_iters": (int, 5000),
    "barrier_margin": (float, 0.5),
    "barrier_tau_loss": (float, 1e-6),
    "barrier_standardize": (_bool, True),
    "z_refresh_every": (int, 1),
    "c_initial": (_optional(float), None),
    "c_unsafe": (_optional(float), None),
    "c_invariance": (_optional(float), None),
    # certification
    "beta": (float, REQUIRED),
    "n_train": (int, REQUIRED),
    "n_hat": (_optional(int), None),
    "epsilon": (_optional(float), None),
    "attempts": (int, 5),
    "radius_step": (_optional(float), None),
    "extra_initial": (int, 3000),
    "holdout": (int, 0),
    "strict_scenarios": (_bool, False),
    "search": (_choice("linear", "bisect"), "linear"),
    "max_alpha_steps": (int, 20),
    "sweep_alphas": (_optional(_floats), None),
    # paths
    "out_dir": (_optional(str), None),
}


def parse_text(text: str) -> dict[str, Any]:
    raw: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, value = (part.strip() for part in body.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError("unknown key", key, lineno)
        if key in raw:
            raise ConfigError(f"duplicate key (first set on line {raw[key][1]})", key, lineno)
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
            value = value[1:-1]
        raw[key] = (value, lineno)
    missing = [k for k, (_, default) in SCHEMA.items() if default is REQUIRED and k not in raw]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}", missing[0])
    values: dict[str, Any] = {}
    for key, (parse, default) in SCHEMA.items():
        if key not in raw:
            values[key] = default
            continue
        text_value, lineno = raw[key]
        try:
            values[key] = parse(text_value)
        except ValueError as err:
            raise ConfigError(str(err), key, lineno) from None
    if (values["n_hat"] is None) == (values["epsilon"] is None):
        raise ConfigError("give exactly one of n_hat and epsilon", "n_hat")
    return values


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any]
    source: Optional[str] = None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise FileNotFoundError(f"cannot read config {path}: {err.strerror}") from None
        return cls(parse_text(text), str(path))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls(parse_text(text))

    def __getitem__(self, key: str):
        return self.values[key]

    def experiment(self, mode: Optional[str] = None) -> ExperimentConfig:
        v = self.values
        clip = None
        if (v["clip_min"] is None) != (v["clip_max"] is None):
            raise ConfigError("set both clip_min and clip_max or neither", "clip_min")
        if v["clip_min"] is not None:
            clip = (v["clip_min"], v["clip_max"])
        trigger = None
        if v["trigger_coords"] is not None:
            trigger = TriggerSpec(v["trigger_coords"], target_label=v["trigger_target"])
        try:
            return self._experiment(v, mode, clip, trigger)
        except ConfigError:
            raise
        except ValueError as err:
            raise ConfigError(str(err)) from None

    @staticmethod
    def _experiment(v, mode, clip, trigger) -> ExperimentConfig:
        dataset = DatasetSpec(v["dataset"], v["n_train_samples"], v["n_test_samples"],
                              v["features"], v["classes"], v["separation"], v["noise"],
                              v["idx_train_images"], v["idx_train_labels"],
                              v["idx_test_images"], v["idx_test_labels"])
        optimizer = OptimizerConfig(v["optimizer"], v["learning_rate"], v["batch_size"])
        return ExperimentConfig(
            dataset=dataset, hidden=v["hidden"], optimizer=optimizer, horizon=v["horizon"],
            mode=mode or v["mode"], budget_grid=v["budget_grid"], p=v["p"], rho=v["rho"],
            attack=v["attack"], alpha=v["alpha"], clean_runs=v["clean_runs"],
            master_seed=v["master_seed"], pgd_steps=v["pgd_steps"],
            pgd_step_size=v["pgd_step_size"], trigger=trigger, clip=clip, paired=v["paired"],
            g_c_override=v["g_c"])

    def request(self, mode: Optional[str] = None,
                strict_scenarios: Optional[bool] = None) -> CertRequest:
        v = self.values
        try:
            barrier = BarrierTrainConfig(
                hidden=v["barrier_hidden"], learning_rate=v["barrier_learning_rate"],
                max_iters=v["barrier_max_iters"], tau_loss=v["barrier_tau_loss"],
                margin=v["barrier_margin"], z_refresh_every=v["z_refresh_every"],
                standardize=v["barrier_standardize"],
                weights=BarrierLossWeights(v["c_initial"], v["c_unsafe"], v["c_invariance"]))
            return CertRequest(
                experiment=self.experiment(mode), barrier=barrier, attempts=v["attempts"],
                beta=v["beta"], n_hat=v["n_hat"], epsilon=v["epsilon"],
                radius_step=v["radius_step"], n_train=v["n_train"],
                extra_initial=v["extra_initial"], holdout=v["holdout"],
                strict_scenarios=(v["strict_scenarios"] if strict_scenarios is None
                                  else strict_scenarios),
                search=v["search"], max_alpha_steps=v["max_alpha_steps"])
        except ConfigError:
            raise
        except ValueError as err:
            raise ConfigError(str(err)) from None


__all__ = ["ConfigError", "RunConfig", "SCHEMA", "parse_text"]
