"""Line-oriented run configuration: ``key = value`` with ``#`` comments."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .adapt import ZolParams
from .envs import TASK_NAMES
from .errors import ConfigError
from .fbmodel import FBTrainConfig


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> tuple:
    items = [t for t in text.replace(",", " ").split() if t]
    if not items:
        raise ValueError("expected at least one integer")
    return tuple(int(t) for t in items)


def _float_list(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(",", " ").split() if t)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    lo: float | None = None
    hi: float | None = None
    lo_open: bool = False
    hi_open: bool = False
    choices: tuple = ()

    def check(self, value) -> None:
        if self.choices and value not in self.choices:
            raise ValueError(f"must be one of {', '.join(self.choices)}")
        values = value if isinstance(value, tuple) else (value,)
        for v in values:
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                if isinstance(v, float) and not math.isfinite(v):
                    raise ValueError("must be finite")
                if self.lo is not None and (v < self.lo or (self.lo_open and v == self.lo)):
                    raise ValueError(f"must be {'>' if self.lo_open else '>='} {self.lo}")
                if self.hi is not None and (v > self.hi or (self.hi_open and v == self.hi)):
                    raise ValueError(f"must be {'<' if self.hi_open else '<='} {self.hi}")


_fb = FBTrainConfig()
_zol = ZolParams()

KEYS: dict[str, Key] = {
    # data collection
    "env": Key(str, "donut", choices=("donut", "gridworld")),
    "sigma": Key(float, 0.6, lo=0.0, lo_open=True),
    "n_records": Key(int, 100_000, lo=0),
    "grid_width": Key(int, 3, lo=1, hi=64),
    "grid_height": Key(int, 3, lo=1, hi=64),
    "wall_density": Key(float, 0.0, lo=0.0, hi=1.0, hi_open=True),
    # FB pretraining
    "d": Key(int, _fb.d, lo=2),
    "gamma": Key(float, _fb.gamma, lo=0.0, hi=1.0, hi_open=True),
    "train_steps": Key(int, _fb.train_steps, lo=0),
    "fb_lr": Key(float, _fb.lr, lo=0.0, lo_open=True),
    "fb_batch_size": Key(int, _fb.batch_size, lo=1),
    "polyak_tau": Key(float, _fb.polyak_tau, lo=0.0, hi=1.0),
    "ortho_coef": Key(float, _fb.ortho_coef, lo=0.0),
    "latent_mix": Key(float, _fb.latent_mix, lo=0.0, hi=1.0),
    "f_hidden": Key(_int_list, _fb.f_hidden, lo=1),
    "b_hidden": Key(_int_list, _fb.b_hidden, lo=1),
    "hidden_activation": Key(str, _fb.hidden_activation, choices=("relu", "tanh")),
    "b_output": Key(str, _fb.b_output, choices=("identity", "l2-normalize")),
    "b_uses_action": Key(_bool, False),
    "full_batch": Key(_bool, False),
    # adaptation
    "task": Key(str, "cross"),
    "task_params": Key(_float_list, ()),
    "eta": Key(float, _zol.lr, lo=0.0, lo_open=True),
    "steps": Key(int, _zol.steps, lo=0),
    "lambda_chi": Key(float, _zol.lambda_chi, lo=0.0),
    "lambda_trust": Key(float, _zol.lambda_trust, lo=0.0),
    "weight_clip": Key(float, _zol.weight_clip, lo=0.0, lo_open=True),
    "reset_samples": Key(int, _zol.reset_samples, lo=1),
    "batch_size": Key(int, _zol.batch_size, lo=1),
    "norm_eps": Key(float, _zol.norm_eps, lo=0.0, lo_open=True),
    "grad_clip": Key(float, _zol.grad_clip, lo=0.0, lo_open=True),
    "n_labeled": Key(int, _zol.n_labeled, lo=1),
    "center": Key(str, _zol.center, choices=("batch", "global")),
    "seeds": Key(_int_list, (0, 1, 2, 3, 4), lo=0),
    "resolution": Key(int, 64, lo=8),
    # verification
    "verify_instances": Key(int, 50, lo=1),
    "verify_max_states": Key(int, 20, lo=2),
    "verify_max_actions": Key(int, 4, lo=2),
    # shared
    "seed": Key(int, 0, lo=0),
    "dataset": Key(str, ""),
    "checkpoint": Key(str, ""),
}


class RunConfig:
    """Parsed configuration; every key in :data:`KEYS` is readable as an attribute."""

    def __init__(self, values: dict | None = None, source: str = "<defaults>"):
        self.source = source
        self._values = {k: entry.default for k, entry in KEYS.items()}
        for key, value in (values or {}).items():
            if key not in KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                KEYS[key].check(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
            self._values[key] = value

    def __getattr__(self, name):
        try:
            return self.__dict__["_values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def as_dict(self) -> dict:
        return dict(self._values)

    def replace(self, **changes) -> "RunConfig":
        return RunConfig({**self._values, **changes}, self.source)

    @classmethod
    def parse(cls, text: str, source: str = "<string>") -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, _, text_value = (part.strip() for part in line.partition("="))
            if key not in KEYS:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            entry = KEYS[key]
            try:
                value = entry.parse(text_value)
                entry.check(value)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
            values[key] = value
        return cls(values, source)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.parse(text, str(path))

    def dumps(self) -> str:
        """Canonical text form; ``parse(dumps())`` reproduces the config."""
        out = []
        for key in KEYS:
            v = self._values[key]
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{key} = {v}")
        return "\n".join(out) + "\n"

    def fb_config(self) -> FBTrainConfig:
        return FBTrainConfig(
            batch_size=self.fb_batch_size, train_steps=self.train_steps, lr=self.fb_lr,
            polyak_tau=self.polyak_tau, ortho_coef=self.ortho_coef, latent_mix=self.latent_mix,
            seed=self.seed, d=self.d, gamma=self.gamma, f_hidden=tuple(self.f_hidden),
            b_hidden=tuple(self.b_hidden), hidden_activation=self.hidden_activation,
            b_output=self.b_output, b_uses_action=self.b_uses_action, full_batch=self.full_batch)

    def zol_params(self) -> ZolParams:
        return ZolParams(
            lr=self.eta, steps=self.steps, lambda_chi=self.lambda_chi,
            lambda_trust=self.lambda_trust, weight_clip=self.weight_clip,
            reset_samples=self.reset_samples, batch_size=self.batch_size, norm_eps=self.norm_eps,
            grad_clip=self.grad_clip, seed=self.seed, n_labeled=self.n_labeled,
            center=self.center)

    def check_task(self) -> None:
        if self.task not in TASK_NAMES:
            raise ConfigError(f"unknown task {self.task!r}; valid tasks: {', '.join(TASK_NAMES)}")
