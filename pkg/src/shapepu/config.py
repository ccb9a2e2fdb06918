"""Run configuration: one flat key=value file covering data, model and training.

Keys are the :class:`RunConfig` field names plus ``phantom.<field>`` for the
generator. ``#`` starts a comment, blank lines are ignored and unknown keys
are an error. Tuples are written comma-separated.
"""

from __future__ import annotations

import contextlib
import hashlib
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from .phantom import PhantomSpec
from .train import ABLATIONS, TrainConfig


class ConfigError(ValueError):
    pass


# keys that only say where things go; they never change results and stay out of the hash
PATH_KEYS = ("data_root", "run_dir")


@dataclass(frozen=True)
class RunConfig:
    data_root: str = "data"
    run_dir: str = "runs/full"
    n_train: int = 40
    n_val: int = 10
    n_test: int = 15
    ablation: str = "full"
    epochs: int = TrainConfig.epochs
    warmup_epochs: int = TrainConfig.warmup_epochs
    batch_size: int = TrainConfig.batch_size
    lr: float = TrainConfig.lr
    beta1: float = TrainConfig.beta1
    beta2: float = TrainConfig.beta2
    adam_eps: float = TrainConfig.adam_eps
    lambda1: float = TrainConfig.lambda1
    lambda2: float = TrainConfig.lambda2
    square_size: int = TrainConfig.square_size
    reduction: str = TrainConfig.reduction
    marginal_background: bool = TrainConfig.marginal_background
    consistency_unmasked: bool = TrainConfig.consistency_unmasked
    stop_gradient: bool = TrainConfig.stop_gradient
    em_tol: float = TrainConfig.em_tol
    em_max_iters: int = TrainConfig.em_max_iters
    seed: int = 0
    phantom: PhantomSpec = field(default_factory=PhantomSpec)

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {sorted(ABLATIONS)}")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("every split needs at least one image")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(TrainConfig) if hasattr(self, f.name)}
        for k in ("use_cutout", "use_negative", "use_consistency"):
            kw.pop(k, None)
        return TrainConfig.for_ablation(self.ablation, **kw)

    def phantom_spec(self) -> PhantomSpec:
        # the generator shares the global seed so --seed moves data and training together
        return replace(self.phantom, seed=self.seed)

    def to_lines(self, include_paths: bool = True) -> list:
        lines = []
        for f in fields(self):
            if f.name == "phantom":
                continue
            if f.name in PATH_KEYS and not include_paths:
                continue
            lines.append(f"{f.name}={_format(getattr(self, f.name))}")
        for f in fields(PhantomSpec):
            if f.name == "seed":
                continue
            lines.append(f"phantom.{f.name}={_format(getattr(self.phantom, f.name))}")
        return lines

    def to_text(self) -> str:
        return "\n".join([f"# config_hash={self.hash()}"] + self.to_lines()) + "\n"

    def hash(self) -> str:
        blob = "\n".join(self.to_lines(include_paths=False)).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, values: dict) -> "RunConfig":
        return from_mapping(values, base=self)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def from_mapping(values: dict, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    top = {f.name: getattr(base, f.name) for f in fields(RunConfig) if f.name != "phantom"}
    ph = {f.name: getattr(base.phantom, f.name) for f in fields(PhantomSpec)}
    run_kw, ph_kw = {}, {}
    for key, raw in values.items():
        if key.startswith("phantom."):
            name = key[len("phantom."):]
            if name not in ph or name == "seed":
                raise ConfigError(f"unknown key {key!r}")
            ph_kw[name] = _parse(raw, ph[name], key) if isinstance(raw, str) else raw
        elif key in top:
            run_kw[key] = _parse(raw, top[key], key) if isinstance(raw, str) else raw
        else:
            raise ConfigError(f"unknown key {key!r}")
    try:
        phantom = replace(base.phantom, **ph_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return replace(base, phantom=phantom, **run_kw)


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key in values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        values[key] = val.strip()
    return values


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return from_mapping(parse_text(path.read_text(), str(path)))


def thread_limit() -> contextlib.AbstractContextManager:
    """Cap BLAS threads at ``SHAPEPU_THREADS`` when set; otherwise leave them alone."""
    raw = os.environ.get("SHAPEPU_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SHAPEPU_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"SHAPEPU_THREADS must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)
