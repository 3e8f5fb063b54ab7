"""Experiment configuration and its flat ``key = value`` file format.

Blank lines and ``#`` comments are ignored. Unknown keys, duplicate keys and
values of the wrong type are errors that name the offending line.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

REQUIRED = ("seed", "rounds", "clients", "dataset", "model", "sampler")

SAMPLERS = ("identity", "crs", "minmax", "gspar", "topk", "poisson")

_CHOICES = {
    "dataset": ("synthetic", "idx"),
    "partition": ("shards", "dirichlet", "iid"),
    "model": ("logreg", "mlp"),
    "sampler": SAMPLERS,
    "crs_scaling": ("conditional", "fixed", "unconditional"),
    "update_mode": ("delta", "plain"),
}

# key -> help text; defaults come from the dataclass
HELP = {
    "seed": "experiment seed; every random stream derives from it (required)",
    "rounds": "number of training rounds R (required)",
    "clients": "number of clients m, all participate every round (required)",
    "dataset": "synthetic | idx (required)",
    "model": "logreg | mlp (required)",
    "sampler": "identity | crs | minmax | gspar | topk | poisson (required)",
    "n_samples": "synthetic: total samples before the test split",
    "n_features": "synthetic: feature count f",
    "n_classes": "synthetic: class count C",
    "class_sep": "synthetic: scale of the class means",
    "idx_images": "idx: path of the IDX image file",
    "idx_labels": "idx: path of the IDX label file",
    "test_fraction": "share of samples held out for evaluation",
    "partition": "shards | dirichlet | iid",
    "shards_per_client": "shards: label-sorted shards per client",
    "dirichlet_beta": "dirichlet: concentration beta",
    "min_samples": "minimum samples per client",
    "hidden": "mlp: hidden width",
    "K": "sampling size (absolute); overrides sampling_ratio",
    "sampling_ratio": "sampling size as a fraction of the model size, K = ceil(ratio * d)",
    "p": "CRS sampling probability bound / Poisson keep probability (CRS default: 1 - e^-epsilon)",
    "epsilon": "CRS privacy budget (required for sampler = crs)",
    "feedback": "topk: accumulate the untransmitted remainder locally",
    "crs_scaling": "conditional (divide by Pr[kept | threshold]) | fixed (divide by p) | unconditional (divide by the marginal Pr[kept])",
    "laplace_scale": "add Laplace noise of this scale to every client update (0 = off)",
    "lr": "learning rate eta",
    "lr_decay": "inverse-time decay: eta_r = lr / (1 + lr_decay * r)",
    "local_batch": "minibatch size used when local_steps > 0",
    "local_steps": "minibatches per round; 0 = full local shard",
    "update_mode": "delta (clients send gradient differences) | plain (clients send gradients)",
    "eval_every": "evaluate every this many rounds (and after the last)",
    "output": "CSV path used by `run` when --out is not given",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    rounds: int
    clients: int
    dataset: str
    model: str
    sampler: str
    n_samples: int = 4000
    n_features: int = 16
    n_classes: int = 4
    class_sep: float = 1.0
    idx_images: str | None = None
    idx_labels: str | None = None
    test_fraction: float = 0.2
    partition: str = "shards"
    shards_per_client: int = 2
    dirichlet_beta: float = 0.5
    min_samples: int = 2
    hidden: int = 32
    K: int | None = None
    sampling_ratio: float | None = None
    p: float | None = None
    epsilon: float | None = None
    feedback: bool = True
    crs_scaling: str = "conditional"
    laplace_scale: float = 0.0
    lr: float = 0.01
    lr_decay: float = 1e-4
    local_batch: int = 32
    local_steps: int = 0
    update_mode: str = "delta"
    eval_every: int = 10
    output: str | None = None

    def __post_init__(self):
        for key, allowed in _CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {', '.join(allowed)}; got {getattr(self, key)!r}")
        for key in ("rounds", "min_samples"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative")
        for key in ("clients", "n_samples", "n_features", "n_classes", "shards_per_client",
                    "hidden", "local_batch", "eval_every"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if self.local_steps < 0:
            raise ConfigError("local_steps must be non-negative")
        for key in ("lr", "dirichlet_beta"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive")
        for key in ("lr_decay", "laplace_scale", "class_sep"):
            if not getattr(self, key) >= 0:
                raise ConfigError(f"{key} must be non-negative")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in [0, 1)")
        if self.K is not None and self.K <= 0:
            raise ConfigError("K must be positive")
        if self.sampling_ratio is not None and not 0 < self.sampling_ratio <= 1:
            raise ConfigError("sampling_ratio must lie in (0, 1]")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.p is not None and not 0 < self.p <= 1:
            raise ConfigError("p must lie in (0, 1]")
        if self.sampler == "crs" and self.epsilon is None:
            raise ConfigError("missing key 'epsilon' (required for sampler = crs)")
        if self.sampler in ("crs", "minmax", "gspar", "topk") and self.K is None and self.sampling_ratio is None:
            raise ConfigError(f"missing key 'K' or 'sampling_ratio' (required for sampler = {self.sampler})")
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            raise ConfigError("missing key 'idx_images'/'idx_labels' (required for dataset = idx)")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            lines.append(f"{f.name} = {format_value(v)}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _kind(name):
    t = str(_FIELDS[name].type)
    for k in ("bool", "int", "float"):
        if t.startswith(k):
            return k
    return "str"


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(name, text):
    kind = _kind(name)
    if kind == "bool":
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind == "int":
        try:
            return int(text)
        except ValueError:
            f = float(text)
            if not f.is_integer():
                raise ValueError(f"expected an integer, got {text!r}") from None
            return int(f)
    if kind == "float":
        v = float(text)
        if not math.isfinite(v):
            raise ValueError(f"expected a finite number, got {text!r}")
        return v
    return text


def parse_text(text, source="<config>") -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = parse_value(key, val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    for key in REQUIRED:
        if key not in values:
            raise ConfigError(f"{source}: missing required key {key!r}")
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_text(text, str(path))


def help_text() -> str:
    defaults = {f.name: f.default for f in fields(ExperimentConfig)}
    out = []
    for key, desc in HELP.items():
        d = defaults[key]
        shown = "required" if d is dataclasses.MISSING else ("unset" if d is None else format_value(d))
        out.append(f"  {key:<18} {desc} [{shown}]")
    return "\n".join(out)
