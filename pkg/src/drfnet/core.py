"""Shared containers, deterministic randomness and run configuration."""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import tomli
import tomli_w

DTYPES = {"f32": np.float32, "f64": np.float64}
CDTYPES = {"f32": np.complex64, "f64": np.complex128}


class DRFError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(DRFError):
    pass


class MissingFile(ConfigError, FileNotFoundError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"file not found: {self.path}")


class ParseError(ConfigError):
    def __init__(self, line: int | None, message: str):
        self.line = line
        super().__init__(f"parse error at line {line}: {message}")


class InvalidValue(ConfigError):
    def __init__(self, field: str, reason: str):
        self.field = field
        self.reason = reason
        super().__init__(f"invalid value for {field!r}: {reason}")


class ShapeError(DRFError, ValueError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _check_finite(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf")


# --------------------------------------------------------------------------
# sequence containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    delta: float
    length: int

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        if int(self.length) != self.length or self.length < 1:
            raise ValueError("length must be a positive integer")
        object.__setattr__(self, "length", int(self.length))


@dataclass(frozen=True, eq=False)
class RealSequence:
    """Real values laid out as (batch, channels, time)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 1:
            v = v[None, None, :]
        if v.ndim != 3 or min(v.shape) < 1:
            raise ShapeError(f"expected (batch, channels, time), got {v.shape}")
        if not np.issubdtype(v.dtype, np.floating):
            v = v.astype(np.float64)
        _check_finite("RealSequence", v)
        object.__setattr__(self, "values", _readonly(v))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def length(self) -> int:
        return self.values.shape[-1]


@dataclass(frozen=True, eq=False)
class ComplexStateSequence:
    """Branch states as split planes, each shaped (batch, neurons, branches, time)."""

    real: np.ndarray
    imag: np.ndarray

    def __post_init__(self):
        re_, im_ = np.asarray(self.real), np.asarray(self.imag)
        if re_.shape != im_.shape:
            raise ShapeError("real and imaginary planes differ in shape")
        if re_.ndim != 4:
            raise ShapeError(f"expected (batch, neurons, branches, time), got {re_.shape}")
        _check_finite("ComplexStateSequence.real", re_)
        _check_finite("ComplexStateSequence.imag", im_)
        object.__setattr__(self, "real", _readonly(re_))
        object.__setattr__(self, "imag", _readonly(im_))

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "ComplexStateSequence":
        return cls(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))

    def to_complex(self) -> np.ndarray:
        return self.real + 1j * self.imag

    @property
    def shape(self):
        return self.real.shape


# --------------------------------------------------------------------------
# randomness
# --------------------------------------------------------------------------

# SplitMix64 (Steele, Lea & Flood 2014). Output k of a generator seeded with s
# is mix(s + (k + 1) * GOLDEN), which makes the stream counter-addressable and
# lets numpy evaluate whole blocks at once.
GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


class SplitMixRNG:
    """Counter-based SplitMix64 stream.

    The whole state is ``(seed, counter)``; two generators with the same state
    produce the same draws on any platform.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter) & _MASK64

    @property
    def state(self) -> tuple[int, int]:
        return self.seed, self.counter

    def random_u64(self, size: int) -> np.ndarray:
        size = int(size)
        k = np.arange(1, size + 1, dtype=np.uint64) + np.uint64(self.counter)
        with np.errstate(over="ignore"):
            out = _mix64(np.uint64(self.seed) + k * GOLDEN)
        self.counter = (self.counter + size) & _MASK64
        return out

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        shape = () if size is None else np.atleast_1d(size)
        n = int(np.prod(shape)) if size is not None else 1
        u = (self.random_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(tuple(shape))

    def normal(self, size, loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        shape = tuple(np.atleast_1d(size))
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        # Box-Muller; 1 - u keeps the log argument in (0, 1]
        r = np.sqrt(-2.0 * np.log1p(-u[:m]))
        theta = 2.0 * np.pi * u[m:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return loc + scale * z.reshape(shape)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        u = self.uniform(size)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def fork(self, key: int) -> "SplitMixRNG":
        """Child generator whose seed is derived from this one's seed and ``key``."""
        with np.errstate(over="ignore"):
            k = _mix64(np.array([key & _MASK64], dtype=np.uint64) + GOLDEN)
            child = _mix64(np.array([self.seed], dtype=np.uint64) ^ k)
        return SplitMixRNG(int(child[0]))


def make_rng(seed: int) -> SplitMixRNG:
    return SplitMixRNG(seed)


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------


MNIST_LENGTH = 784
MNIST_TASK_IDS = ("smnist", "psmnist")


@dataclass(frozen=True)
class TaskConfig:
    id: str = "multitone"
    length: int = 512
    classes: int = 4
    tones_per_class: int = 3
    noise: float = 0.1
    train_size: int = 2000
    test_size: int = 500
    permutation_seed: int = 20250917
    data_dir: str = "data/mnist"

    @property
    def sequence_length(self) -> int:
        """Steps per sample. MNIST tasks are fixed at one pixel per step."""
        return MNIST_LENGTH if self.id in MNIST_TASK_IDS else self.length


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 50
    epochs: int = 30
    schedule: str = "constant"


@dataclass(frozen=True)
class NeuronConfig:
    v_pre: float = 1.0
    alpha_init: float = 0.5
    sigma: float = 0.5
    h: float = 0.15
    s: float = 6.0
    train_alpha: bool = False
    input_gain: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    precision: str = "f64"
    n: int = 4
    n_a: int = 3
    widths: tuple[int, ...] = (16, 16)
    delta: float = 1.0
    task: TaskConfig = field(default_factory=TaskConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    neuron: NeuronConfig = field(default_factory=NeuronConfig)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        validate_config(self)

    @property
    def dtype(self):
        return DTYPES[self.precision]

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.delta, self.task.sequence_length)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_SECTIONS = {"task": TaskConfig, "optimizer": OptimizerConfig, "neuron": NeuronConfig}
_TASK_IDS = ("multitone", "smnist", "psmnist")


def validate_config(c: RunConfig) -> None:
    def need(cond, name, reason):
        if not cond:
            raise InvalidValue(name, reason)

    need(c.seed >= 0 and c.seed <= _MASK64, "seed", "must be a 64-bit unsigned integer")
    need(c.precision in DTYPES, "precision", "must be 'f32' or 'f64'")
    need(c.n >= 1, "n", "must be ≥ 1")
    need(c.n_a >= 0, "n_a", "must be ≥ 0")
    need(len(c.widths) >= 1, "widths", "needs at least one layer")
    need(all(w >= 1 for w in c.widths), "widths", "all widths must be ≥ 1")
    need(c.delta > 0, "delta", "must be > 0")
    t = c.task
    need(t.id in _TASK_IDS, "task.id", f"must be one of {', '.join(_TASK_IDS)}")
    need(t.length >= 16, "task.length", "must be ≥ 16")
    need(t.classes >= 2, "task.classes", "must be ≥ 2")
    need(t.tones_per_class >= 1, "task.tones_per_class", "must be ≥ 1")
    need(t.noise >= 0, "task.noise", "must be ≥ 0")
    need(t.train_size >= 1, "task.train_size", "must be ≥ 1")
    need(t.test_size >= 1, "task.test_size", "must be ≥ 1")
    o = c.optimizer
    need(o.lr >= 0, "optimizer.lr", "must be ≥ 0")
    need(0 <= o.beta1 < 1, "optimizer.beta1", "must lie in [0, 1)")
    need(0 <= o.beta2 < 1, "optimizer.beta2", "must lie in [0, 1)")
    need(o.eps > 0, "optimizer.eps", "must be > 0")
    need(o.clip_norm >= 0, "optimizer.clip_norm", "must be ≥ 0 (0 disables clipping)")
    need(o.batch_size >= 1, "optimizer.batch_size", "must be ≥ 1")
    need(o.epochs >= 0, "optimizer.epochs", "must be ≥ 0")
    need(o.schedule in ("constant", "cosine"), "optimizer.schedule", "must be 'constant' or 'cosine'")
    nr = c.neuron
    need(nr.v_pre > 0, "neuron.v_pre", "must be > 0")
    need(0 < nr.alpha_init < 1, "neuron.alpha_init", "must lie in (0, 1)")
    need(nr.sigma > 0, "neuron.sigma", "must be > 0")
    need(0 <= nr.h < 1, "neuron.h", "must lie in [0, 1)")
    need(nr.s > 1, "neuron.s", "must be > 1")
    need(nr.input_gain > 0, "neuron.input_gain", "must be > 0")


def _coerce(name: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidValue(name, "expected true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidValue(name, "expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidValue(name, "expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise InvalidValue(name, "expected a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise InvalidValue(name, "expected a list of integers")
        return tuple(value)
    raise InvalidValue(name, "unsupported type")


def _build(cls, data: dict, prefix: str = ""):
    defaults = cls()
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        dotted = prefix + key
        if key not in names:
            raise InvalidValue(dotted, "unknown key")
        default = getattr(defaults, key)
        if key in _SECTIONS and cls is RunConfig:
            if not isinstance(value, dict):
                raise InvalidValue(dotted, "expected a section")
            kwargs[key] = _build(_SECTIONS[key], value, dotted + ".")
        else:
            if isinstance(value, dict):
                raise InvalidValue(dotted, "unexpected section")
            kwargs[key] = _coerce(dotted, value, default)
    if cls is RunConfig:
        return RunConfig(**kwargs)
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)


def config_to_dict(c: RunConfig) -> dict:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(c):
        v = getattr(c, f.name)
        if f.name in _SECTIONS:
            out[f.name] = {g.name: getattr(v, g.name) for g in dataclasses.fields(v)}
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def dumps_config(c: RunConfig) -> str:
    return tomli_w.dumps(config_to_dict(c))


def loads_config(text: str) -> RunConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        if line is None:
            m = re.search(r"line (\d+)", str(exc))
            line = int(m.group(1)) if m else None
        raise ParseError(line, str(exc)) from None
    return config_from_dict(data)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    return loads_config(path.read_text(encoding="utf-8"))


def save_config(c: RunConfig, path) -> None:
    Path(path).write_text(dumps_config(c), encoding="utf-8", newline="\n")


def apply_overrides(c: RunConfig, overrides) -> RunConfig:
    """Apply ``dotted.key=value`` strings; values use the config file's value syntax."""
    data = config_to_dict(c)
    for item in overrides:
        if "=" not in item:
            raise InvalidValue(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        try:
            value = tomli.loads(f"v = {raw.strip()}")["v"]
        except tomli.TOMLDecodeError:
            value = raw.strip()
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise InvalidValue(key, "unknown key")
            node = node[p]
        if parts[-1] not in node or isinstance(node[parts[-1]], dict):
            raise InvalidValue(key, "unknown key")
        node[parts[-1]] = value
    return config_from_dict(data)
