"""Layered D-RF network: parameter storage, initialisation and views.

A model is ``(dense w -> D-RF layer)`` repeated, followed by a non-spiking
leaky-integrator readout. Trainable arrays live in one ordered dict under
dotted names; constrained quantities are stored unconstrained and mapped on
read (softplus for tau, square for omega, logistic for alpha and the leak).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import RunConfig, TimeGrid
from .dynamics import (
    DendriticParams,
    SomaParams,
    init_dendritic,
    logit,
    omega_from_raw,
    omega_to_raw,
    sigmoid,
    tau_from_raw,
    tau_to_raw,
)
from .parallel import KernelCache, TransformPlan

LAYER_FIELDS = ("w", "tau_raw", "omega_raw", "gamma", "c", "alpha_raw")
READOUT_FIELDS = ("w", "b", "leak_raw")
READOUT_LEAK_INIT = 0.9


@dataclass
class Model:
    input_channels: int
    widths: tuple[int, ...]
    n: int
    n_a: int
    classes: int
    grid: TimeGrid
    v_pre: float = 1.0
    params: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = 0
    kernels: KernelCache = field(default_factory=KernelCache, repr=False, compare=False)

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def plan(self) -> TransformPlan:
        return TransformPlan(self.grid.length)

    @property
    def dtype(self):
        return self.params["readout.w"].dtype

    def fan_in(self, layer: int) -> int:
        return self.input_channels if layer == 0 else self.widths[layer - 1]

    def p(self, layer: int, name: str) -> np.ndarray:
        return self.params[f"layer{layer}.{name}"]

    def dendritic(self, layer: int) -> DendriticParams:
        return DendriticParams(
            tau_from_raw(self.p(layer, "tau_raw")),
            omega_from_raw(self.p(layer, "omega_raw")),
            self.p(layer, "gamma"),
        )

    def soma(self, layer: int) -> SomaParams:
        return SomaParams(self.p(layer, "c"), self.v_pre, self.alpha(layer))

    def alpha(self, layer: int) -> np.ndarray:
        return sigmoid(self.p(layer, "alpha_raw"))

    @property
    def leak(self) -> float:
        return float(sigmoid(self.params["readout.leak_raw"])[0])

    def bump_version(self) -> None:
        self.version += 1

    def copy(self) -> "Model":
        return Model(
            self.input_channels, self.widths, self.n, self.n_a, self.classes, self.grid,
            self.v_pre, {k: v.copy() for k, v in self.params.items()}, self.version,
        )

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def init_model(config: RunConfig, input_channels: int, classes: int, rng) -> Model:
    """Initialise a model from a run config; all draws come from ``rng``."""
    grid = config.grid
    dtype = config.dtype
    widths = tuple(config.widths)
    params: dict[str, np.ndarray] = {}
    fan_in = input_channels
    for l, width in enumerate(widths):
        dp, c = init_dendritic(rng, (width, config.n), grid)
        bound = config.neuron.input_gain / np.sqrt(fan_in)
        w = rng.uniform((width, fan_in), -bound, bound)
        params[f"layer{l}.w"] = w
        params[f"layer{l}.tau_raw"] = tau_to_raw(dp.tau)
        params[f"layer{l}.omega_raw"] = omega_to_raw(dp.omega)
        params[f"layer{l}.gamma"] = np.array(dp.gamma)
        params[f"layer{l}.c"] = c
        params[f"layer{l}.alpha_raw"] = np.full(config.n_a, logit(config.neuron.alpha_init))
        fan_in = width
    bound = 1.0 / np.sqrt(fan_in)
    params["readout.w"] = rng.uniform((classes, fan_in), -bound, bound)
    params["readout.b"] = np.zeros(classes)
    params["readout.leak_raw"] = np.array([logit(READOUT_LEAK_INIT)])
    params = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
    return Model(input_channels, widths, config.n, config.n_a, classes, grid, config.neuron.v_pre, params)


def param_names(depth: int) -> list[str]:
    names = [f"layer{l}.{f}" for l in range(depth) for f in LAYER_FIELDS]
    return names + [f"readout.{f}" for f in READOUT_FIELDS]
