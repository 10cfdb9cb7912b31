"""Frequency responses, measured bandwidth, spike statistics and energy.

Branch magnitudes use the branch's own input gain gamma in the numerator, so
the curves describe the discrete system that is actually simulated. The
neuron-level curve is the c-weighted sum of branch magnitudes; it is reported
raw and clamped at zero (the clamped curve feeds :func:`measured_bandwidth`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DRFError, TimeGrid
from .dynamics import DendriticParams, SpikeTrain

GRID_POINTS = 4096
HALF_POWER = 1.0 / np.sqrt(2.0)
E_AC_J = 0.9e-12
E_MAC_J = 4.6e-12


class DegenerateResponse(DRFError):
    pass


@dataclass(frozen=True, eq=False)
class FrequencyResponse:
    omega_grid: np.ndarray
    branches: np.ndarray  # (n, G)
    aggregate_raw: np.ndarray
    aggregate: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.omega_grid)
        if g.ndim != 1 or g.size < 2 or np.any(np.diff(g) <= 0):
            raise ValueError("frequency grid must be strictly increasing")
        if np.any(self.branches < 0) or np.any(self.aggregate < 0):
            raise ValueError("magnitudes must be ≥ 0")

    @property
    def n(self) -> int:
        return self.branches.shape[0]

    def branch(self, i: int) -> "FrequencyResponse":
        b = self.branches[i : i + 1]
        return FrequencyResponse(self.omega_grid, b, b[0], b[0])


@dataclass(frozen=True)
class Bandwidth:
    intervals: tuple[tuple[float, float], ...]
    width: float
    peak: float


@dataclass(frozen=True)
class SpikeStats:
    rate: float
    layer_rates: tuple[float, ...]
    spikes: tuple[int, ...]
    slots: tuple[int, ...]
    histogram: np.ndarray  # per-neuron rate histogram over [0, 1], 10 bins


@dataclass(frozen=True)
class EnergyReport:
    spike_rate: float
    synaptic_ops: float
    dense_macs: float
    energy_j: float
    per_layer_j: tuple[float, ...]

    def __post_init__(self):
        if not 0.0 <= self.spike_rate <= 1.0:
            raise ValueError("spike rate must lie in [0, 1]")
        if self.energy_j < 0:
            raise ValueError("energy must be ≥ 0")


def omega_grid(points: int = GRID_POINTS) -> np.ndarray:
    return np.linspace(0.0, np.pi, points)


# ------------------------------------------------------------- responses


def rf_response_closed_form(b, omega, delta, Omega):
    """|delta / (1 - exp(delta b + i (delta omega - Omega)))| for the plain RF neuron."""
    b = np.asarray(b, dtype=float)
    if np.any(b >= 0):
        raise ValueError("b must be < 0")
    z = np.exp(delta * b + 1j * (delta * np.asarray(omega) - np.asarray(Omega)))
    return np.abs(delta / (1.0 - z))


def branch_magnitudes(p: DendriticParams, delta: float, Omega) -> np.ndarray:
    """(n, G) magnitudes |gamma_i / (1 - exp(-delta/tau_i + i(delta omega_i - Omega)))|."""
    tau = p.tau.reshape(-1, 1)
    om = p.omega.reshape(-1, 1)
    gam = p.gamma.reshape(-1, 1)
    z = np.exp(-delta / tau + 1j * (delta * om - np.asarray(Omega)[None, :]))
    return np.abs(gam / (1.0 - z))


def drf_response(p: DendriticParams, c, grid: TimeGrid, Omega=None) -> FrequencyResponse:
    """Per-branch curves and their c-weighted magnitude sum for one neuron."""
    Omega = omega_grid() if Omega is None else np.asarray(Omega, dtype=float)
    c = np.asarray(c, dtype=float).reshape(-1)
    if c.shape[0] != p.tau.size:
        raise ValueError(f"{c.shape[0]} weights for {p.tau.size} branches")
    mags = branch_magnitudes(p, grid.delta, Omega)
    raw = c @ mags
    return FrequencyResponse(Omega, mags, raw, np.maximum(raw, 0.0))


def measured_bandwidth(resp: FrequencyResponse, level: float = HALF_POWER) -> Bandwidth:
    """Grid intervals where the aggregate reaches ``level`` times its peak.

    Each grid point above the level contributes one grid spacing, so the
    width at ``level = 1`` is a single spacing.
    """
    mag = resp.aggregate
    peak = float(mag.max())
    if not peak > 0:
        raise DegenerateResponse("response peak is zero")
    spacing = float(resp.omega_grid[1] - resp.omega_grid[0])
    above = mag >= level * peak * (1.0 - 1e-12)
    edges = np.diff(np.concatenate([[0], above.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1) - 1
    g = resp.omega_grid
    intervals = tuple((float(g[a]), float(g[b])) for a, b in zip(starts, stops))
    return Bandwidth(intervals, float(above.sum()) * spacing, peak)


def empirical_response(p: DendriticParams, grid: TimeGrid, Omega, warmup: int | None = None) -> np.ndarray:
    """Steady-state gain of each branch under a unit cosine drive at each Omega.

    Runs the step-by-step charge recurrence for ``grid.length`` steps and
    lock-in demodulates the states after ``warmup`` steps. Returns (n, G).
    """
    Omega = np.atleast_1d(np.asarray(Omega, dtype=float))
    L = grid.length
    warmup = L // 2 if warmup is None else warmup
    a = p.transition(grid.delta).reshape(1, -1)
    gamma = p.gamma.reshape(1, -1)
    Z = np.zeros((Omega.size, a.shape[1]), dtype=np.complex128)
    acc = np.zeros_like(Z)
    for t in range(L):
        Z = a * Z + gamma * np.cos(Omega * t)[:, None]
        if t >= warmup:
            acc += Z * np.exp(-1j * Omega * t)[:, None]
    # a real cosine splits its unit amplitude evenly between +Omega and -Omega
    return (2.0 * np.abs(acc) / (L - warmup)).T


def log_spaced_branches(n: int, grid: TimeGrid, band=(0.05, 2.5), tau=None) -> tuple[DendriticParams, np.ndarray]:
    """Deterministic bank: log-spaced omega over ``band`` with one shared tau.

    tau defaults to the grid span L*delta, so each branch is a sharp resonance
    and the bank covers ``n`` separate bands. With gamma = delta,
    c_i = (1 - exp(-delta/tau)) / (delta * n) brings each branch's resonant
    peak to 1/n, so the bank's total drive matches one unit-peak resonator
    whatever ``n`` is.
    """
    lo, hi = band
    om = np.geomspace(lo, hi, n) if n > 1 else np.array([np.sqrt(lo * hi)])
    tau = grid.length * grid.delta if tau is None else tau
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (n,)).copy()
    gamma = np.full(n, grid.delta)
    c = (1.0 - np.exp(-grid.delta / tau)) / (grid.delta * n)
    return DendriticParams(tau, om, gamma), c


# ------------------------------------------------------------ sparsity


def _as_binary(spikes) -> np.ndarray:
    a = spikes.values if isinstance(spikes, SpikeTrain) else np.asarray(spikes)
    if not np.all((a == 0) | (a == 1)):
        raise ValueError("spike train must be strictly binary")
    return a


def spike_stats(spikes) -> SpikeStats:
    """Rate over every (batch, neuron, step) slot; accepts one train or a list of layers."""
    layers = list(spikes) if isinstance(spikes, (list, tuple)) else [spikes]
    counts, slots, rates = [], [], []
    per_neuron = []
    for s in layers:
        a = _as_binary(s)
        if a.ndim == 1:
            a = a[None, None]
        counts.append(int(a.sum()))
        slots.append(int(a.size))
        rates.append(counts[-1] / max(slots[-1], 1))
        per_neuron.append(a.mean(axis=(0, 2)) if a.ndim == 3 else np.atleast_1d(a.mean()))
    hist, _ = np.histogram(np.concatenate(per_neuron), bins=10, range=(0.0, 1.0))
    total = sum(slots)
    return SpikeStats(sum(counts) / max(total, 1), tuple(rates), tuple(counts), tuple(slots), hist)


def energy_estimate(stats: SpikeStats, fan_out, dense_macs: float = 0.0, e_ac: float = E_AC_J, e_mac: float = E_MAC_J) -> EnergyReport:
    """E = sum_l spikes_l * fan_out_l * e_ac + dense_macs * e_mac (joules)."""
    if not (e_ac > 0 and e_mac > 0):
        raise ValueError("energy constants must be > 0")
    fan_out = list(fan_out)
    if len(fan_out) != len(stats.spikes):
        raise ValueError(f"{len(fan_out)} fan-outs for {len(stats.spikes)} layers")
    per_layer = [k * f * e_ac for k, f in zip(stats.spikes, fan_out)]
    ops = float(sum(k * f for k, f in zip(stats.spikes, fan_out)))
    total = float(sum(per_layer) + dense_macs * e_mac)
    return EnergyReport(stats.rate, ops, float(dense_macs), total, tuple(per_layer))


def model_energy(model, spikes, batch: int) -> EnergyReport:
    """Per-sample energy of a forward pass given each hidden layer's spike train."""
    stats = spike_stats(spikes)
    fan_out = list(model.widths[1:]) + [model.classes]
    L = model.grid.length
    dense = float(model.input_channels * model.widths[0] * L)  # analog input projection
    rep = energy_estimate(stats, fan_out, dense * batch)
    return EnergyReport(rep.spike_rate, rep.synaptic_ops / batch, dense,
                        rep.energy_j / batch, tuple(e / batch for e in rep.per_layer_j))
