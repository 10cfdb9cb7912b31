"""Step-by-step resonate-and-fire and dendritic resonate-and-fire dynamics.

This is the reference path: every quantity is produced by an explicit loop
over time, and the time-parallel module is checked against it.

Shapes follow one convention throughout: branch parameters are ``(N, n)``
(neurons, branches) or ``(n,)`` for a lone neuron; sequences are
``(B, N, L)``; branch states are ``(B, N, n, L)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ComplexStateSequence, RealSequence, ShapeError, TimeGrid, _readonly

TAU_FLOOR = 1e-6


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class RFParams:
    b: float
    omega: float

    def __post_init__(self):
        if not self.b < 0:
            raise ValueError("damping b must be < 0")
        if not self.omega > 0:
            raise ValueError("omega must be > 0")


@dataclass(frozen=True, eq=False)
class DendriticParams:
    tau: np.ndarray
    omega: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float)
        omega = np.asarray(self.omega, dtype=float)
        gamma = np.asarray(self.gamma, dtype=float)
        if not (tau.shape == omega.shape == gamma.shape) or tau.ndim == 0:
            raise ShapeError("tau, omega and gamma must share one shape")
        for name, a in (("tau", tau), ("omega", omega), ("gamma", gamma)):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be finite")
        if np.any(tau <= 0):
            raise ValueError("tau must be > 0 for every branch")
        if np.any(omega < 0):
            raise ValueError("omega must be ≥ 0 for every branch")
        object.__setattr__(self, "tau", _readonly(tau))
        object.__setattr__(self, "omega", _readonly(omega))
        object.__setattr__(self, "gamma", _readonly(gamma))

    @property
    def n(self) -> int:
        return self.tau.shape[-1]

    def pole(self, delta: float) -> np.ndarray:
        """Complex exponent delta * (-1/tau + i*omega) per branch."""
        return delta * (-1.0 / self.tau + 1j * self.omega)

    def transition(self, delta: float) -> np.ndarray:
        return np.exp(self.pole(delta))


@dataclass(frozen=True, eq=False)
class SomaParams:
    c: np.ndarray
    v_pre: float = 1.0
    alpha: np.ndarray = ()

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        if not self.v_pre > 0:
            raise ValueError("v_pre must be > 0")
        if np.any(alpha <= 0) or np.any(alpha >= 1):
            raise ValueError("every alpha_k must lie in (0, 1)")
        if not np.all(np.isfinite(c)):
            raise ValueError("c must be finite")
        object.__setattr__(self, "c", _readonly(c))
        object.__setattr__(self, "alpha", _readonly(alpha))
        object.__setattr__(self, "v_pre", float(self.v_pre))

    @property
    def n_a(self) -> int:
        return self.alpha.shape[0]


@dataclass(frozen=True, eq=False)
class SpikeTrain:
    """Binary spikes shaped (batch, neurons, time)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 1:
            v = v[None, None, :]
        if v.ndim != 3:
            raise ShapeError(f"expected (batch, neurons, time), got {v.shape}")
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("spike train must be strictly binary")
        object.__setattr__(self, "values", _readonly(v))


@dataclass(frozen=True, eq=False)
class DRFTrace:
    states: ComplexStateSequence | None
    H: RealSequence
    V_th: RealSequence
    spikes: SpikeTrain


# ----------------------------------------------------- reparameterisations


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-np.logaddexp(0.0, -x))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def tau_from_raw(raw):
    return softplus(raw) + TAU_FLOOR


def tau_to_raw(tau):
    return inv_softplus(np.asarray(tau, dtype=float) - TAU_FLOOR)


def omega_from_raw(raw):
    return np.square(raw)


def omega_to_raw(omega):
    return np.sqrt(omega)


def init_dendritic(rng, shape, grid: TimeGrid, l_max: int | None = None) -> tuple[DendriticParams, np.ndarray]:
    """Draw (tau, omega, gamma) and branch weights c for ``shape = (..., n)``.

    omega is log-uniform over [pi / l_max, 0.9 pi / delta] so branches tile the
    representable band; tau is uniform over [delta, L*delta]; gamma = delta.
    """
    shape = tuple(shape)
    n = shape[-1]
    l_max = grid.length if l_max is None else l_max
    lo, hi = np.log(np.pi / (l_max * grid.delta)), np.log(0.9 * np.pi / grid.delta)
    omega = np.exp(rng.uniform(shape, lo, hi))
    tau = rng.uniform(shape, grid.delta, max(grid.length * grid.delta, 2 * grid.delta))
    gamma = np.full(shape, grid.delta)
    bound = 1.0 / np.sqrt(n)
    c = rng.uniform(shape, -bound, bound)
    return DendriticParams(tau, omega, gamma), c


# ---------------------------------------------------------------- one step


def rf_step(z, input, p: RFParams, delta: float):
    if not delta > 0:
        raise ValueError("delta must be > 0")
    return np.exp(delta * complex(p.b, p.omega)) * z + delta * input


def drf_charge_step(Z, input, p: DendriticParams, delta: float):
    """Advance every branch one step; ``input`` broadcasts over the branch axis."""
    if not delta > 0:
        raise ValueError("delta must be > 0")
    return p.transition(delta) * Z + p.gamma * np.asarray(input)[..., None]


def soma_potential(Z, s: SomaParams):
    Z = np.asarray(Z)
    if Z.shape[-1] != s.c.shape[-1]:
        raise ShapeError(f"{Z.shape[-1]} branch states but {s.c.shape[-1]} weights")
    return np.sum(s.c * Z.real, axis=-1)


def adaptive_threshold_step(recent_prespikes, s: SomaParams) -> float:
    """``recent_prespikes[k-1]`` is the pre-spike k steps back (k = 1..n_a)."""
    w = np.asarray(recent_prespikes, dtype=float).reshape(-1)
    if w.shape[0] != s.n_a:
        raise ShapeError(f"window holds {w.shape[0]} entries, expected {s.n_a}")
    return s.v_pre + float(np.dot(s.alpha, w))


# ------------------------------------------------------------ full sequence


def drf_sequential_forward(input, p: DendriticParams, s: SomaParams, grid: TimeGrid) -> DRFTrace:
    """Run charge, soma, threshold and fire one step at a time.

    There is no membrane reset: after a spike the adaptive threshold rises
    instead. ``input`` is ``(B, N, L)`` with one drive per neuron.
    """
    seq = input if isinstance(input, RealSequence) else RealSequence(input)
    x = seq.values
    B, N, L = x.shape
    if L != grid.length:
        raise ShapeError(f"input has {L} steps, grid has {grid.length}")
    if p.tau.shape[:-1] not in ((N,), ()) or s.c.shape != p.tau.shape:
        raise ShapeError("parameter shapes do not match (N, n) for the input's neurons")
    rtype = x.dtype
    ctype = np.complex64 if rtype == np.float32 else np.complex128
    n = p.n
    a = p.transition(grid.delta).astype(ctype)
    gamma = p.gamma.astype(rtype)
    c = s.c.astype(rtype)
    alpha = s.alpha.astype(rtype)
    n_a = s.n_a
    v_pre = rtype.type(s.v_pre)

    Z = np.zeros((B, N, n), dtype=ctype)
    states = np.empty((B, N, n, L), dtype=ctype)
    H = np.empty((B, N, L), dtype=rtype)
    V = np.empty((B, N, L), dtype=rtype)
    P = np.zeros((B, N, L + n_a), dtype=rtype)  # left-padded pre-spike record
    S = np.empty((B, N, L), dtype=rtype)
    rev_alpha = alpha[::-1]
    for t in range(L):
        Z = a * Z + gamma * x[:, :, t, None]
        states[..., t] = Z
        h = np.sum(c * Z.real, axis=-1)
        H[:, :, t] = h
        if n_a:
            # P[..., t : t + n_a] holds pre-spikes at t-n_a .. t-1
            v = v_pre + P[:, :, t : t + n_a] @ rev_alpha
        else:
            v = np.full((B, N), v_pre, dtype=rtype)
        V[:, :, t] = v
        P[:, :, t + n_a] = h >= v_pre
        S[:, :, t] = h >= v
    return DRFTrace(
        ComplexStateSequence.from_complex(states),
        RealSequence(H),
        RealSequence(V),
        SpikeTrain(S),
    )
