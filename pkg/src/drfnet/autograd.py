"""Reverse-mode gradients for the fixed D-RF operator set.

Two independent backward routes are provided:

* the parallel route: pointwise surrogate at each step, then adjoint
  correlations computed with the same FFT machinery as the forward pass;
* the BPTT route: explicit reverse-time recursion over the complex branch
  states, which serves as the oracle for the parallel route.

Spikes use a double-Gaussian surrogate. The adaptive threshold is detached
from the graph unless straight-through training of alpha is requested.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import ndtr

from . import fft as _fft
from .core import DRFError, TimeGrid
from .dynamics import DendriticParams, drf_sequential_forward, sigmoid
from .network import Model
from .parallel import TransformPlan, causal_conv_spectra, kernel_taps, threshold_from_prespikes

BPTT_MAX_LENGTH = 512
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class TapeError(DRFError):
    pass


class ScaleGuard(DRFError):
    def __init__(self, length: int):
        self.length = length
        super().__init__(f"BPTT oracle is limited to L ≤ {BPTT_MAX_LENGTH}, got L = {length}")


@dataclass(frozen=True)
class SurrogateSpec:
    """G(x) = (1 + h) N(x; 0, sigma) - h N(x; 0, s * sigma)."""

    sigma: float = 0.5
    h: float = 0.15
    s: float = 6.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if not 0 <= self.h < 1:
            raise ValueError("h must lie in [0, 1)")
        if not self.s > 1:
            raise ValueError("s must be > 1")


def _gauss(x, width):
    return np.exp(-0.5 * np.square(x / width)) * (_INV_SQRT_2PI / width)


def surrogate_grad(x, spec: SurrogateSpec = SurrogateSpec()):
    x = np.asarray(x)
    return (1.0 + spec.h) * _gauss(x, spec.sigma) - spec.h * _gauss(x, spec.s * spec.sigma)


def surrogate_cdf(x, spec: SurrogateSpec = SurrogateSpec()):
    """Antiderivative of :func:`surrogate_grad`; a smooth stand-in for the step."""
    x = np.asarray(x)
    return (1.0 + spec.h) * ndtr(x / spec.sigma) - spec.h * ndtr(x / (spec.s * spec.sigma))


@dataclass
class TapeNode:
    op: str
    saved: dict[str, Any]
    parents: tuple["TapeNode", ...] = ()

    def need(self, *keys):
        missing = [k for k in keys if k not in self.saved]
        if missing:
            raise TapeError(f"tape node {self.op!r} lacks {', '.join(missing)}")
        return [self.saved[k] for k in keys]


@dataclass
class GradientSet:
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, key):
        return self.grads[key]

    def __setitem__(self, key, value):
        self.grads[key] = value

    def __contains__(self, key):
        return key in self.grads

    def keys(self):
        return self.grads.keys()

    def items(self):
        return self.grads.items()

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in self.grads.values())))

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet({k: v * factor for k, v in self.grads.items()})


# ------------------------------------------------------------------ op rules


def spike_backward(grad_out, tape: TapeNode, spec: SurrogateSpec = SurrogateSpec()):
    """dL/dH = dL/dS * G(H - V_th); nothing flows into V_th."""
    H, V = tape.need("H", "V_th")
    return np.asarray(grad_out) * surrogate_grad(H - V, spec)


def conv_backward(grad_states, tape: TapeNode):
    """Adjoint of the causal resonator convolution.

    ``grad_states`` is (B, N, n, L), real or complex (a complex gradient g means
    dL = sum Re(conj(g) dZ)); it may also be a ComplexStateSequence. Returns
    ``(grad_input (B, N, L), grad_kernel_taps (N, n, L))``.
    """
    x_spec, k_re, plan = tape.need("input_spec", "kernel_spec_re", "plan")
    k_im = tape.saved.get("kernel_spec_im")
    if hasattr(grad_states, "real") and hasattr(grad_states, "imag") and not isinstance(grad_states, np.ndarray):
        g_re, g_im = np.asarray(grad_states.real), np.asarray(grad_states.imag)
    else:
        g = np.asarray(grad_states)
        g_re = np.ascontiguousarray(g.real)
        g_im = np.ascontiguousarray(g.imag) if np.iscomplexobj(g) else None
    if g_im is not None and not np.any(g_im):
        g_im = None
    M = plan.size
    G_re = _fft.rfft(g_re, M)
    gI_spec = np.sum(G_re * np.conj(k_re), axis=2)
    gK_re = _fft.irfft(np.sum(G_re * np.conj(x_spec[:, :, None, :]), axis=0), M)[..., : plan.length]
    if g_im is not None:
        if k_im is None:
            raise TapeError("complex gradient needs the imaginary kernel spectrum")
        G_im = _fft.rfft(g_im, M)
        gI_spec = gI_spec + np.sum(G_im * np.conj(k_im), axis=2)
        gK_im = _fft.irfft(np.sum(G_im * np.conj(x_spec[:, :, None, :]), axis=0), M)[..., : plan.length]
    else:
        gK_im = np.zeros_like(gK_re)
    grad_input = _fft.irfft(gI_spec, M)[..., : plan.length]
    return grad_input, gK_re + 1j * gK_im


def param_backward(grad_kernel_taps, p: DendriticParams, grid: TimeGrid) -> dict[str, np.ndarray]:
    """Chain tap gradients into (tau, omega, gamma) through K = gamma exp(k delta pole)."""
    g = np.asarray(grad_kernel_taps)
    unit = DendriticParams(p.tau, p.omega, np.ones_like(p.gamma))
    E = kernel_taps(unit, grid)
    K = E * p.gamma[..., None]
    kd = np.arange(grid.length) * grid.delta
    re_Kg = np.real(np.conj(K) * g)
    return {
        "gamma": np.sum(np.real(np.conj(E) * g), axis=-1),
        "omega": np.sum(kd * np.real(np.conj(1j * K) * g), axis=-1),
        "tau": np.sum(kd * re_Kg, axis=-1) / np.square(p.tau),
    }


def raw_chain(model: Model, layer: int, natural: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Map natural-parameter gradients onto the stored unconstrained arrays."""
    out = {}
    if "tau" in natural:
        out["tau_raw"] = natural["tau"] * sigmoid(model.p(layer, "tau_raw"))
    if "omega" in natural:
        out["omega_raw"] = natural["omega"] * 2.0 * model.p(layer, "omega_raw")
    if "gamma" in natural:
        out["gamma"] = natural["gamma"]
    if "alpha" in natural:
        a = model.alpha(layer)
        out["alpha_raw"] = natural["alpha"] * a * (1.0 - a)
    return out


# ----------------------------------------------------------------- readout


def readout_weights(leak: float, L: int):
    """Per-step weights of time-mean decoding through a leaky integrator.

    mean_t y[t] = (1/L) sum_s u[s] g[s] with g[s] = sum_{j < L-s} leak**j.
    Returns g and dg/dleak.
    """
    m = np.arange(L, 0, -1, dtype=float)
    lam = float(leak)
    lm = lam**m
    g = (1.0 - lm) / (1.0 - lam)
    dg = (-m * lam ** (m - 1) * (1.0 - lam) + (1.0 - lm)) / (1.0 - lam) ** 2
    return g, dg


def cross_entropy(scores: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient with respect to the scores."""
    with np.errstate(invalid="ignore", over="ignore"):  # non-finite scores are reported by the caller
        z = scores - scores.max(axis=1, keepdims=True)
        logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    B = scores.shape[0]
    idx = np.arange(B)
    loss = -float(np.mean(logp[idx, labels]))
    grad = np.exp(logp)
    grad[idx, labels] -= 1.0
    return loss, grad / B


# ------------------------------------------------------------ network pass


@dataclass
class NetworkTape:
    mode: str
    spike: str
    layers: list[TapeNode]
    readout: TapeNode
    scores: np.ndarray

    @property
    def spikes(self) -> list[np.ndarray]:
        return [node.saved["S"] for node in self.layers]


def _layer_kernel(model: Model, layer: int, plan: TransformPlan):
    def build():
        dp = model.dendritic(layer)
        taps = kernel_taps(dp, model.grid)
        c = model.p(layer, "c")
        k_eff = np.einsum("jil,ji->jl", taps.real, c)
        return taps, _fft.rfft(k_eff.astype(model.dtype), plan.size)

    return model.kernels.get(layer, model.version, build)


def _fire(H, V, spike: str, spec: SurrogateSpec):
    if spike == "hard":
        return (H >= V).astype(H.dtype)
    if spike == "smooth":
        return surrogate_cdf(H - V, spec).astype(H.dtype)
    raise ValueError(f"unknown spike mode {spike!r}")


def network_forward(model: Model, x, mode: str = "parallel", spike: str = "hard", spec: SurrogateSpec = SurrogateSpec()) -> NetworkTape:
    """Forward pass recording everything either backward route needs.

    ``mode='parallel'`` evaluates each layer's soma potential as one FFT
    convolution with the branch-weighted kernel sum_i c_i Re K_i;
    ``mode='sequential'`` runs the step-by-step dynamics and keeps the branch
    states for BPTT. ``spike='smooth'`` replaces the step by
    :func:`surrogate_cdf` (used by finite-difference checks).
    """
    x = np.asarray(x, dtype=model.dtype)
    B, C, L = x.shape
    if C != model.input_channels or L != model.grid.length:
        raise ValueError(f"batch shape {x.shape} does not fit model (C={model.input_channels}, L={model.grid.length})")
    plan = model.plan
    nodes: list[TapeNode] = []
    inp = x
    parent: tuple = ()
    for l in range(model.depth):
        w = model.p(l, "w")
        I = np.matmul(w, inp)
        alpha = model.alpha(l)
        saved: dict[str, Any] = {"inp": inp, "I": I, "plan": plan}
        if mode == "parallel":
            taps, k_spec = _layer_kernel(model, l, plan)
            I_spec = _fft.rfft(I, plan.size)
            H = causal_conv_spectra(I_spec, k_spec, plan)
            P = (H >= model.v_pre).astype(H.dtype)
            V = threshold_from_prespikes(P, alpha, model.v_pre)
            saved.update(input_spec=I_spec, kernel_spec_re=k_spec[:, None, :], taps=taps)
        elif mode == "sequential":
            trace = drf_sequential_forward(I, model.dendritic(l), model.soma(l), model.grid)
            H, V = trace.H.values, trace.V_th.values
            P = (H >= model.v_pre).astype(H.dtype)
            saved["states"] = trace.states.to_complex()
        else:
            raise ValueError(f"unknown mode {mode!r}")
        S = _fire(H, V, spike, spec)
        saved.update(H=H, V_th=V, P=P, S=S)
        node = TapeNode("drf_layer", saved, parent)
        nodes.append(node)
        parent = (node,)
        inp = S

    W, b = model.params["readout.w"], model.params["readout.b"]
    lam = model.leak
    if mode == "parallel":
        g, dg = readout_weights(lam, L)
        feats = inp @ g.astype(inp.dtype) / L
        scores = feats @ W.T + b
        ro = TapeNode("readout", {"S": inp, "g": g, "dg": dg, "feats": feats}, parent)
    else:
        K = W.shape[0]
        y = np.zeros((B, K), dtype=inp.dtype)
        ys = np.empty((B, K, L), dtype=inp.dtype)
        acc = np.zeros((B, K), dtype=inp.dtype)
        for t in range(L):
            y = lam * y + inp[:, :, t] @ W.T
            ys[:, :, t] = y
            acc += y
        scores = acc / L + b
        ro = TapeNode("readout", {"S": inp, "y": ys}, parent)
    return NetworkTape(mode, spike, nodes, ro, scores)


def network_backward(model: Model, tape: NetworkTape, grad_scores, spec: SurrogateSpec = SurrogateSpec(), train_alpha: bool = False) -> GradientSet:
    """Parallel backward: every rule touches one timestep or one FFT correlation."""
    if tape.mode != "parallel":
        raise TapeError("network_backward needs a parallel-mode tape; use bptt_backward")
    grads = GradientSet()
    L = model.grid.length
    S_top, g, dg, feats = tape.readout.need("S", "g", "dg", "feats")
    W = model.params["readout.w"]
    lam = model.leak
    grads["readout.w"] = grad_scores.T @ feats
    grads["readout.b"] = grad_scores.sum(axis=0)
    g_feats = grad_scores @ W
    g_lam = float(np.sum(g_feats * (S_top @ dg)) / L)
    grads["readout.leak_raw"] = np.array([g_lam * lam * (1.0 - lam)])
    gS = g_feats[:, :, None] * (g / L)[None, None, :]

    for l in reversed(range(model.depth)):
        node = tape.layers[l]
        gH = spike_backward(gS, node, spec)
        gI, gK_eff = conv_backward(gH[:, :, None, :], node)
        R = gK_eff[:, 0, :].real
        taps = node.need("taps")[0]
        c = model.p(l, "c")
        dp = model.dendritic(l)
        natural = param_backward(c[:, :, None] * R[:, None, :], dp, model.grid)
        grads[f"layer{l}.c"] = np.einsum("jl,jil->ji", R, taps.real)
        if train_alpha and model.n_a:
            natural["alpha"] = _alpha_grad(gH, node.need("P")[0], model.n_a)
        for k, v in raw_chain(model, l, natural).items():
            grads[f"layer{l}.{k}"] = v
        if f"layer{l}.alpha_raw" not in grads:
            grads[f"layer{l}.alpha_raw"] = np.zeros(model.n_a)
        inp = node.need("inp")[0]
        grads[f"layer{l}.w"] = np.einsum("bjl,bcl->jc", gI, inp)
        gS = np.matmul(model.p(l, "w").T, gI)
    return _ordered(model, grads)


def _alpha_grad(gH, P, n_a):
    # straight-through: dS/dalpha_k = -G(H - V) * P[t - k]
    L = gH.shape[-1]
    out = np.zeros(n_a)
    for k in range(1, n_a + 1):
        if k < L:
            out[k - 1] = -np.sum(gH[..., k:] * P[..., : L - k])
    return out


def _ordered(model: Model, grads: GradientSet) -> GradientSet:
    return GradientSet({k: np.asarray(grads[k], dtype=model.params[k].dtype).reshape(model.params[k].shape) for k in model.params})


def bptt_backward(model: Model, tape: NetworkTape, grad_scores, spec: SurrogateSpec = SurrogateSpec(), train_alpha: bool = False) -> GradientSet:
    """Backpropagation through time by explicit reverse unrolling.

    Adjoint of the branch recurrence Z[t] = a Z[t-1] + gamma I[t]:
    A[t] = dL/dZ[t] + conj(a) A[t+1], with dL/da = sum_t A[t] conj(Z[t-1]).
    No length guard; :func:`bptt_reference_grad` adds one.
    """
    if tape.mode != "sequential":
        raise TapeError("BPTT needs the branch states of a sequential-mode tape")
    grads = GradientSet()
    L = model.grid.length
    delta = model.grid.delta
    S_top, ys = tape.readout.need("S", "y")
    W = model.params["readout.w"]
    lam = model.leak
    B, K = grad_scores.shape
    Ay = np.zeros((B, K))
    gW = np.zeros_like(W, dtype=float)
    g_lam = 0.0
    gS = np.empty(S_top.shape)
    for t in reversed(range(L)):
        Ay = grad_scores / L + lam * Ay
        gS[:, :, t] = Ay @ W
        gW += Ay.T @ S_top[:, :, t]
        if t > 0:
            g_lam += float(np.sum(Ay * ys[:, :, t - 1]))
    grads["readout.w"] = gW
    grads["readout.b"] = grad_scores.sum(axis=0)
    grads["readout.leak_raw"] = np.array([g_lam * lam * (1.0 - lam)])

    for l in reversed(range(model.depth)):
        node = tape.layers[l]
        Z, H, V, P, I, inp = node.need("states", "H", "V_th", "P", "I", "inp")
        dp = model.dendritic(l)
        a = dp.transition(delta)
        ca = np.conj(a)
        c = model.p(l, "c")
        gamma = dp.gamma
        n_a = model.n_a
        alpha_on = train_alpha and n_a > 0
        A = np.zeros(Z.shape[:-1], dtype=np.complex128)
        g_a = np.zeros(a.shape, dtype=np.complex128)
        g_gamma = np.zeros(gamma.shape)
        g_c = np.zeros(c.shape)
        g_alpha = np.zeros(n_a)
        gI = np.empty(I.shape)
        for t in reversed(range(L)):
            gH = gS[:, :, t] * surrogate_grad(H[:, :, t] - V[:, :, t], spec)
            Zt = Z[..., t]
            A = c * gH[:, :, None] + ca * A
            gI[:, :, t] = np.sum(gamma * A.real, axis=-1)
            g_gamma += np.sum(A.real * I[:, :, t, None], axis=0)
            g_c += np.sum(gH[:, :, None] * Zt.real, axis=0)
            if t > 0:
                g_a += np.sum(A * np.conj(Z[..., t - 1]), axis=0)
            if alpha_on:
                for k in range(1, min(n_a, t) + 1):
                    g_alpha[k - 1] -= np.sum(gH * P[:, :, t - k])
        natural = {
            "tau": np.real(np.conj(g_a) * a * delta / np.square(dp.tau)),
            "omega": np.real(np.conj(g_a) * 1j * delta * a),
            "gamma": g_gamma,
        }
        if alpha_on:
            natural["alpha"] = g_alpha
        for k, v in raw_chain(model, l, natural).items():
            grads[f"layer{l}.{k}"] = v
        if f"layer{l}.alpha_raw" not in grads:
            grads[f"layer{l}.alpha_raw"] = np.zeros(n_a)
        grads[f"layer{l}.c"] = g_c
        grads[f"layer{l}.w"] = np.einsum("bjl,bcl->jc", gI, inp)
        gS = np.matmul(model.p(l, "w").T, gI)
    return _ordered(model, grads)


def bptt_reference_grad(model: Model, x, labels, spec: SurrogateSpec = SurrogateSpec(), train_alpha: bool = False, spike: str = "hard"):
    """Loss and gradients by sequential forward plus BPTT (oracle; L ≤ 512)."""
    L = np.asarray(x).shape[-1]
    if L > BPTT_MAX_LENGTH:
        raise ScaleGuard(L)
    tape = network_forward(model, x, mode="sequential", spike=spike, spec=spec)
    loss, g_scores = cross_entropy(tape.scores, np.asarray(labels))
    return loss, bptt_backward(model, tape, g_scores, spec, train_alpha)


def parallel_grad(model: Model, x, labels, spec: SurrogateSpec = SurrogateSpec(), train_alpha: bool = False, spike: str = "hard"):
    tape = network_forward(model, x, mode="parallel", spike=spike, spec=spec)
    loss, g_scores = cross_entropy(tape.scores, np.asarray(labels))
    return loss, network_backward(model, tape, g_scores, spec, train_alpha), tape
