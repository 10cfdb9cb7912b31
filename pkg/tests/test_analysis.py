import numpy as np
import pytest
from scipy.signal import argrelmax

from drfnet.analysis import (
    E_AC_J,
    E_MAC_J,
    GRID_POINTS,
    DegenerateResponse,
    FrequencyResponse,
    drf_response,
    empirical_response,
    energy_estimate,
    log_spaced_branches,
    measured_bandwidth,
    model_energy,
    omega_grid,
    rf_response_closed_form,
    spike_stats,
)
from drfnet.core import RunConfig, TaskConfig, TimeGrid, make_rng
from drfnet.dynamics import DendriticParams
from drfnet.network import init_model


def truncated_series(b, omega, delta, Omega):
    """|sum_k delta exp(k (delta b + i delta omega)) exp(-i Omega k)| until the tail is < 1e-12."""
    K = int(np.ceil(np.log(1e-12) / (delta * b))) + 1
    k = np.arange(K)
    terms = delta * np.exp(k * (delta * b + 1j * (delta * omega - Omega)))
    return abs(np.sum(terms))


# ------------------------------------------------------------ closed form


def test_impulse_limit():
    Om = omega_grid(257)
    assert np.max(np.abs(rf_response_closed_form(-1e3, 0.7, 1.0, Om) - 1.0)) < 1e-6


def test_value_at_resonance():
    for b, om, d in [(-0.1, 0.5, 1.0), (-0.02, 2.0, 0.5), (-3.0, 0.1, 0.25)]:
        got = rf_response_closed_form(b, om, d, d * om)
        assert got == pytest.approx(d / (1 - np.exp(d * b)), rel=1e-14)


def test_closed_form_matches_series():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        b = -rng.uniform(0.05, 5.0)
        om = rng.uniform(0, 3)
        d = rng.uniform(0.1, 1.0)
        Om = rng.uniform(0, np.pi)
        ref = truncated_series(b, om, d, Om)
        worst = max(worst, abs(rf_response_closed_form(b, om, d, Om) - ref) / ref)
    assert worst < 1e-9


def test_positive_b_rejected():
    with pytest.raises(ValueError):
        rf_response_closed_form(0.0, 1.0, 1.0, 0.5)


# --------------------------------------------------------- D-RF response


def test_single_branch_equals_rf_curve():
    grid = TimeGrid(1.0, 64)
    p = DendriticParams([12.0], [0.8], [1.0])
    r = drf_response(p, [1.0], grid)
    ref = rf_response_closed_form(-1 / 12.0, 0.8, 1.0, r.omega_grid)
    assert np.max(np.abs(r.aggregate - ref) / ref) < 1e-14
    assert r.omega_grid.size == GRID_POINTS


def test_superposition_of_weighted_branches():
    grid = TimeGrid(1.0, 64)
    rng = np.random.default_rng(1)
    p = DendriticParams(rng.uniform(2, 50, 5), rng.uniform(0, 3, 5), np.ones(5))
    c = rng.uniform(0.1, 1, 5)
    r = drf_response(p, c, grid)
    total = sum(c[i] * r.branch(i).aggregate for i in range(5))
    assert np.max(np.abs(r.aggregate - total) / total) < 1e-12


def test_two_branches_give_two_peaks():
    grid = TimeGrid(1.0, 64)
    p = DendriticParams([40.0, 40.0], [0.6, 2.2], [1.0, 1.0])
    r = drf_response(p, [1.0, 1.0], grid)
    peaks = r.omega_grid[argrelmax(r.aggregate)[0]]
    spacing = r.omega_grid[1]
    assert len(peaks) == 2
    assert np.all(np.abs(peaks - [0.6, 2.2]) < 2 * spacing)


def test_negative_weights_clamped_and_raw_kept():
    grid = TimeGrid(1.0, 64)
    p = DendriticParams([5.0], [1.0], [1.0])
    r = drf_response(p, [-1.0], grid)
    assert np.all(r.aggregate == 0) and np.all(r.aggregate_raw < 0)
    with pytest.raises(DegenerateResponse):
        measured_bandwidth(r)


def test_empirical_gain_matches_closed_form_at_resonance():
    L = 8192
    grid = TimeGrid(1.0, L)
    p = DendriticParams([200.0, 50.0], [0.9, 2.0], [1.0, 1.0])
    for i in range(2):
        one = DendriticParams(p.tau[i : i + 1], p.omega[i : i + 1], p.gamma[i : i + 1])
        emp = empirical_response(one, grid, [p.omega[i]])[0, 0]
        ref = rf_response_closed_form(-1 / p.tau[i], p.omega[i], 1.0, p.omega[i])
        assert abs(emp - ref) / ref < 0.02


def test_empirical_peak_within_one_bin():
    grid = TimeGrid(1.0, 8192)
    full = omega_grid()
    for tau, om in [(10.0, 1.3), (100.0, 0.4)]:
        centre = int(np.argmin(np.abs(full - om)))
        Om = full[centre - 150 : centre + 150]
        emp = empirical_response(DendriticParams([tau], [om], [1.0]), grid, Om)[0]
        assert abs(Om[np.argmax(emp)] - om) <= full[1] + 1e-15


# --------------------------------------------------------------- bandwidth


def test_single_branch_one_interval_holding_resonance():
    grid = TimeGrid(1.0, 64)
    r = drf_response(DendriticParams([30.0], [1.1], [1.0]), [1.0], grid)
    bw = measured_bandwidth(r)
    assert len(bw.intervals) == 1
    lo, hi = bw.intervals[0]
    assert lo <= 1.1 <= hi
    # half-power full width of a first-order resonance is about 2/tau
    assert bw.width == pytest.approx(2 / 30.0, rel=0.05)


def test_level_one_is_one_grid_spacing():
    grid = TimeGrid(1.0, 64)
    r = drf_response(DendriticParams([30.0], [1.1], [1.0]), [1.0], grid)
    assert measured_bandwidth(r, level=1.0).width == pytest.approx(r.omega_grid[1])


def test_log_spaced_bank_is_broader_than_single_branch():
    grid = TimeGrid(1.0, 512)
    widths = {}
    for n in (1, 8):
        p, c = log_spaced_branches(n, grid)
        r = drf_response(p, c, grid)
        # each branch peaks at 1/n between grid points; neighbouring tails lift the bank a little
        assert 0.95 / n <= r.aggregate.max() < 1.2 / n
        widths[n] = measured_bandwidth(r).width
    assert widths[8] > widths[1]


def test_response_invariants():
    with pytest.raises(ValueError):
        FrequencyResponse(np.array([0.0, 0.0]), np.ones((1, 2)), np.ones(2), np.ones(2))
    with pytest.raises(ValueError):
        FrequencyResponse(np.array([0.0, 1.0]), -np.ones((1, 2)), np.ones(2), np.ones(2))


# ---------------------------------------------------------------- sparsity


def test_spike_stats_extremes():
    assert spike_stats(np.zeros((2, 3, 10))).rate == 0.0
    assert spike_stats(np.ones((2, 3, 10))).rate == 1.0


def test_spike_stats_bernoulli_concentration():
    u = make_rng(2024).uniform((10, 100, 100))
    s = spike_stats((u < 0.1).astype(float))
    assert 0.094 <= s.rate <= 0.106
    assert s.spikes == (10097,)
    assert s.histogram.sum() == 100


def test_spike_stats_layers_and_binary_check():
    s = spike_stats([np.ones((1, 2, 5)), np.zeros((1, 3, 5))])
    assert s.layer_rates == (1.0, 0.0)
    assert s.rate == pytest.approx(10 / 25)
    with pytest.raises(ValueError):
        spike_stats(np.full((1, 1, 3), 0.5))


# ------------------------------------------------------------------ energy


def test_energy_zero():
    rep = energy_estimate(spike_stats(np.zeros((1, 4, 8))), [3])
    assert rep.energy_j == 0.0 and rep.synaptic_ops == 0.0


def test_energy_doubles_with_spike_count():
    a = np.zeros((1, 4, 8))
    a[0, :, :2] = 1
    b = np.zeros((1, 4, 8))
    b[0, :, :4] = 1
    ea = energy_estimate(spike_stats(a), [5])
    eb = energy_estimate(spike_stats(b), [5])
    assert eb.energy_j == 2 * ea.energy_j
    assert ea.energy_j == 8 * 5 * E_AC_J


def test_energy_dense_term_and_constants():
    rep = energy_estimate(spike_stats(np.zeros((1, 1, 1))), [1], dense_macs=10)
    assert rep.energy_j == pytest.approx(10 * E_MAC_J)
    with pytest.raises(ValueError):
        energy_estimate(spike_stats(np.zeros((1, 1, 1))), [1], e_ac=0.0)
    with pytest.raises(ValueError):
        energy_estimate(spike_stats(np.zeros((1, 1, 1))), [1, 2])


def test_energy_monotone_in_every_count():
    rng = np.random.default_rng(3)
    base = (rng.uniform(size=(2, 6, 20)) < 0.2).astype(float)
    e0 = energy_estimate(spike_stats(base), [4]).energy_j
    for idx in list(zip(*np.nonzero(base == 0)))[:25]:
        more = base.copy()
        more[idx] = 1
        assert energy_estimate(spike_stats(more), [4]).energy_j > e0


def test_model_energy_per_sample():
    cfg = RunConfig(widths=(3, 2), task=TaskConfig(length=16, classes=2))
    model = init_model(cfg, 1, 2, make_rng(0))
    s0 = np.ones((4, 3, 16))
    s1 = np.zeros((4, 2, 16))
    rep = model_energy(model, [s0, s1], batch=4)
    assert rep.synaptic_ops == 3 * 16 * 2
    assert rep.dense_macs == 1 * 3 * 16
    assert rep.energy_j == pytest.approx(96 * E_AC_J + 48 * E_MAC_J)
