import math
import warnings

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from unravel import jump_engine as je, model, oracle, ostensible_engine as oe, qops
from unravel._ensemble import within_band
from conftest import random_hermitian, random_state


def test_drift_matrix_examples():
    H = np.array([[1.0, 0.2], [0.2, -1.0]], dtype=complex)
    assert np.allclose(oe.drift_matrix(model.make_model(H), 0.0, []), -1j * H)
    m = model.make_model(H, [(qops.SIGMA_MINUS, 0.7)])
    A = oe.drift_matrix(m, 0.0, [1.5])
    assert np.allclose(A, -1j * H - (0.7 * qops.SIGMA_PLUS @ qops.SIGMA_MINUS - 1.5 * np.eye(2)) / 2)


def test_rate_modes():
    w = np.array([-1.0, 2.0])
    assert np.allclose(oe.OstensibleRates(c0=0.5).rates(w), [0.5, 3.5])
    assert np.allclose(oe.OstensibleRates(mode="absolute", c0=0.2).rates(w), [1.2, 2.2])
    assert np.allclose(oe.OstensibleRates(mode="constant", c0=0.3).rates(w), [0.3, 0.3])
    assert np.allclose(oe.OstensibleRates(c0=0.5, r_max=1.0).rates(w), [0.5, 1.0])
    with pytest.raises(ValueError):
        oe.OstensibleRates(mode="constant", c0=0.0)
    with pytest.raises(ValueError):
        oe.OstensibleRates(mode="other")
    with pytest.raises(ValueError):
        oe.OstensibleRates(c0=0.0).rates(np.array([-1.0, 2.0]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(2, 3))
def test_average_generator_equals_liouvillian(seed, d):
    r = np.random.default_rng(seed)
    H = random_hermitian(r, d)
    ops = [r.normal(size=(d, d)) + 1j * r.normal(size=(d, d)) for _ in range(2)]
    m = model.make_model(H, list(zip(ops, r.normal(size=2))))
    w = m.couplings(0.0)
    rates = oe.OstensibleRates(mode="absolute", c0=0.3).rates(w)
    A = oe.drift_matrix(m, 0.0, rates, w)
    P = np.outer(*(lambda v: (v, v.conj()))(random_state(r, d)))
    gen = A @ P + P @ A.conj().T
    for L, wl, rl in zip(ops, w, rates):
        gen += rl * ((wl / rl) * L @ P @ L.conj().T - P)
    assert np.allclose(gen, qops.apply_superop(model.build_liouvillian(m, 0.0), P), atol=1e-10)


def test_inverse_cumulative_rate():
    p = model.SpinBosonParams(0.4, 0.4)
    plan = oe.make_plan(model.spin_boson_model(p), oracle.TimeGrid(0, 5, 50), oe.OstensibleRates())
    theta = np.linspace(0.01, plan.cum[-1, 0] * 0.999, 37)
    t = oe._invert_cumulative(plan, 0, theta)
    assert np.all(np.diff(t) > 0)
    # integrate the rate quadratics up to each returned time
    h = plan.grid.dt
    for th, tt in zip(theta, t):
        k = min(int(tt // h), plan.grid.n_steps - 1)
        s = (tt - plan.grid.times[k]) / h
        r0, rm, r1 = plan.r_nodes[k, :, 0]
        b1, b2 = 4 * rm - 3 * r0 - r1, 2 * r0 + 2 * r1 - 4 * rm
        val = plan.cum[k, 0] + h * (r0 * s + b1 * s * s / 2 + b2 * s ** 3 / 3)
        assert val == pytest.approx(th, abs=1e-12)


def test_no_channels_is_unitary():
    H = np.array([[0.3, 0.5], [0.5, -0.2]], dtype=complex)
    psi0 = np.array([0.6, 0.8j])
    grid = oracle.TimeGrid(0, 1, 40)
    path = oe.run_ostensible_trajectory(model.make_model(H), psi0, grid, oe.OstensibleRates(),
                                        np.random.default_rng(0))
    assert np.all(path.lam == 1) and path.jumps == []
    assert np.allclose(path.phi[-1], sla.expm(-1j * H) @ psi0, atol=1e-8)


def test_single_path_weight_jumps_by_w_over_r():
    m = model.make_model(np.zeros((2, 2)), [(qops.SIGMA_MINUS, -0.4)])
    grid = oracle.TimeGrid(0, 3, 30)
    pol = oe.OstensibleRates(mode="constant", c0=0.8)
    for s in range(20):
        path = oe.run_ostensible_trajectory(m, np.array([1.0, 0.0]), grid, pol, np.random.default_rng(s))
        assert path.lam[0] == 1.0
        n = len(path.jumps)
        assert path.lam[-1] == pytest.approx((-0.4 / 0.8) ** n)
        if n == 0:
            # no jump: phi = exp(r t / 2) exp(-w t / 2) on the excited amplitude
            assert abs(path.phi[-1][0]) == pytest.approx(math.exp((0.8 + 0.4) * 3 / 2), rel=1e-6)


def test_one_jump_conditional_expectation():
    """Paths with exactly one jump reproduce the first-order term of the series."""
    H = np.array([[0.5, 0.2], [0.2, -0.3]], dtype=complex)
    w, r, T = -0.6, 0.9, 1.5
    m = model.make_model(H, [(qops.SIGMA_MINUS, w)])
    psi0 = np.array([0.8, 0.6], dtype=complex)
    rho0 = np.outer(psi0, psi0.conj())
    grid = oracle.TimeGrid(0, T, 30)
    N = 20000
    res = oe.simulate(m, psi0, grid, oe.OstensibleRates(mode="constant", c0=r), N, 4, keep_paths=True)
    e = res.sums.extra
    one = np.bincount(e["jump_traj"], minlength=N) == 1
    phi, lam = e["paths_phi"][:, -1], e["paths_lam"][:, -1]
    vals = np.where(one[:, None, None], lam[:, None, None] * phi[:, :, None] * phi.conj()[:, None, :], 0)
    mc = vals.mean(0)
    se_re = vals.real.std(0, ddof=1) / math.sqrt(N)
    se_im = vals.imag.std(0, ddof=1) / math.sqrt(N)
    G = -1j * H - 0.5 * w * qops.SIGMA_PLUS @ qops.SIGMA_MINUS
    L = qops.SIGMA_MINUS
    us = np.linspace(0, T, 401)
    vals_q = []
    for u in us:
        X = sla.expm(G * (T - u)) @ L @ sla.expm(G * u)
        vals_q.append(w * X @ rho0 @ X.conj().T)
    vals_q = np.array(vals_q)
    hq = us[1] - us[0]
    quad = hq / 3 * (vals_q[0] + vals_q[-1] + 4 * vals_q[1:-1:2].sum(0) + 2 * vals_q[2:-1:2].sum(0))
    assert np.all(np.abs(mc.real - quad.real) <= 5 * se_re + 1e-12)
    assert np.all(np.abs(mc.imag - quad.imag) <= 5 * se_im + 1e-12)


def test_rate_independence_and_agreement_with_jump_engine():
    p = model.SpinBosonParams(0.4, 0.4)
    m = model.spin_boson_model(p)
    grid = oracle.TimeGrid(0, 3, 150)
    psi0 = np.array([1, 1], dtype=complex) / math.sqrt(2)
    a = oe.simulate(m, psi0, grid, oe.OstensibleRates(c0=0.5), 4000, 1).estimate()
    b = oe.simulate(m, psi0, grid, oe.OstensibleRates(mode="absolute", c0=0.2), 4000, 2).estimate()
    c = je.simulate(m, psi0, grid, je.RatePolicy(c0=0.25), 4000, 3).estimate()
    for x, y in ((a, b), (a, c), (b, c)):
        se = np.hypot(x.obs_se, y.obs_se)
        assert np.mean(within_band(x.obs_mean, y.obs_mean, se, 3)) >= 0.95
    assert a.kind == "ostensible" and a.info["rate_mode"] == "floor_plus_margin"
    assert np.all(within_band(a.mu_mean, 1.0, a.mu_se, 4))


def test_blowup_guard():
    m = model.make_model(np.zeros((2, 2)), [(qops.SIGMA_MINUS, -400.0)])
    grid = oracle.TimeGrid(0, 2, 200)
    rare = oe.OstensibleRates(mode="constant", c0=1e-6)  # jumps would reset the growth
    with pytest.raises(oe.OstensibleBlowUp):
        oe.run_ostensible_trajectory(m, np.array([1.0, 0.0]), grid, rare, np.random.default_rng(0))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = oe.simulate(m, np.array([1.0, 0.0]), grid, rare, 5, 0)
    assert res.n_aborted == 5
    assert any("blow-up" in str(x.message) for x in caught)


def test_determinism():
    p = model.SpinBosonParams(0.4, 0.4)
    grid = oracle.TimeGrid(0, 2, 40)
    args = (model.spin_boson_model(p), np.array([0, 1.0]), grid, oe.OstensibleRates(), 300, 7)
    a = oe.simulate(*args, workers=1, block=64)
    b = oe.simulate(*args, workers=2, block=64)
    assert np.array_equal(a.sums.s_rho_pos, b.sums.s_rho_pos)
    assert np.array_equal(a.sums.s_mo, b.sums.s_mo)
