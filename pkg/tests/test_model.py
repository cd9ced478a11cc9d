import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from unravel import model, qops
from conftest import random_density, random_hermitian

# (gamma_t, w_t, h_t) at Delta = g = 0.4; each value is checked below against
# an independent single-excitation propagation before being frozen here.
FROZEN_COEFFS = {
    0.5: (0.9753686223710171 + 0.09653128277445763j, 0.1610553018596596, 0.1918102824527752),
    1.0: (0.9057931828375649 + 0.1729883225460597j, 0.3280954398202986, 0.16481275415242985),
    3.0: (0.4882357192660989 + 0.05390248346587781j, 0.6560440411281778, -0.4289138572150065),
    7.5: (0.9544114508346293 - 0.23132488796404477j, 0.15296613249388485, 0.19261984231246623),
}


def jc_excited_amplitude(t, delta, g, omega0):
    """Excited amplitude from exact propagation in the {|e,0>, |g,1>} subspace."""
    H = np.array([[omega0, g], [g, omega0 + delta]], dtype=complex)
    return (sla.expm(-1j * H * t) @ np.array([1, 0], dtype=complex))[0]


@pytest.mark.parametrize("t", sorted(FROZEN_COEFFS))
def test_frozen_coefficients(t, benchmark_params):
    gamma, w, h = model.spin_boson_coefficients(t, benchmark_params)
    g0, w0, h0 = FROZEN_COEFFS[t]
    assert gamma == pytest.approx(g0, abs=1e-14)
    assert w == pytest.approx(w0, abs=1e-13)
    assert h == pytest.approx(h0, abs=1e-13)


@pytest.mark.parametrize("t", [0.3, 1.0, 3.0, 5.2, 7.5, 9.9])
@pytest.mark.parametrize("omega0", [0.0, 1.3])
def test_lab_amplitude_matches_exact_propagation(t, omega0, benchmark_params):
    p = benchmark_params
    a = model.spin_boson_lab_amplitude(t, p, omega0)
    assert a == pytest.approx(jc_excited_amplitude(t, p.delta, p.g, omega0), abs=1e-12)


@pytest.mark.parametrize("t", [0.5, 1.0, 3.0, 7.5])
def test_couplings_are_log_derivatives_of_gamma(t, benchmark_params):
    p = benchmark_params
    eps = 1e-6
    gp = model.spin_boson_coefficients(t + eps, p)[0]
    gm = model.spin_boson_coefficients(t - eps, p)[0]
    g0, w, h = model.spin_boson_coefficients(t, p)
    dlog = (gp - gm) / (2 * eps) / g0
    assert w == pytest.approx(-2 * dlog.real, abs=1e-7)
    assert h == pytest.approx(dlog.imag, abs=1e-7)


def test_singular_coupling_at_zero_detuning():
    p = model.SpinBosonParams(0.0, math.pi / 2)  # divergence at t = 1
    with pytest.raises(model.SingularCoupling):
        model.spin_boson_coefficients(1.0, p)
    c = model.SpinBosonCoupling(p)
    assert abs(c.clipped(1.0, 50.0)) == 50.0
    assert c.clipped(0.999, 50.0) == 50.0
    assert c.clipped(1.001, 50.0) == -50.0
    # away from the divergence the resonant coupling is 2 g tan(g t)
    assert c(0.3) == pytest.approx(2 * p.g * math.tan(p.g * 0.3), rel=1e-12)


def test_coupling_value_clips():
    w = model.ConstantCoupling(-7.0)
    assert model.coupling_value(w, 0.0) == -7.0
    assert model.coupling_value(w, 0.0, 2.0) == -2.0


def test_params_validation():
    with pytest.raises(ValueError):
        model.SpinBosonParams(0.4, 0.0)
    assert model.SpinBosonParams(0.4, 0.4).omega == pytest.approx(math.sqrt(0.16 + 0.64))


def test_table_coupling():
    c = model.TableCoupling((0.0, 1.0, 2.0), (0.0, 2.0, -2.0))
    assert c(0.5) == pytest.approx(1.0)
    assert c(1.5) == pytest.approx(0.0)
    assert c(5.0) == -2.0
    with pytest.raises(ValueError):
        model.TableCoupling((0.0, 0.0), (1.0, 2.0))
    with pytest.raises(ValueError):
        model.TableCoupling((0.0,), (float("nan"),))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(2, 3), t=st.floats(0, 3))
def test_liouvillian_matches_direct_action(seed, d, t):
    r = np.random.default_rng(seed)
    H = random_hermitian(r, d)
    Ls = [r.normal(size=(d, d)) + 1j * r.normal(size=(d, d)) for _ in range(2)]
    ws = [float(r.normal()), model.TableCoupling((0.0, 3.0), (1.0, -1.0))]
    m = model.make_model(H, list(zip(Ls, ws)))
    rho = random_density(r, d)
    direct = -1j * (H @ rho - rho @ H)
    for L, w in zip(Ls, m.couplings(t)):
        LdL = L.conj().T @ L
        direct += w * (L @ rho @ L.conj().T - 0.5 * (LdL @ rho + rho @ LdL))
    assert np.allclose(qops.apply_superop(model.build_liouvillian(m, t), rho), direct, atol=1e-11)


def test_hamiltonian_validation():
    m = model.make_model(np.array([[0, 1], [0, 0]], dtype=complex))
    with pytest.raises(ValueError):
        m.hamiltonian(0.0)
    with pytest.raises(ValueError):
        model.make_model(np.eye(2), [(np.eye(3), 1.0)])


def test_flow_is_trace_preserving_and_matches_closed_form_state(benchmark_params):
    p = benchmark_params
    for t in (0.0, 1.7, 4.0):
        F = model.spin_boson_flow(t, p)
        assert qops.is_trace_preserving(F, 1e-14)
        gamma = model.spin_boson_coefficients(t, p)[0]
        rho0 = np.array([[0.5, 0.5], [0.5, 0.5]], dtype=complex)
        rho = qops.apply_superop(F, rho0)
        assert rho[0, 0] == pytest.approx(0.5 * abs(gamma) ** 2)
        assert rho[0, 1] == pytest.approx(0.5 * gamma)


def test_zero_detuning_validity():
    assert not model.zero_detuning_state_valid((1, 0, 0))
    assert model.zero_detuning_state_valid((1, 0, 1))
    assert model.zero_detuning_state_valid((0, 0, 0))
    with pytest.raises(ValueError):
        model.exact_state_zero_detuning(0.0, 0.4, (1, 0, 0))
    rho0 = model.exact_state_zero_detuning(0.0, 0.4, (1, 0, 1))
    assert np.allclose(rho0, np.full((2, 2), 0.5))


@settings(max_examples=50, deadline=None)
@given(r=st.floats(0, 1), phi=st.floats(0, 2 * math.pi), x3=st.floats(0, 2), t=st.floats(0, 20))
def test_zero_detuning_exact_state_is_a_state(r, phi, x3, t):
    rad = math.sqrt(max(x3 * (2 - x3), 0.0)) * r
    x = (rad * math.cos(phi), rad * math.sin(phi), x3)
    rho = model.exact_state_zero_detuning(t, 0.7, x)
    assert np.trace(rho).real == pytest.approx(1.0)
    assert np.linalg.eigvalsh(rho)[0] >= -1e-12


def test_parse_matrix_formats():
    nested = [[[0, 0], [1, 0]], [[1, 0], [0, 0]]]
    flat = [[0, 0], [1, 0], [1, 0], [0, 0]]
    assert np.array_equal(model.parse_matrix(nested), qops.SIGMA_X)
    assert np.array_equal(model.parse_matrix(flat), qops.SIGMA_X)
    assert np.array_equal(model.parse_matrix("sigma_minus"), qops.SIGMA_MINUS)
    assert np.array_equal(model.parse_matrix("identity", 3), np.eye(3))
    M = np.array([[1 + 2j, 3], [-1j, 0.5]])
    assert np.array_equal(model.parse_matrix(model.matrix_to_json(M)), M)
    for bad in ("nonsense", [[1, 2, 3]], [[0, 0], [1, 0], [1, 0]]):
        with pytest.raises(ValueError):
            model.parse_matrix(bad)
    with pytest.raises(ValueError):
        model.parse_matrix("zero")
    with pytest.raises(ValueError):
        model.parse_matrix(nested, 3)


def test_model_from_json():
    m = model.model_from_json({"model": "spin_boson", "delta": 0.4, "g": 0.4})
    assert m.d == 2 and len(m.channels) == 1
    assert m.couplings(1.0)[0] == pytest.approx(FROZEN_COEFFS[1.0][1])
    g = model.model_from_json({
        "d": 2, "hamiltonian": "sigma_z",
        "channels": [{"L": "sigma_minus", "w": 0.3},
                     {"L": "sigma_z", "w": {"kind": "table", "times": [0, 1], "values": [1, -1]}},
                     {"L": "sigma_minus", "w": {"kind": "spin_boson_w", "delta": 0.4, "g": 0.4}}]})
    assert g.couplings(0.5)[:2] == pytest.approx([0.3, 0.0])
    with pytest.raises(ValueError):
        model.model_from_json({"model": "unknown"})
    with pytest.raises(ValueError):
        model.model_from_json({"d": 2, "hamiltonian": [[[0, 0], [1, 0]], [[0, 0], [0, 0]]]})
    with pytest.raises(ValueError):
        model.model_from_json({"d": 2, "channels": [{"L": "sigma_x", "w": {"kind": "weird"}}]})
