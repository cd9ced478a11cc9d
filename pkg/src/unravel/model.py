"""Canonical master-equation models and the two-level spin-boson benchmark.

A model is a time-dependent Hamiltonian plus a list of channels ``(L, w)``
where ``w(t)`` is a real coupling of arbitrary sign.  The generator is

    d rho/dt = -i[H, rho] + sum_l w_l (L rho L^+ - {L^+ L, rho}/2).

Couplings and Hamiltonians are small picklable callables so that models can be
shipped to worker processes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import qops

DEN_TOL = 1e-12
HERMITIAN_TOL = 1e-12


class SingularCoupling(ArithmeticError):
    """A coupling was evaluated at (or numerically on) one of its divergences."""

    def __init__(self, t: float, sign: float = 1.0):
        super().__init__(f"singular coupling at t={t!r}")
        self.t = t
        self.sign = sign


# ---------------------------------------------------------------------------
# couplings

@dataclass(frozen=True)
class ConstantCoupling:
    value: float

    def __call__(self, t):
        return float(self.value)


@dataclass(frozen=True)
class TableCoupling:
    """Piecewise-linear interpolation of tabulated values, constant beyond the ends."""
    times: tuple
    values: tuple

    def __post_init__(self):
        if len(self.times) != len(self.values) or len(self.times) < 1:
            raise ValueError("table coupling needs matching, nonempty times and values")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("table coupling times must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("table coupling values must be finite")

    def __call__(self, t):
        return float(np.interp(t, self.times, self.values))


@dataclass(frozen=True)
class SpinBosonParams:
    delta: float
    g: float

    def __post_init__(self):
        if not self.g > 0:
            raise ValueError(f"spin-boson coupling g must be positive, got {self.g}")

    @property
    def omega(self) -> float:
        return math.sqrt(self.delta ** 2 + 4 * self.g ** 2)


@dataclass(frozen=True)
class SpinBosonCoupling:
    """Decay coupling ``w_t`` of the single-mode vacuum spin-boson model."""
    params: SpinBosonParams

    def __call__(self, t):
        return spin_boson_coefficients(t, self.params)[1]

    def clipped(self, t, w_max):
        try:
            w = self(t)
        except SingularCoupling as exc:
            return math.copysign(w_max, exc.sign)
        return min(max(w, -w_max), w_max)


def coupling_value(w: Callable, t: float, w_max: float | None = None) -> float:
    """Evaluate a coupling, optionally clipping to ``[-w_max, w_max]``.

    Without ``w_max`` a singular evaluation propagates :class:`SingularCoupling`.
    """
    if w_max is None:
        return float(w(t))
    if hasattr(w, "clipped"):
        return float(w.clipped(t, w_max))
    v = float(w(t))
    return min(max(v, -w_max), w_max)


# ---------------------------------------------------------------------------
# Hamiltonians

@dataclass(frozen=True)
class ConstantHamiltonian:
    matrix: np.ndarray

    def __call__(self, t):
        return self.matrix


@dataclass(frozen=True)
class SpinBosonHamiltonian:
    """Effective Hamiltonian ``-h_t sigma_+ sigma_-`` of the spin-boson model.

    ``h_t`` enters the generator as ``+i h_t [sigma_+ sigma_-, rho]``.
    """
    params: SpinBosonParams

    def __call__(self, t):
        h = spin_boson_coefficients(t, self.params, check=False)[2]
        return -h * (qops.SIGMA_PLUS @ qops.SIGMA_MINUS)


@dataclass(frozen=True)
class Channel:
    L: np.ndarray
    w: Callable


@dataclass(frozen=True)
class CanonicalModel:
    d: int
    H: Callable
    channels: tuple = field(default_factory=tuple)
    label: str = ""

    def hamiltonian(self, t) -> np.ndarray:
        Ht = np.asarray(self.H(t), dtype=complex)
        if Ht.shape != (self.d, self.d):
            raise ValueError(f"Hamiltonian has shape {Ht.shape}, expected {(self.d, self.d)}")
        if np.max(np.abs(Ht - Ht.conj().T)) > HERMITIAN_TOL * max(1.0, np.max(np.abs(Ht))):
            raise ValueError(f"Hamiltonian not self-adjoint at t={t}")
        return Ht

    def couplings(self, t, w_max: float | None = None) -> np.ndarray:
        return np.array([coupling_value(c.w, t, w_max) for c in self.channels], dtype=float)

    @property
    def operators(self) -> list:
        return [np.asarray(c.L, dtype=complex) for c in self.channels]


def make_model(H, channels: Sequence = (), label: str = "") -> CanonicalModel:
    """Build a model from a constant or callable Hamiltonian and ``(L, w)`` pairs.

    ``w`` may be a number (constant coupling) or a callable of time.
    """
    if callable(H):
        d = np.asarray(H(0.0)).shape[0]
        Hc = H
    else:
        Hm = np.asarray(H, dtype=complex)
        d = Hm.shape[0]
        Hc = ConstantHamiltonian(Hm)
    chans = []
    for item in channels:
        if isinstance(item, Channel):
            L, w = item.L, item.w
        else:
            L, w = item
        L = np.asarray(L, dtype=complex)
        if L.shape != (d, d):
            raise ValueError(f"channel operator has shape {L.shape}, expected {(d, d)}")
        if not np.all(np.isfinite(L)):
            raise ValueError("channel operator has non-finite entries")
        if not callable(w):
            w = ConstantCoupling(float(w))
        chans.append(Channel(L, w))
    return CanonicalModel(d=d, H=Hc, channels=tuple(chans), label=label)


def build_liouvillian(m: CanonicalModel, t: float, w_max: float | None = None) -> np.ndarray:
    """Generator acting on row-major flattened density matrices."""
    d = m.d
    one = np.eye(d)
    Ht = m.hamiltonian(t)
    Lv = -1j * (np.kron(Ht, one) - np.kron(one, Ht.T))
    for ch, w in zip(m.channels, m.couplings(t, w_max)):
        L = np.asarray(ch.L, dtype=complex)
        LdL = L.conj().T @ L
        Lv = Lv + w * (np.kron(L, L.conj()) - 0.5 * (np.kron(LdL, one) + np.kron(one, LdL.T)))
    return Lv


# ---------------------------------------------------------------------------
# spin-boson benchmark (basis: e1 excited, e2 ground)

def spin_boson_coefficients(t: float, p: SpinBosonParams, check: bool = True):
    """Return ``(gamma_t, w_t, h_t)`` for the single-mode vacuum spin-boson model.

    ``gamma_t`` multiplies the coherence ``rho_12``; ``w_t`` is the decay
    coupling of ``sigma_-`` and ``h_t`` the Lamb-shift term entering as
    ``+i h_t [sigma_+ sigma_-, rho]``.  Both equal ``-2 Re`` and ``Im`` of
    ``d/dt log gamma_t``.  Raises :class:`SingularCoupling` where ``w_t``
    diverges unless ``check`` is false (then ``w_t`` is ``nan``).
    """
    D, g = p.delta, p.g
    Om = p.omega
    c, s = math.cos(Om * t / 2), math.sin(Om * t / 2)
    gamma = complex(math.cos(D * t), math.sin(D * t)) * complex(c, -(D / Om) * s)
    cos_t = math.cos(Om * t)
    den_w = D * D + 2 * g * g * (1 + cos_t)
    num_w = 2 * g * g * Om * math.sin(Om * t)
    h = D * (D * D + 4 * g * g * cos_t) / (2 * den_w) if D != 0 else 0.0
    if den_w < DEN_TOL:
        if check:
            raise SingularCoupling(t, sign=num_w if num_w != 0 else 1.0)
        return gamma, float("nan"), h
    return gamma, num_w / den_w, h


def spin_boson_model(p: SpinBosonParams) -> CanonicalModel:
    return CanonicalModel(
        d=2,
        H=SpinBosonHamiltonian(p),
        channels=(Channel(qops.SIGMA_MINUS.copy(), SpinBosonCoupling(p)),),
        label=f"spin_boson(delta={p.delta}, g={p.g})",
    )


def _two_level_flow(beta: float, coh: complex, alpha: float = 1.0) -> np.ndarray:
    # row-major flattening: index 0 = rho11, 1 = rho12, 2 = rho21, 3 = rho22
    F = np.zeros((4, 4), dtype=complex)
    F[0, 0] = beta
    F[0, 3] = 1 - alpha
    F[3, 0] = 1 - beta
    F[3, 3] = alpha
    F[1, 1] = coh
    F[2, 2] = np.conj(coh)
    return F


def spin_boson_flow(t: float, p: SpinBosonParams) -> np.ndarray:
    """Closed-form flow ``F_{t,0}`` of the vacuum spin-boson model (interaction picture)."""
    gamma = spin_boson_coefficients(t, p, check=False)[0]
    return _two_level_flow(abs(gamma) ** 2, gamma)


def spin_boson_lab_amplitude(t: float, p: SpinBosonParams, omega0: float) -> complex:
    """Excited-state amplitude for ``H = omega0 sigma_+ sigma_-`` coupled to a vacuum mode at ``omega0 + delta``.

    Related to the interaction-picture coherence factor by a phase and a
    complex conjugation: ``exp(-i (omega0 - delta/2) t) * conj(gamma_t)``.
    """
    gamma = spin_boson_coefficients(t, p, check=False)[0]
    return complex(np.exp(-1j * (omega0 - p.delta / 2) * t) * np.conj(gamma))


def spin_boson_lab_flow(t: float, p: SpinBosonParams, omega0: float) -> np.ndarray:
    a = spin_boson_lab_amplitude(t, p, omega0)
    return _two_level_flow(abs(a) ** 2, a)


def zero_detuning_state_valid(x, tol: float = 1e-12) -> bool:
    """Whether the Bloch-type vector ``x`` gives a positive initial state.

    In the zero-detuning parametrization the excited population is ``x3/2``,
    so positivity reads ``x1^2 + x2^2 <= x3 (2 - x3)``.
    """
    x1, x2, x3 = (float(v) for v in x)
    return x1 * x1 + x2 * x2 <= x3 * (2 - x3) + tol


def exact_state_zero_detuning(t: float, g: float, x, validate: bool = True) -> np.ndarray:
    """Closed-form state of the resonant spin-boson model.

    ``rho_t = (1 - s3)/2 + cos(g t) (x1 s1 + x2 s2)/2 + cos(g t)^2 x3 s3 / 2``.
    """
    if validate and not zero_detuning_state_valid(x):
        raise ValueError(f"x={tuple(x)} does not define a positive initial state")
    x1, x2, x3 = (float(v) for v in x)
    c = math.cos(g * t)
    one = np.eye(2, dtype=complex)
    return ((one - qops.SIGMA_Z) / 2
            + c * (x1 * qops.SIGMA_X + x2 * qops.SIGMA_Y) / 2
            + c * c * x3 * qops.SIGMA_Z / 2)


# ---------------------------------------------------------------------------
# JSON loading

NAMED_MATRICES = {
    "sigma_x": qops.SIGMA_X,
    "sigma_y": qops.SIGMA_Y,
    "sigma_z": qops.SIGMA_Z,
    "sigma_minus": qops.SIGMA_MINUS,
    "sigma_plus": qops.SIGMA_PLUS,
    "excited_projector": qops.SIGMA_PLUS @ qops.SIGMA_MINUS,
}


def parse_matrix(obj, d: int | None = None) -> np.ndarray:
    """Parse a matrix given as ``[re, im]`` pairs in row-major order, or a builtin name.

    Both a nested list of rows and a flat list of ``d*d`` pairs are accepted.
    """
    if isinstance(obj, str):
        if obj == "zero":
            if d is None:
                raise ValueError("'zero' matrix needs a dimension")
            return np.zeros((d, d), dtype=complex)
        if obj == "identity":
            if d is None:
                raise ValueError("'identity' matrix needs a dimension")
            return np.eye(d, dtype=complex)
        if obj not in NAMED_MATRICES:
            raise ValueError(f"unknown matrix name {obj!r}")
        return NAMED_MATRICES[obj].copy()
    arr = np.asarray(obj, dtype=float)
    if arr.ndim == 3 and arr.shape[2] == 2:
        M = arr[..., 0] + 1j * arr[..., 1]
    elif arr.ndim == 2 and arr.shape[1] == 2:
        n = int(round(math.sqrt(arr.shape[0])))
        if n * n != arr.shape[0]:
            raise ValueError("flat matrix list length is not a perfect square")
        M = (arr[:, 0] + 1j * arr[:, 1]).reshape(n, n)
    else:
        raise ValueError("matrix must be a list of [re, im] pairs")
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"matrix must be square, got {M.shape}")
    if d is not None and M.shape != (d, d):
        raise ValueError(f"matrix has shape {M.shape}, expected {(d, d)}")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    return M


def matrix_to_json(M) -> list:
    M = np.asarray(M, dtype=complex)
    return [[[float(z.real), float(z.imag)] for z in row] for row in M]


def parse_coupling(obj) -> Callable:
    if isinstance(obj, (int, float)):
        return ConstantCoupling(float(obj))
    kind = obj.get("kind")
    if kind == "constant":
        return ConstantCoupling(float(obj["value"]))
    if kind == "spin_boson_w":
        return SpinBosonCoupling(SpinBosonParams(float(obj["delta"]), float(obj["g"])))
    if kind == "table":
        return TableCoupling(tuple(float(v) for v in obj["times"]),
                             tuple(float(v) for v in obj["values"]))
    raise ValueError(f"unknown coupling kind {kind!r}")


def model_from_json(obj: dict) -> CanonicalModel:
    if obj.get("model") == "spin_boson":
        return spin_boson_model(SpinBosonParams(float(obj["delta"]), float(obj["g"])))
    if "model" in obj:
        raise ValueError(f"unknown builtin model {obj['model']!r}")
    d = int(obj["d"])
    if d < 1:
        raise ValueError("dimension must be positive")
    H = parse_matrix(obj.get("hamiltonian", "zero"), d)
    if np.max(np.abs(H - H.conj().T)) > HERMITIAN_TOL * max(1.0, np.max(np.abs(H))):
        raise ValueError("Hamiltonian is not self-adjoint")
    chans = [(parse_matrix(c["L"], d), parse_coupling(c["w"])) for c in obj.get("channels", [])]
    return make_model(H, chans, label=obj.get("label", "generic"))
