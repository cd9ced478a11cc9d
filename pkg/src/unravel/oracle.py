"""Deterministic reference solutions by fixed-step RK4 on the vectorized master equation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import qops
from .model import CanonicalModel, build_liouvillian

TRACE_DRIFT_TOL = 1e-6
STATE_TOL = 1e-10


class StepTooCoarse(ArithmeticError):
    """Trace drift exceeded tolerance during integration."""


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t_final: float
    n_steps: int

    def __post_init__(self):
        if not self.t_final > self.t0:
            raise ValueError("t_final must exceed t0")
        if int(self.n_steps) < 1:
            raise ValueError("n_steps must be at least 1")

    @property
    def dt(self) -> float:
        return (self.t_final - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


def check_density_matrix(rho, tol: float = STATE_TOL) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError("density matrix must be square")
    if abs(np.trace(rho) - 1) > tol:
        raise ValueError(f"density matrix trace {np.trace(rho)} is not 1")
    if np.max(np.abs(rho - rho.conj().T)) > tol:
        raise ValueError("density matrix is not self-adjoint")
    if np.linalg.eigvalsh((rho + rho.conj().T) / 2)[0] < -tol:
        raise ValueError("density matrix is not positive")
    return rho


def _rk4_generators(m: CanonicalModel, grid: TimeGrid, w_max):
    dt = grid.dt
    for t in grid.times[:-1]:
        yield (t,
               build_liouvillian(m, t, w_max),
               build_liouvillian(m, t + dt / 2, w_max),
               build_liouvillian(m, t + dt, w_max))


def integrate_master(m: CanonicalModel, rho0, grid: TimeGrid, w_max: float | None = None,
                     check_state: bool = True) -> np.ndarray:
    """Integrate the master equation; returns an array of shape ``(n_steps+1, d, d)``.

    Couplings are evaluated strictly unless ``w_max`` enables clipping.  Each
    output is re-symmetrized; the trace is left alone and monitored.
    """
    rho0 = np.asarray(rho0, dtype=complex)
    if check_state:
        check_density_matrix(rho0)
    d = m.d
    dt = grid.dt
    out = np.empty((grid.n_steps + 1, d, d), dtype=complex)
    out[0] = rho0
    x = qops.reshape(rho0)
    tr0 = np.trace(rho0).real
    for k, (t, L1, L2, L3) in enumerate(_rk4_generators(m, grid, w_max)):
        k1 = L1 @ x
        k2 = L2 @ (x + dt / 2 * k1)
        k3 = L2 @ (x + dt / 2 * k2)
        k4 = L3 @ (x + dt * k3)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        r = x.reshape(d, d)
        r = (r + r.conj().T) / 2
        x = r.reshape(-1)
        if not np.all(np.isfinite(r)) or abs(np.trace(r).real - tr0) > TRACE_DRIFT_TOL:
            raise StepTooCoarse(f"step size too coarse: trace drift at t={t + dt!r}")
        out[k + 1] = r
    return out


@dataclass
class FlowReport:
    times: np.ndarray
    flows: np.ndarray  # (n, d^2, d^2)
    choi_spectra: np.ndarray  # (n, d^2), descending
    cp_flags: np.ndarray
    kraus: list | None = None

    @property
    def min_choi(self) -> np.ndarray:
        return self.choi_spectra[:, -1]


def propagate_flow(m: CanonicalModel, grid: TimeGrid, w_max: float | None = None,
                   with_kraus: bool = False, cp_tol: float = qops.CP_TOL,
                   tp_tol: float = 1e-8) -> FlowReport:
    """RK4 for ``dF/dt = L_t F`` with ``F_{t0,t0} = 1`` plus per-time Choi diagnostics."""
    d2 = m.d * m.d
    dt = grid.dt
    F = np.eye(d2, dtype=complex)
    flows = np.empty((grid.n_steps + 1, d2, d2), dtype=complex)
    flows[0] = F
    one = qops.reshape(np.eye(m.d))
    for k, (t, L1, L2, L3) in enumerate(_rk4_generators(m, grid, w_max)):
        k1 = L1 @ F
        k2 = L2 @ (F + dt / 2 * k1)
        k3 = L2 @ (F + dt / 2 * k2)
        k4 = L3 @ (F + dt * k3)
        F = F + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if np.max(np.abs(one @ F - one)) > tp_tol:
            raise StepTooCoarse(f"step size too coarse: flow not trace preserving at t={t + dt!r}")
        flows[k + 1] = F
    spectra = np.empty((len(flows), d2))
    flags = np.empty(len(flows), dtype=bool)
    kraus = [] if with_kraus else None
    for k, Fk in enumerate(flows):
        rep = qops.choi_spectrum(Fk, cp_tol=cp_tol)
        spectra[k] = rep.eigenvalues
        flags[k] = rep.cp
        if with_kraus:
            kraus.append(qops.kraus_decompose(Fk))
    return FlowReport(grid.times, flows, spectra, flags, kraus)


def expectation(rhos: np.ndarray, O: np.ndarray) -> np.ndarray:
    """Real part of ``Tr(rho O)`` for a stack of density matrices."""
    return np.real(np.einsum("kij,ji->k", rhos, O))
