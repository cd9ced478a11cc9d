"""Gaussian unraveling for a system linearly coupled to a bosonic environment.

The environment is a finite list of modes ``(omega_n, g_n)`` at inverse
temperature ``beta``; the system couples through ``g_n L a_n^+ + conj(g_n) L^+ a_n``.
Writing ``L = (X + iY)/sqrt(2)`` with Hermitian ``X = (L + L^+)/sqrt(2)`` and
``Y = (L - L^+)/(sqrt(2) i)``, the reduced state is

    rho_t = E[ phi_t phid_t^T ],
    phi'  = (-iH   + a_X X   + a_Y Y  ) phi,    phi(0)  = psi0,
    phid' = (+iH^T + b_X X^T + b_Y Y^T) phid,   phid(0) = conj(psi0),

with complex Gaussian coefficients built from two C^2-valued processes
``zeta^1, zeta^2`` (one per Hermitian component) and a C^4-valued process
``eta`` carrying the X-Y interference:

    a_X = i/sqrt2 gamma_1 + i sqrt2 eta_1,    b_X = -i/sqrt2 gammad_1 - i sqrt2 eta_2,
    a_Y = i/sqrt2 gamma_2 + i sqrt2 eta_3,    b_Y = -i/sqrt2 gammad_2 - i sqrt2 eta_4,

where ``gamma_i = zeta^i_1 + conj(zeta^i_2)`` and ``gammad_i = conj(zeta^i_1) + zeta^i_2``.
Only the holomorphic second moments of ``(a, b)`` enter, so any proper
(``E[z z^T] = 0``) part added to ``eta`` is irrelevant.

When the augmented covariance of ``zeta`` is not positive semi-definite, a
PSD block ``D`` can be added to its proper covariance and compensated by an
independent proper process ``nu`` of covariance ``D`` entering both equations
with an imaginary prefactor (``gamma += i (nu_1 + conj(nu_2))`` and
``gammad += i (conj(nu_1) + nu_2)``); the holomorphic moments are unchanged.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import qops
from ._ensemble import run_blocks, trajectory_rng, tree_sum
from .oracle import TimeGrid

INF = "inf"
PSD_TOL = 1e-6
EPS_LADDER = (0.0, 1e-12, 1e-10, 1e-8)
BLOWUP = 1e150

CONVENTIONS = {
    "X": "(L + L^+)/sqrt(2)",
    "Y": "(L - L^+)/(sqrt(2) i)",
    "forward_generator": "-iH + a_X X + a_Y Y",
    "dual_generator": "+iH^T + b_X X^T + b_Y Y^T",
    "dual_initial_state": "conj(psi0)",
    "estimator": "E[phi phid^T]",
    "zeta_prefactor": "forward i/sqrt(2), dual -i/sqrt(2)",
    "eta_prefactor": "forward i*sqrt(2), dual -i*sqrt(2)",
    "eta_components": "eta1: X forward, eta2: X dual, eta3: Y forward, eta4: Y dual",
    "noise_discretization": "piecewise constant per grid step",
}


class CovarianceNotPSD(ArithmeticError):
    def __init__(self, min_eig: float, tol: float):
        super().__init__(f"covariance not approximately PSD: min eigenvalue {min_eig:.6g} "
                         f"(tolerance {tol:.3g})")
        self.min_eig = min_eig


@dataclass(frozen=True)
class BosonEnvironment:
    modes: tuple  # ((omega, g complex), ...)
    beta: float | str = INF
    L: np.ndarray = field(default_factory=lambda: qops.SIGMA_MINUS.copy())

    def __post_init__(self):
        if len(self.modes) < 1:
            raise ValueError("environment needs at least one mode")
        if self.beta != INF:
            b = float(self.beta)
            if not b > 0:
                raise ValueError("inverse temperature must be positive or 'inf'")
            for om, _ in self.modes:
                if not om > 0:
                    raise ValueError("finite temperature requires positive mode frequencies")

    @property
    def vacuum(self) -> bool:
        return self.beta == INF


def kernel_functions(env: BosonEnvironment, tau):
    """Environment correlation functions ``(f1, f2)`` at lags ``tau``.

    ``f1 = sum |g|^2 e^{-i w tau} / (1 - e^{-beta w})`` and
    ``f2 = sum |g|^2 e^{-i w tau} e^{-beta w} / (1 - e^{-beta w})``; at
    ``beta = inf`` the denominator is 1 and ``f2`` vanishes.
    """
    tau = np.asarray(tau, dtype=float)
    f1 = np.zeros(tau.shape, dtype=complex)
    f2 = np.zeros(tau.shape, dtype=complex)
    for om, g in env.modes:
        ph = abs(complex(g)) ** 2 * np.exp(-1j * om * tau)
        if env.vacuum:
            f1 += ph
            continue
        x = float(env.beta) * om
        if x <= 0:
            raise ValueError("beta * omega must be positive")
        nb = 1.0 / math.expm1(x)  # e^{-x}/(1 - e^{-x})
        f1 += ph * (1.0 + nb)
        f2 += ph * nb
    return f1, f2


def _heaviside(x, at_zero):
    return np.where(x > 0, 1.0, np.where(x < 0, 0.0, at_zero))


@dataclass
class KernelTable:
    times: np.ndarray  # noise sample times (step midpoints)
    f1: np.ndarray  # (n, n) at t - s
    f2: np.ndarray
    K11: np.ndarray
    K12: np.ndarray
    K21: np.ndarray
    K22: np.ndarray
    equal_time: str

    @property
    def S(self) -> np.ndarray:
        return np.real((self.K11 + self.K22.conj()) / 2)

    @property
    def A(self) -> np.ndarray:
        return 1j * np.imag((self.K11 + self.K22.conj()) / 2)

    @property
    def f(self) -> np.ndarray:
        return (self.f1.conj() + self.f2) / 2


def assemble_kernel_matrix(env: BosonEnvironment, grid: TimeGrid, equal_time: str = "one_sided"
                           ) -> KernelTable:
    """Time-ordered kernel blocks on the noise grid (one sample per step).

    ``equal_time="one_sided"`` uses Heaviside values 0 and 1 at zero lag for the
    two superscripts; ``"midpoint"`` uses 1/2 for both, which halves the
    equal-time discretization error.
    """
    if equal_time == "one_sided":
        h0, h1 = 0.0, 1.0
    elif equal_time == "midpoint":
        h0 = h1 = 0.5
    else:
        raise ValueError(f"unknown equal-time convention {equal_time!r}")
    t = grid.times[:-1] + grid.dt / 2
    tau = t[:, None] - t[None, :]
    f1, f2 = kernel_functions(env, tau)
    K11 = -_heaviside(tau, h0) * f1 - _heaviside(-tau, h1) * f2
    K22 = -_heaviside(tau, h1) * f2 - _heaviside(-tau, h0) * f1
    return KernelTable(t, f1, f2, K11, f2.copy(), f1.copy(), K22, equal_time)


def _tmap(m: int) -> np.ndarray:
    I = np.eye(m)
    return np.block([[I, 1j * I], [I, -1j * I]]) / math.sqrt(2)


def augmented(Z: np.ndarray, R: np.ndarray) -> np.ndarray:
    return np.block([[Z, R], [R.conj(), Z.conj()]])


def real_form(Z: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Covariance of ``(Re, Im) * sqrt(2)`` coordinates: ``T^+ [[Z, R], [conj R, conj Z]] T``."""
    T = _tmap(Z.shape[0])
    C = T.conj().T @ augmented(Z, R) @ T
    C = np.real(C)
    return (C + C.T) / 2


def takagi_factor(P: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
    """``W`` with ``W @ W.T = P`` for complex symmetric ``P``.

    Uses the real symmetric embedding ``[[Re P, Im P], [Im P, -Re P]]``: an
    eigenvector ``(x, y)`` with eigenvalue ``s > 0`` gives ``P conj(w) = s w``
    for ``w = x + i y``.
    """
    P = (P + P.T) / 2
    X, Y = P.real, P.imag
    M = np.block([[X, Y], [Y, -X]])
    ev, V = np.linalg.eigh(M)
    m = P.shape[0]
    top = float(np.max(np.abs(ev))) if ev.size else 0.0
    keep = ev > rel_tol * max(top, 1e-300)
    return (V[:m, keep] + 1j * V[m:, keep]) * np.sqrt(ev[keep])


@dataclass
class AugmentedCovariance:
    n: int
    Z: np.ndarray  # (2n, 2n) proper covariance of zeta, ordering [zeta_1(t), zeta_2(t)]
    R: np.ndarray  # (2n, 2n) complementary covariance
    I: np.ndarray  # (4n, 4n) complementary covariance of eta, ordering [eta_1..eta_4](t)
    eps: float
    min_eig: float  # of the real augmented matrix before any correction
    max_diag: float
    floored: float  # magnitude of eigenvalues floored to zero
    D: np.ndarray | None = None  # compensated proper regularization, if active
    chol: np.ndarray = field(default=None, repr=False)  # real-form factor for zeta
    eta_factor: np.ndarray = field(default=None, repr=False)
    reg_factor: np.ndarray = field(default=None, repr=False)

    @property
    def regularized(self) -> bool:
        return self.D is not None

    def flags(self) -> dict:
        return {"min_eigenvalue": self.min_eig, "eps": self.eps, "floored": self.floored,
                "compensated_regularization": self.regularized,
                "regularization_trace": float(np.trace(self.D).real) if self.D is not None else 0.0}


def interference_block(table: KernelTable) -> np.ndarray:
    """Complementary covariance of ``eta`` from the interference kernel, scaled by ``1/(4i)``."""
    n = len(table.times)
    K11, K12, K21, K22 = table.K11, table.K12, table.K21, table.K22
    blocks = [[K11 - K22.conj(), -K12 + K21.conj()],
              [K12.conj() - K21, -K11.conj() + K22]]
    P = np.zeros((4 * n, 4 * n), dtype=complex)
    for i in range(2):
        for j in range(2):
            Bij = blocks[i][j] / 4j
            P[i * n:(i + 1) * n, (2 + j) * n:(3 + j) * n] = Bij
            P[(2 + j) * n:(3 + j) * n, i * n:(i + 1) * n] = Bij.T
    return P


def _cholesky_ladder(C: np.ndarray, scale: float):
    if scale == 0 and not np.any(C):
        return np.zeros_like(C), 0.0
    for e in EPS_LADDER:
        try:
            return np.linalg.cholesky(C + e * scale * np.eye(len(C))), e * scale
        except np.linalg.LinAlgError:
            continue
    raise AssertionError("Cholesky failed after flooring")


def build_augmented_covariance(table: KernelTable, psd_tol: float = PSD_TOL,
                               regularize: bool = False) -> AugmentedCovariance:
    """Assemble proper, complementary and interference covariances and factor them.

    Small negative eigenvalues (within ``psd_tol`` times the largest diagonal
    entry) are floored.  Larger violations raise :class:`CovarianceNotPSD`
    unless ``regularize`` is set, in which case the compensated proper
    regularization described in the module docstring is used.
    """
    n = len(table.times)
    f, S, A = table.f, table.S, table.A
    Zb = np.block([[f, -S], [-S, f.conj()]])
    Zb = (Zb + Zb.conj().T) / 2
    O = np.zeros_like(A)
    Rb = np.block([[-A, O], [O, A]])
    Rb = (Rb + Rb.T) / 2
    C = real_form(Zb, Rb)
    ev, V = np.linalg.eigh(C)
    max_diag = float(np.max(np.diag(C)))
    min_eig = float(ev[0])
    tol = psd_tol * max_diag
    D = None
    floored = 0.0
    if min_eig >= -tol:
        floored = float(-np.sum(np.minimum(ev, 0)))
        Cf = (V * np.maximum(ev, 0)) @ V.T
        chol, eps = _cholesky_ladder((Cf + Cf.T) / 2, max_diag)
        reg_factor = None
    elif regularize:
        aug = augmented(Zb, Rb)
        ea, Va = np.linalg.eigh((aug + aug.conj().T) / 2)
        neg = (Va * np.minimum(ea, 0)) @ Va.conj().T
        D = -2 * neg[:2 * n, :2 * n]
        D = (D + D.conj().T) / 2
        Cr = real_form(Zb + D, Rb)
        er, Vr = np.linalg.eigh(Cr)
        floored = float(-np.sum(np.minimum(er, 0)))
        Cr = (Vr * np.maximum(er, 0)) @ Vr.T
        chol, eps = _cholesky_ladder((Cr + Cr.T) / 2, max_diag)
        ed, Vd = np.linalg.eigh(D)
        reg_factor = Vd * np.sqrt(np.maximum(ed, 0))
    else:
        raise CovarianceNotPSD(min_eig, tol)
    P = interference_block(table)
    return AugmentedCovariance(n, Zb, Rb, P, eps, min_eig, max_diag, floored, D, chol,
                               takagi_factor(P), reg_factor)


@dataclass
class GaussianDraws:
    zeta1: np.ndarray  # (B, 2, n)
    zeta2: np.ndarray
    eta: np.ndarray  # (B, 4, n)
    nu1: np.ndarray | None = None  # (B, 2, n) compensating proper processes
    nu2: np.ndarray | None = None

    @property
    def gamma1(self) -> np.ndarray:
        return self.zeta1[:, 0] + self.zeta1[:, 1].conj()

    @property
    def gamma2(self) -> np.ndarray:
        return self.zeta2[:, 0] + self.zeta2[:, 1].conj()

    def coefficients(self):
        """Forward ``(a_X, a_Y)`` and dual ``(b_X, b_Y)`` coefficient paths, each (B, n)."""
        kf, kb = 1j / math.sqrt(2), -1j / math.sqrt(2)
        ef, eb = 1j * math.sqrt(2), -1j * math.sqrt(2)
        out = []
        for z, nu, ef_i, eb_i in ((self.zeta1, self.nu1, 0, 1), (self.zeta2, self.nu2, 2, 3)):
            g = z[:, 0] + z[:, 1].conj()
            gd = z[:, 0].conj() + z[:, 1]
            if nu is not None:
                g = g + 1j * (nu[:, 0] + nu[:, 1].conj())
                gd = gd + 1j * (nu[:, 0].conj() + nu[:, 1])
            out.append((kf * g + ef * self.eta[:, ef_i], kb * gd + eb * self.eta[:, eb_i]))
        (aX, bX), (aY, bY) = out
        return aX, aY, bX, bY


def sample_processes(cov: AugmentedCovariance, rng, n_draws: int, eta_proper=None) -> GaussianDraws:
    """Draw ``n_draws`` realizations using a single generator ``rng``.

    ``eta_proper`` optionally adds a proper part to ``eta``: a scalar ``s``
    (white, variance ``s^2``) or a (4n, 4n) PSD matrix.
    """
    return _draw_rows(cov, [rng], n_draws, eta_proper, shared=True)


def _draw_rows(cov: AugmentedCovariance, gens, n_draws, eta_proper, shared=False) -> GaussianDraws:
    n = cov.n
    m = 2 * n
    r_eta = cov.eta_factor.shape[1]
    r_reg = cov.reg_factor.shape[1] if cov.reg_factor is not None else 0
    matrix_q = eta_proper is not None and np.ndim(eta_proper) != 0
    # standard normals per draw, in a fixed order: zeta^1, zeta^2, eta, eta proper, nu^1, nu^2
    widths = [2 * m, 2 * m, r_eta, 8 * n if eta_proper is not None else 0, 2 * r_reg, 2 * r_reg]
    edges = np.cumsum([0] + widths)
    xi = np.empty((n_draws, edges[-1]))
    for k in range(n_draws):
        xi[k] = (gens[0] if shared else gens[k]).standard_normal(edges[-1])
    part = [xi[:, edges[i]:edges[i + 1]] for i in range(len(widths))]
    zs = []
    for x in part[:2]:
        y = x @ cov.chol.T
        zs.append(((y[:, :m] + 1j * y[:, m:]) / math.sqrt(2)).reshape(n_draws, 2, n))
    eta = part[2] @ cov.eta_factor.T
    if eta_proper is not None:
        w = part[3]
        prop = (w[:, :4 * n] + 1j * w[:, 4 * n:]) / math.sqrt(2)
        if matrix_q:
            Lq = np.linalg.cholesky(np.asarray(eta_proper) + 1e-14 * np.eye(4 * n))
            eta = eta + prop @ Lq.T
        else:
            eta = eta + float(eta_proper) * prop
    nus = [None, None]
    if r_reg:
        for i, x in enumerate(part[4:]):
            prop = (x[:, :r_reg] + 1j * x[:, r_reg:]) / math.sqrt(2)
            nus[i] = (prop @ cov.reg_factor.T).reshape(n_draws, 2, n)
    return GaussianDraws(zs[0], zs[1], eta.reshape(n_draws, 4, n), nus[0], nus[1])


def _hermitian_parts(L):
    L = np.asarray(L, dtype=complex)
    X = (L + L.conj().T) / math.sqrt(2)
    Y = (L - L.conj().T) / (math.sqrt(2) * 1j)
    return X, Y


def run_dgs_pair(H, L, psi0, draws: GaussianDraws, grid: TimeGrid):
    """Integrate forward and dual equations for every draw; returns ``(phi, phid)`` of shape (B, T, d)."""
    H = np.asarray(H, dtype=complex)
    X, Y = _hermitian_parts(L)
    aX, aY, bX, bY = draws.coefficients()
    B, n = aX.shape
    d = H.shape[0]
    h = grid.dt
    phi = np.empty((B, n + 1, d), dtype=complex)
    phd = np.empty((B, n + 1, d), dtype=complex)
    phi[:, 0] = np.asarray(psi0, dtype=complex)
    phd[:, 0] = np.conj(psi0)
    for k in range(n):
        G = -1j * H[None] + aX[:, k, None, None] * X[None] + aY[:, k, None, None] * Y[None]
        Gd = 1j * H.T[None] + bX[:, k, None, None] * X.T[None] + bY[:, k, None, None] * Y.T[None]
        phi[:, k + 1] = _rk4_const(G, phi[:, k], h)
        phd[:, k + 1] = _rk4_const(Gd, phd[:, k], h)
    big = (np.abs(phi).max(axis=(1, 2)) > BLOWUP) | (np.abs(phd).max(axis=(1, 2)) > BLOWUP)
    if np.any(big) or not (np.all(np.isfinite(phi)) and np.all(np.isfinite(phd))):
        raise ArithmeticError("Gaussian unraveling blow-up: path exceeded the overflow guard")
    return phi, phd


def _rk4_const(G, y, h):
    k1 = np.einsum("bij,bj->bi", G, y)
    k2 = np.einsum("bij,bj->bi", G, y + 0.5 * h * k1)
    k3 = np.einsum("bij,bj->bi", G, y + 0.5 * h * k2)
    k4 = np.einsum("bij,bj->bi", G, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


@dataclass
class PairSums:
    """Sums over draws of ``phi phid^T`` entries, their squared moduli and observables."""
    n: int
    s_rho: np.ndarray  # (T, d, d) complex
    s_re2: np.ndarray  # (T, d, d) sum of Re^2
    s_im2: np.ndarray
    s_o: np.ndarray  # (T, K) real parts of Tr(O phi phid^T)
    s_o2: np.ndarray
    s_tr: np.ndarray
    s_tr2: np.ndarray

    @classmethod
    def from_pairs(cls, phi, phd, observables):
        r = phi[:, :, :, None] * phd[:, :, None, :]
        o = np.stack([np.real(np.einsum("btij,ji->bt", r, O)) for O in observables], axis=2) \
            if observables else np.zeros(r.shape[:2] + (0,))
        tr = np.real(np.einsum("btii->bt", r))
        return cls(len(phi), r.sum(0), (r.real ** 2).sum(0), (r.imag ** 2).sum(0),
                   o.sum(0), (o * o).sum(0), tr.sum(0), (tr * tr).sum(0))

    def __add__(self, o: "PairSums") -> "PairSums":
        return PairSums(self.n + o.n, self.s_rho + o.s_rho, self.s_re2 + o.s_re2,
                        self.s_im2 + o.s_im2, self.s_o + o.s_o, self.s_o2 + o.s_o2,
                        self.s_tr + o.s_tr, self.s_tr2 + o.s_tr2)


@dataclass
class DGSEstimate:
    times: np.ndarray
    rho: np.ndarray
    rho_se_re: np.ndarray
    rho_se_im: np.ndarray
    obs_mean: np.ndarray
    obs_se: np.ndarray
    trace_mean: np.ndarray
    trace_se: np.ndarray
    n_trajectories: int
    kind: str = "dgs"
    info: dict = field(default_factory=dict)

    @property
    def hermiticity_defect(self) -> np.ndarray:
        return np.max(np.abs(self.rho - np.conj(np.swapaxes(self.rho, 1, 2))), axis=(1, 2))

    # aliases shared with the trajectory estimators
    @property
    def mu_mean(self):
        return self.trace_mean

    @property
    def mu_se(self):
        return self.trace_se


def _se(s1, s2, n):
    return np.sqrt(np.maximum(s2 - s1 * s1 / n, 0.0) / max(n - 1, 1) / n)


def estimate_dgs(sums: PairSums, times) -> DGSEstimate:
    N = sums.n
    if N < 2:
        raise ValueError("need at least two pairs")
    rho = sums.s_rho / N
    return DGSEstimate(np.asarray(times), rho, _se(sums.s_rho.real, sums.s_re2, N),
                       _se(sums.s_rho.imag, sums.s_im2, N), sums.s_o / N, _se(sums.s_o, sums.s_o2, N),
                       sums.s_tr / N, _se(sums.s_tr, sums.s_tr2, N), N)


def _dgs_block(start, stop, cov, H, L, psi0, grid, seed, observables, eta_proper):
    gens = [trajectory_rng(seed, i) for i in range(start, stop)]
    draws = _draw_rows(cov, gens, stop - start, eta_proper)
    phi, phd = run_dgs_pair(H, L, psi0, draws, grid)
    return PairSums.from_pairs(phi, phd, observables)


@dataclass
class DGSResult:
    cov: AugmentedCovariance
    table: KernelTable
    sums: PairSums
    grid: TimeGrid

    def estimate(self) -> DGSEstimate:
        est = estimate_dgs(self.sums, self.grid.times)
        est.info.update({"engine": "dgs", "equal_time": self.table.equal_time,
                         "conventions": CONVENTIONS, **self.cov.flags()})
        return est


def simulate(H, env: BosonEnvironment, psi0, grid: TimeGrid, n_traj: int = 1000, seed: int = 0,
             observables=None, equal_time: str = "one_sided", regularize: bool = True,
             eta_proper=None, workers=None, block: int = 1000,
             cov: AugmentedCovariance | None = None) -> DGSResult:
    """Sample ``n_traj`` pairs and accumulate the state estimate on ``grid``."""
    from .jump_engine import default_observables, normalize_state
    psi0 = normalize_state(psi0)
    H = np.asarray(H, dtype=complex)
    table = assemble_kernel_matrix(env, grid, equal_time)
    if cov is None:
        cov = build_augmented_covariance(table, regularize=regularize)
    if cov.regularized:
        warnings.warn(f"augmented covariance is indefinite (min eigenvalue {cov.min_eig:.3g}); "
                      "using compensated proper regularization", RuntimeWarning)
    if observables is None:
        observables = default_observables(H.shape[0])
    obs = [np.asarray(O, dtype=complex) for O in observables]
    parts = run_blocks(_dgs_block, (cov, H, env.L, psi0, grid, seed, obs, eta_proper),
                       n_traj, block, workers)
    return DGSResult(cov, table, tree_sum(parts), grid)


def environment_from_json(obj: dict) -> BosonEnvironment:
    from .model import parse_matrix
    modes = tuple((float(m["omega"]), complex(float(m.get("g_re", 0.0)), float(m.get("g_im", 0.0))))
                  for m in obj["modes"])
    beta = obj.get("beta", INF)
    if beta != INF:
        beta = float(beta)
    L = obj.get("L", "sigma_minus")
    return BosonEnvironment(modes, beta, parse_matrix(L))
