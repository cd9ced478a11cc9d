"""Jump unraveling of canonical master equations with signed couplings.

Trajectories live on the unit sphere and jump through channel ``l`` with
intensity ``r_l ||L_l psi||^2``.  A scalar weight ``mu`` (the influence
martingale) compensates for the difference between the rates ``r_l`` and the
couplings ``w_l``: between jumps ``d log mu = sum_l (r_l - w_l) ||L_l psi||^2 dt``
and at a jump ``mu -> mu * w_l / r_l``.  Then ``E[mu psi psi^+]`` solves the
master equation.

Channels are first completed so that ``sum_l L_l^+ L_l = g 1``; with rates
``r_l = w_l + c_t`` the compensator becomes ``g c_t``, independent of the state.

Implementation notes
--------------------
The rates depend on time only, so the no-jump propagator of the linear
equation ``phi' = (-iH - sum_l r_l L_l^+ L_l / 2) phi`` over each substep is a
single ``d x d`` matrix shared by every trajectory.  It is precomputed once
(one RK4 step per substep) and applied to whole blocks of trajectories.
Normalizing after each substep reproduces the nonlinear drift.  The no-jump
probability of a substep is the squared norm of the propagated vector; a
trajectory jumps when its uniform draw falls below ``1 - ||phi||^2``, the jump
time inside the substep is placed by inverting a linearly interpolated
cumulative hazard, and the remainder of the substep is simulated afresh.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import qops
from ._ensemble import (EnsembleEstimate, WeightedSums, estimate_from_sums,
                        observable_features, run_blocks, trajectory_rng, tree_sum)
from .model import CanonicalModel, ConstantCoupling, coupling_value
from .oracle import TimeGrid

ZERO_BRANCH_TOL = 1e-14
UNCAPPED_TOL = 1e-12


# ---------------------------------------------------------------------------
# policies and channel completion

@dataclass(frozen=True)
class RatePolicy:
    """Rate choice ``c_t = max(0, -min_l w_l) + c0`` and ``r_l = min(w_l + c_t, r_max)``.

    Couplings are clipped to ``[-w_max, w_max]`` before use (``w_max``
    defaults to ``r_max``).  ``c0 = "auto"`` means half the largest ``|w|``
    seen on the simulation grid.
    """
    c0: float | str = 0.5
    r_max: float = 1e3
    w_max: float | None = None
    mode: str = "floor_plus_margin"
    p_max: float = 0.1

    def __post_init__(self):
        if self.mode != "floor_plus_margin":
            raise ValueError(f"unknown rate policy mode {self.mode!r}")
        if self.c0 != "auto" and not (float(self.c0) >= 0):
            raise ValueError("c0 must be nonnegative")
        if not self.r_max > 0:
            raise ValueError("r_max must be positive")
        if not 0 < self.p_max < 1:
            raise ValueError("p_max must lie in (0, 1)")

    @property
    def clip(self) -> float:
        return float(self.w_max if self.w_max is not None else self.r_max)

    def resolve(self, couplings, times) -> "RatePolicy":
        if self.c0 != "auto":
            return self
        wmax = 0.0
        for t in times:
            for w in couplings:
                wmax = max(wmax, abs(coupling_value(w, t, self.clip)))
        return replace(self, c0=0.5 * wmax)


def choose_rates(w, policy: RatePolicy):
    """Return ``(c, r)`` for coupling values ``w`` (already clipped)."""
    w = np.asarray(w, dtype=float)
    c = max(0.0, -float(np.min(w))) + float(policy.c0)
    r = np.minimum(w + c, policy.r_max)
    if np.any(r < 0):
        raise AssertionError("negative rate produced by policy")
    return c, r


@dataclass(frozen=True)
class CompletedChannelSet:
    operators: tuple
    couplings: tuple
    tags: tuple  # "original" or "completion"
    g: float

    def coupling_values(self, t, w_max=None) -> np.ndarray:
        return np.array([coupling_value(w, t, w_max) for w in self.couplings])


def complete_channels(channels, d: int, uplift: float = 0.0,
                      tol: float = qops.CHANNEL_SUM_TOL) -> CompletedChannelSet:
    """Append zero-coupling channels so that ``sum_l L_l^+ L_l = g 1``.

    ``channels`` is a sequence of :class:`~unravel.model.Channel` or ``(L, w)``
    pairs.  If the deficiency is proportional to ``sum_l L_l L_l^+`` the
    adjoint operators are used (``sigma_-`` is completed by ``sigma_+``);
    otherwise the deficiency is factored through its eigendecomposition.
    """
    items = [(c.L, c.w) if hasattr(c, "L") else tuple(c) for c in channels]
    if not items:
        raise ValueError("empty channel list")
    ops = [np.asarray(L, dtype=complex) for L, _ in items]
    ws = [w if callable(w) else ConstantCoupling(float(w)) for _, w in items]
    for L in ops:
        if L.shape != (d, d):
            raise ValueError(f"channel operator has shape {L.shape}, expected {(d, d)}")
    rep = qops.check_channel_sum(ops, tol)
    if rep.proportional and uplift == 0:
        return CompletedChannelSet(tuple(ops), tuple(ws), ("original",) * len(ops), rep.g)
    g = rep.g + float(uplift)
    D = g * np.eye(d) - qops.channel_sum(ops)
    D = (D + D.conj().T) / 2
    extra = []
    LLd = sum(L @ L.conj().T for L in ops)
    nrm = np.trace(LLd).real
    kappa = np.trace(D).real / nrm if nrm > 0 else 0.0
    if kappa > 0 and np.max(np.abs(D - kappa * LLd)) <= tol * max(1.0, g):
        extra = [math.sqrt(kappa) * L.conj().T for L in ops if np.any(L != 0)]
    else:
        ev, V = np.linalg.eigh(D)
        for lam, v in zip(ev, V.T):
            if lam > tol:
                v = qops._fix_phase(v)
                extra.append(math.sqrt(lam) * np.outer(v, v.conj()))
    zero = ConstantCoupling(0.0)
    return CompletedChannelSet(tuple(ops + extra), tuple(ws + [zero] * len(extra)),
                               ("original",) * len(ops) + ("completion",) * len(extra), g)


# ---------------------------------------------------------------------------
# time-only quantities

class _Rates:
    """Clipped couplings, rates and no-jump generators as functions of time."""

    def __init__(self, model: CanonicalModel, cset: CompletedChannelSet, policy: RatePolicy):
        self.model = model
        self.cset = cset
        self.policy = policy
        self.ops = [np.asarray(L) for L in cset.operators]
        self.LdL = np.array([L.conj().T @ L for L in self.ops])
        self.opnorm2 = np.array([np.linalg.norm(L, 2) ** 2 for L in self.ops])
        self.d = model.d
        self._LdL_flat = self.LdL.reshape(len(self.ops), -1) if self.ops else None
        self._clip = policy.clip
        self._c0 = float(policy.c0)
        self._cache = {}

    def at(self, t: float):
        """``(w, r, c, A, uncapped)`` at time ``t``; ``A`` is the no-jump generator."""
        hit = self._cache.get(t)
        if hit is not None:
            return hit
        pol = self.policy
        wl = [coupling_value(w, t, self._clip) for w in self.cset.couplings]
        c = max(0.0, -min(wl)) + self._c0 if wl else 0.0
        rl = [min(x + c, pol.r_max) for x in wl]
        if any(x < 0 for x in rl):
            raise AssertionError("negative rate produced by policy")
        A = -1j * np.asarray(self.model.H(t), dtype=complex)
        if wl:
            A = A - 0.5 * (np.array(rl) @ self._LdL_flat).reshape(self.d, self.d)
        tol = UNCAPPED_TOL * max(1.0, c)
        uncapped = all(abs(y - x - c) <= tol for x, y in zip(wl, rl))
        out = (np.array(wl), np.array(rl), c, A, uncapped)
        if len(self._cache) > 4096:
            self._cache.clear()
        self._cache[t] = out
        return out

    def propagator(self, a: float, b: float) -> np.ndarray:
        """One RK4 step of ``K' = A(t) K`` from ``K(a) = 1`` to ``b``."""
        h = b - a
        I = np.eye(self.d, dtype=complex)
        A1, A2, A3 = self.at(a)[3], self.at(0.5 * (a + b))[3], self.at(b)[3]
        k1 = A1
        k2 = A2 @ (I + 0.5 * h * k1)
        k3 = A2 @ (I + 0.5 * h * k2)
        k4 = A3 @ (I + h * k3)
        return I + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    def comp_scalar(self, a: float, b: float):
        """``g * int_a^b c dt`` by Simpson's rule, or ``None`` if a rate is capped."""
        na, nm, nb = self.at(a), self.at(0.5 * (a + b)), self.at(b)
        if not (na[4] and nm[4] and nb[4]):
            return None
        return self.cset.g * (b - a) / 6 * (na[2] + 4 * nm[2] + nb[2])

    def comp_density(self, t: float, psi: np.ndarray) -> np.ndarray:
        """``sum_l (r_l - w_l) ||L_l psi||^2 / ||psi||^2`` for rows of ``psi``."""
        w, r, _, _, _ = self.at(t)
        num = np.einsum("bi,lij,bj->bl", psi.conj(), self.LdL, psi).real
        return (num @ (r - w)) / np.einsum("bi,bi->b", psi.conj(), psi).real

    def comp_segment(self, a: float, b: float, psi_a: np.ndarray, K_am=None, K_ab=None):
        """Log compensator over ``[a, b]`` for rows ``psi_a`` (shape (B, d))."""
        s = self.comp_scalar(a, b)
        if s is not None:
            return np.full(len(psi_a), s)
        m = 0.5 * (a + b)
        if K_am is None:
            K_am = self.propagator(a, m)
        if K_ab is None:
            K_ab = self.propagator(a, b)
        q = (self.comp_density(a, psi_a) + 4 * self.comp_density(m, psi_a @ K_am.T)
             + self.comp_density(b, psi_a @ K_ab.T))
        return (b - a) / 6 * q


@dataclass
class JumpPlan:
    """Substep layout and shared propagators for one (model, policy, grid)."""
    grid: TimeGrid
    policy: RatePolicy
    cset: CompletedChannelSet
    sub_a: np.ndarray  # substep starts
    sub_b: np.ndarray  # substep ends
    step_of: np.ndarray  # grid step index of each substep
    K: np.ndarray  # (J, d, d)
    Kh: np.ndarray  # (J, d, d) half-substep propagators
    comp: np.ndarray  # (J,) scalar log compensator, nan where capped
    rates: _Rates = field(repr=False, default=None)

    @property
    def n_sub(self) -> int:
        return len(self.sub_a)

    def node_times(self) -> np.ndarray:
        return np.concatenate([self.sub_a, self.sub_b[-1:]])


def make_plan(model: CanonicalModel, grid: TimeGrid, policy: RatePolicy,
              cset: CompletedChannelSet | None = None) -> JumpPlan:
    if cset is None:
        cset = complete_channels(model.channels, model.d) if model.channels else \
            CompletedChannelSet((), (), (), 0.0)
    policy = policy.resolve(cset.couplings, grid.times)
    R = _Rates(model, cset, policy)
    dt = grid.dt
    a_list, b_list, k_list = [], [], []
    for k, t in enumerate(grid.times[:-1]):
        bound = 0.0
        for s in np.linspace(t, t + dt, 9):
            bound = max(bound, float(R.at(float(s))[1] @ R.opnorm2) if len(R.ops) else 0.0)
        n = max(1, int(math.ceil(dt * bound / policy.p_max - 1e-12)))
        edges = t + dt * np.arange(n + 1) / n
        edges[-1] = grid.times[k + 1]
        a_list.append(edges[:-1])
        b_list.append(edges[1:])
        k_list.append(np.full(n, k))
    sub_a = np.concatenate(a_list)
    sub_b = np.concatenate(b_list)
    J = len(sub_a)
    K = np.empty((J, model.d, model.d), dtype=complex)
    Kh = np.empty_like(K)
    comp = np.empty(J)
    for j in range(J):
        a, b = float(sub_a[j]), float(sub_b[j])
        K[j] = R.propagator(a, b)
        Kh[j] = R.propagator(a, 0.5 * (a + b))
        s = R.comp_scalar(a, b)
        comp[j] = np.nan if s is None else s
    return JumpPlan(grid, policy, cset, sub_a, sub_b, np.concatenate(k_list), K, Kh, comp, R)


# ---------------------------------------------------------------------------
# simulation

@dataclass
class TrajectoryPath:
    times: np.ndarray
    psi: np.ndarray  # (T, d)
    mu: np.ndarray  # (T,)
    jumps: list  # (time, channel index)


def _hazard_time(a, b, u, p):
    # invert a cumulative hazard that is linear on [a, b] with total -log(1 - p)
    return a + (b - a) * math.log1p(-u) / math.log1p(-p)


def _jump_row(R: _Rates, a: float, b: float, psi: np.ndarray, u: float, p: float, gen,
              record: list):
    """Simulate one trajectory over ``[a, b]`` given that it jumps before ``b``.

    Returns ``(psi_b, factor)`` with ``factor`` the multiplicative change of
    the weight over the substep.  A jump through a zero-coupling channel
    returns immediately with ``factor = 0``.
    """
    factor = 1.0
    while True:
        tau = min(max(_hazard_time(a, b, u, p), a), b)
        x = psi[None, :]
        K_at = R.propagator(a, tau) if tau > a else None
        if K_at is not None:
            x = x @ K_at.T
        x = x[0] / np.linalg.norm(x[0])
        w, r, _, _, _ = R.at(tau)
        branch = np.array([np.vdot(L @ x, L @ x).real for L in R.ops]) * r
        tot = branch.sum()
        cum = np.cumsum(branch)
        if tot > 0:
            while True:
                l = min(int(np.searchsorted(cum, gen.random() * tot, side="right")), len(branch) - 1)
                if branch[l] > 0 and np.linalg.norm(R.ops[l] @ x) >= ZERO_BRANCH_TOL:
                    break
            record.append((tau, l))
            if w[l] == 0.0:
                return x, 0.0
            y = R.ops[l] @ x
            new_psi = y / np.linalg.norm(y)
            jump_factor = w[l] / r[l]
        else:
            new_psi, jump_factor = x, 1.0
        if K_at is not None:
            factor *= math.exp(R.comp_segment(a, tau, psi[None, :], K_ab=K_at)[0])
        factor *= jump_factor
        psi = new_psi
        if tau >= b:
            return psi, factor
        a = tau
        K_ab = R.propagator(a, b)
        y = K_ab @ psi
        p = 1.0 - float(np.vdot(y, y).real)
        u = gen.random()
        if u >= p:
            factor *= math.exp(R.comp_segment(a, b, psi[None, :], K_ab=K_ab)[0])
            return y / np.linalg.norm(y), factor


COMPACT_FRACTION = 0.25


def _simulate_block(start: int, stop: int, plan: JumpPlan, psi0: np.ndarray, seed,
                    obs_feat: np.ndarray, keep_paths: bool, gens=None) -> WeightedSums:
    """Simulate trajectories ``start..stop-1`` and return their sums.

    A trajectory whose weight hits zero stays at zero forever and no longer
    influences any estimate; such rows are frozen and, unless full paths are
    kept, dropped from the working arrays.
    """
    R = plan.rates
    d = len(psi0)
    B = stop - start
    T = plan.grid.n_steps + 1
    if gens is None:
        gens = [trajectory_rng(seed, i) for i in range(start, stop)]
    J = plan.n_sub
    U = np.empty((J, B))
    for i, gen in enumerate(gens):
        U[:, i] = gen.random(J)
    rows = np.arange(B)  # block-local index of each working row
    psi = np.tile(np.asarray(psi0, dtype=complex), (B, 1))
    mu = np.ones(B)
    alive = np.ones(B, dtype=bool)
    njumps = np.zeros(B)
    frozen_jumps = 0.0
    records = [[] for _ in range(B)]
    S = WeightedSums.zeros(T, d, obs_feat.shape[1])
    S.n = B
    if keep_paths:
        P_psi = np.empty((B, T, d), dtype=complex)
        P_mu = np.empty((B, T))
        P_psi[:, 0], P_mu[:, 0] = psi, mu
    final_mu = np.zeros(B)
    S.add(0, mu, psi, obs_feat, njumps)
    for j in range(J):
        a, b = float(plan.sub_a[j]), float(plan.sub_b[j])
        phi = psi @ plan.K[j].T
        n2 = np.einsum("bi,bi->b", phi.conj(), phi).real
        p = 1.0 - n2
        jump = (U[j] < p) & alive
        if np.isnan(plan.comp[j]):
            logc = R.comp_segment(a, b, psi, plan.Kh[j], plan.K[j])
        else:
            logc = plan.comp[j]
        new_psi = phi / np.sqrt(n2)[:, None]
        new_mu = np.where(alive, mu * np.exp(logc), mu)
        for i in np.nonzero(jump)[0]:
            i0 = rows[i]
            rec = records[i0]
            n_before = len(rec)
            psi_b, fac = _jump_row(R, a, b, psi[i], float(U[j, i]), float(p[i]), gens[i0], rec)
            new_psi[i] = psi_b
            new_mu[i] = mu[i] * fac
            njumps[i] += len(rec) - n_before
            if new_mu[i] == 0.0:
                alive[i] = False
        psi, mu = new_psi, new_mu
        if j == J - 1 or plan.step_of[j + 1] != plan.step_of[j]:
            k = plan.step_of[j] + 1
            S.add(k, mu, psi, obs_feat, njumps)
            S.s_jumps[k] += frozen_jumps
            if keep_paths:
                P_psi[:, k], P_mu[:, k] = psi, mu
            elif j < J - 1 and np.count_nonzero(~alive) > COMPACT_FRACTION * len(rows):
                frozen_jumps += float(njumps[~alive].sum())
                U, rows, psi, mu, njumps = U[:, alive], rows[alive], psi[alive], mu[alive], njumps[alive]
                alive = alive[alive]
    final_mu[rows] = mu
    jt, jtime, jch = [], [], []
    for i, rec in enumerate(records):
        for tau, l in rec:
            jt.append(start + i)
            jtime.append(tau)
            jch.append(l)
    S.extra = {"final_mu": final_mu, "jump_traj": np.array(jt, dtype=np.int64),
               "jump_time": np.array(jtime, dtype=float), "jump_channel": np.array(jch, dtype=np.int64)}
    if keep_paths:
        S.extra["paths_psi"] = P_psi
        S.extra["paths_mu"] = P_mu
    return S


@dataclass
class JumpResult:
    plan: JumpPlan
    sums: WeightedSums
    n_traj: int
    seed: int

    def estimate(self, kind: str = "normalized") -> EnsembleEstimate:
        est = estimate_from_sums(self.plan.grid.times, self.sums, kind)
        est.info.update(self.info())
        return est

    def info(self) -> dict:
        p = self.plan.policy
        return {"engine": "jump", "c0": p.c0, "r_max": p.r_max, "w_max": p.clip, "p_max": p.p_max,
                "g": self.plan.cset.g, "n_substeps": self.plan.n_sub,
                "completion_channels": self.plan.cset.tags.count("completion")}

    @property
    def final_mu(self) -> np.ndarray:
        return self.sums.extra["final_mu"]

    def jumps_of(self, i: int) -> list:
        e = self.sums.extra
        sel = e["jump_traj"] == i
        return list(zip(e["jump_time"][sel], e["jump_channel"][sel]))


def normalize_state(psi0) -> np.ndarray:
    psi0 = np.asarray(psi0, dtype=complex)
    n = np.linalg.norm(psi0)
    if abs(n - 1) > 1e-10:
        raise ValueError(f"initial state must have unit norm, got {n}")
    return psi0


def simulate(model: CanonicalModel, psi0, grid: TimeGrid, policy: RatePolicy = RatePolicy(),
             n_traj: int = 1000, seed: int = 0, observables=None, workers=None,
             block: int = 2000, keep_paths: bool = False, plan: JumpPlan | None = None
             ) -> JumpResult:
    """Run ``n_traj`` jump trajectories and return their merged sums."""
    psi0 = normalize_state(psi0)
    if plan is None:
        plan = make_plan(model, grid, policy)
    if observables is None:
        observables = default_observables(model.d)
    feat = observable_features(observables, model.d)
    parts = run_blocks(_simulate_block, (plan, psi0, seed, feat, keep_paths), n_traj, block, workers)
    return JumpResult(plan, tree_sum(parts), n_traj, seed)


def run_trajectory(cset: CompletedChannelSet, H, psi0, grid: TimeGrid, policy: RatePolicy,
                   rng: np.random.Generator) -> TrajectoryPath:
    """Single trajectory driven by ``rng``; ``H`` is a matrix or a callable of time."""
    from .model import make_model
    model = make_model(H, list(zip(cset.operators, cset.couplings)))
    plan = make_plan(model, grid, policy, cset)
    S = _simulate_block(0, 1, plan, normalize_state(psi0), None, observable_features([], model.d),
                        True, gens=[rng])
    jumps = list(zip(S.extra["jump_time"].tolist(), S.extra["jump_channel"].tolist()))
    return TrajectoryPath(grid.times, S.extra["paths_psi"][0], S.extra["paths_mu"][0], jumps)


def estimate_state(result: JumpResult, kind: str = "normalized") -> EnsembleEstimate:
    return result.estimate(kind)


def default_observables(d: int) -> list:
    if d == 2:
        return [qops.SIGMA_X, qops.SIGMA_Y, qops.SIGMA_Z]
    return qops.gell_mann_diagonal(d)


def factorization_log_weight(plan: JumpPlan, jumps: list, t_end: float | None = None):
    """Recompute ``mu`` from ``exp(g int c) * prod(w/r)`` along one path.

    The compensator integral uses Simpson's rule on the substep grid refined
    by the jump times, the same node set the simulation visits.  Returns
    ``(sign, log|mu|)``; ``sign`` is 0 when a factor vanished.
    """
    R = _Rates(plan.rates.model, plan.cset, plan.policy)
    nodes = plan.node_times()
    if t_end is not None:
        nodes = nodes[nodes <= t_end + 1e-15]
    jt = [float(t) for t, _ in jumps]
    pts = np.union1d(nodes, np.array(jt)) if jt else nodes
    logc = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        if b <= a:
            continue
        m = 0.5 * (a + b)
        logc += plan.cset.g * (b - a) / 6 * (R.at(a)[2] + 4 * R.at(m)[2] + R.at(b)[2])
    sign, logj = 1.0, 0.0
    for t, l in jumps:
        w, r, _, _, _ = R.at(float(t))
        f = w[int(l)] / r[int(l)]
        if f == 0:
            return 0.0, -np.inf
        sign *= math.copysign(1.0, f)
        logj += math.log(abs(f))
    return sign, logc + logj
