"""Linear ("ostensible") unraveling with state-independent Poisson jumps.

Unnormalized vectors evolve with ``phi' = A_t phi`` where

    A_t = -iH - sum_l (w_l L_l^+ L_l - r_l 1) / 2,

and channel ``l`` fires at the state-independent rate ``r_l(t)``; a jump maps
``phi -> L_l phi`` and multiplies the scalar ``lambda`` by ``w_l / r_l``.
The mean of ``lambda phi phi^+`` solves the master equation, while individual
paths preserve the trace only on average.

Jump times are drawn exactly (up to quadrature of the rates) before the
evolution by inverting the cumulative rate, so the only discretization error
comes from RK4.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._ensemble import (EnsembleEstimate, WeightedSums, estimate_from_sums, observable_features,
                        run_blocks, trajectory_rng, tree_sum)
from .model import CanonicalModel, coupling_value
from .oracle import TimeGrid

BLOWUP = 1e150
SE_TRACE_WARN = 0.2


class OstensibleBlowUp(ArithmeticError):
    pass


@dataclass(frozen=True)
class OstensibleRates:
    """Rate policy for the linear unraveling.

    ``floor_plus_margin``: ``r_l = w_l + max(0, -min_k w_k) + c0``;
    ``absolute``: ``r_l = |w_l| + c0``; ``constant``: ``r_l = c0``, independent
    of the couplings.  Couplings are clipped to ``w_max`` and rates capped at
    ``r_max``.
    """
    mode: str = "floor_plus_margin"
    c0: float = 0.5
    r_max: float = 1e3
    w_max: float | None = None

    def __post_init__(self):
        if self.mode not in ("floor_plus_margin", "absolute", "constant"):
            raise ValueError(f"unknown ostensible rate mode {self.mode!r}")
        if not self.c0 >= 0:
            raise ValueError("c0 must be nonnegative")
        if self.mode == "constant" and not self.c0 > 0:
            raise ValueError("constant rate policy needs c0 > 0")

    @property
    def clip(self) -> float:
        return float(self.w_max if self.w_max is not None else self.r_max)

    def rates(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if self.mode == "absolute":
            r = np.abs(w) + self.c0
        elif self.mode == "constant":
            r = np.full(w.shape, float(self.c0))
        else:
            r = w + max(0.0, -float(np.min(w))) + self.c0 if len(w) else w
        r = np.minimum(r, self.r_max)
        if np.any((r <= 0) & (w != 0)):
            raise ValueError("rate policy produced a zero rate on a channel with nonzero coupling")
        return r


def drift_matrix(m: CanonicalModel, t: float, r, w=None, w_max=None) -> np.ndarray:
    """``A_t = -iH - sum_l (w_l L^+L - r_l 1)/2``."""
    A = -1j * np.asarray(m.H(t), dtype=complex)
    if w is None:
        w = m.couplings(t, w_max)
    for ch, wl, rl in zip(m.channels, w, r):
        L = np.asarray(ch.L, dtype=complex)
        A = A - 0.5 * (wl * (L.conj().T @ L) - rl * np.eye(m.d))
    return A


class _Schedule:
    """Couplings, rates and propagators as functions of time."""

    def __init__(self, m: CanonicalModel, policy: OstensibleRates):
        self.m = m
        self.policy = policy
        self.ops = [np.asarray(c.L, dtype=complex) for c in m.channels]
        self._LdL = [L.conj().T @ L for L in self.ops]
        self._eye = np.eye(m.d, dtype=complex)
        self._cache = {}

    def at(self, t):
        hit = self._cache.get(t)
        if hit is None:
            w = np.array([coupling_value(c.w, t, self.policy.clip) for c in self.m.channels])
            r = self.policy.rates(w)
            A = -1j * np.asarray(self.m.H(t), dtype=complex) + (0.5 * float(np.sum(r))) * self._eye
            for LdL, wl in zip(self._LdL, w):
                A -= (0.5 * wl) * LdL
            hit = (w, r, A)
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[t] = hit
        return hit

    def propagator(self, a, b):
        h = b - a
        I = self._eye
        A1, A2, A3 = self.at(a)[2], self.at(0.5 * (a + b))[2], self.at(b)[2]
        k1 = A1
        k2 = A2 @ (I + 0.5 * h * k1)
        k3 = A2 @ (I + 0.5 * h * k2)
        k4 = A3 @ (I + h * k3)
        return I + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


@dataclass
class OstensiblePlan:
    grid: TimeGrid
    policy: OstensibleRates
    sched: _Schedule = field(repr=False)
    K: np.ndarray  # (n_steps, d, d) per grid step
    r_nodes: np.ndarray  # (n_steps, 3, n_ch): rates at step start, middle, end
    cum: np.ndarray  # (n_steps + 1, n_ch): cumulative rate integral at grid nodes


def make_plan(m: CanonicalModel, grid: TimeGrid, policy: OstensibleRates) -> OstensiblePlan:
    S = _Schedule(m, policy)
    n, nc = grid.n_steps, len(m.channels)
    t = grid.times
    K = np.empty((n, m.d, m.d), dtype=complex)
    rn = np.empty((n, 3, nc))
    for k in range(n):
        a, b = float(t[k]), float(t[k + 1])
        K[k] = S.propagator(a, b)
        rn[k] = [S.at(a)[1], S.at(0.5 * (a + b))[1], S.at(b)[1]]
    dt = grid.dt
    inc = dt / 6 * (rn[:, 0] + 4 * rn[:, 1] + rn[:, 2])
    cum = np.vstack([np.zeros((1, nc)), np.cumsum(inc, axis=0)])
    return OstensiblePlan(grid, policy, S, K, rn, cum)


def _invert_cumulative(plan: OstensiblePlan, l: int, theta: np.ndarray) -> np.ndarray:
    """Times at which the cumulative rate of channel ``l`` reaches ``theta``.

    Inside a grid step the rate is the quadratic through its start, middle
    and end values (consistent with the Simpson node sums); the cubic
    cumulative is inverted by safeguarded Newton iteration.
    """
    cum = plan.cum[:, l]
    k = np.clip(np.searchsorted(cum, theta, side="right") - 1, 0, plan.grid.n_steps - 1)
    h = plan.grid.dt
    r0, rm, r1 = plan.r_nodes[k, 0, l], plan.r_nodes[k, 1, l], plan.r_nodes[k, 2, l]
    # r(s h) = r0 + s (4 rm - 3 r0 - r1) + s^2 (2 r0 + 2 r1 - 4 rm), s in [0, 1]
    b1 = 4 * rm - 3 * r0 - r1
    b2 = 2 * r0 + 2 * r1 - 4 * rm
    target = (theta - cum[k]) / h
    s = np.clip(target / np.maximum((r0 + r1) / 2, 1e-300), 0, 1)
    lo, hi = np.zeros_like(s), np.ones_like(s)
    for _ in range(60):
        F = r0 * s + b1 * s * s / 2 + b2 * s ** 3 / 3 - target
        if np.all(np.abs(F) <= 1e-15 * np.maximum(target, 1.0)):
            break
        lo = np.where(F < 0, s, lo)
        hi = np.where(F >= 0, s, hi)
        dF = r0 + b1 * s + b2 * s * s
        step = np.where(dF > 0, F / np.where(dF > 0, dF, 1), np.inf)
        s_new = s - step
        bad = ~((s_new > lo) & (s_new < hi))
        s = np.where(bad, 0.5 * (lo + hi), s_new)
    return plan.grid.times[k] + h * s


def _sample_jumps(plan: OstensiblePlan, gens) -> list:
    """Jumps ``(time, channel)`` of each path, sorted by time, one generator per path.

    Each generator draws unit exponential increments channel by channel until
    the channel's total integrated rate is exceeded; the crossing times are
    then found for the whole block at once.
    """
    total = plan.cum[-1]
    nc = plan.cum.shape[1]
    rows = [[] for _ in range(nc)]
    thetas = [[] for _ in range(nc)]
    for i, gen in enumerate(gens):
        for l in range(nc):
            if total[l] <= 0:
                continue
            acc = gen.exponential()
            while acc < total[l]:
                rows[l].append(i)
                thetas[l].append(acc)
                acc += gen.exponential()
    out = [[] for _ in gens]
    for l in range(nc):
        if thetas[l]:
            for i, t in zip(rows[l], _invert_cumulative(plan, l, np.array(thetas[l]))):
                out[i].append((float(t), l))
    for js in out:
        js.sort()
    return out


@dataclass
class OstensiblePath:
    times: np.ndarray
    phi: np.ndarray  # (T, d)
    lam: np.ndarray  # (T,)
    jumps: list


def _simulate_block(start: int, stop: int, plan: OstensiblePlan, psi0: np.ndarray, seed,
                    obs_feat: np.ndarray, keep_paths: bool, gens=None) -> WeightedSums:
    S_ = plan.sched
    d = len(psi0)
    B = stop - start
    T = plan.grid.n_steps + 1
    times = plan.grid.times
    if gens is None:
        gens = [trajectory_rng(seed, i) for i in range(start, stop)]
    jumps = _sample_jumps(plan, gens)
    # group jumps by grid step
    by_step = {}
    for i, js in enumerate(jumps):
        for t, l in js:
            k = min(int(np.searchsorted(times, t, side="right")) - 1, plan.grid.n_steps - 1)
            by_step.setdefault(k, {}).setdefault(i, []).append((t, l))
    phi = np.tile(np.asarray(psi0, dtype=complex), (B, 1))
    lam = np.ones(B)
    aborted = np.zeros(B, dtype=bool)
    njumps = np.zeros(B)
    S = WeightedSums.zeros(T, d, obs_feat.shape[1])
    S.n = B
    if keep_paths:
        P_phi = np.empty((B, T, d), dtype=complex)
        P_lam = np.empty((B, T))
        P_phi[:, 0], P_lam[:, 0] = phi, lam

    def record(k):
        n = np.sqrt(np.einsum("bi,bi->b", phi.conj(), phi).real)
        safe = n > 0
        psi = np.where(safe[:, None], phi / np.where(safe, n, 1)[:, None], psi0[None, :])
        S.add(k, np.where(aborted, 0.0, lam * n * n), psi, obs_feat, njumps)

    record(0)
    for k in range(plan.grid.n_steps):
        a, b = float(times[k]), float(times[k + 1])
        new = phi @ plan.K[k].T
        for i, js in by_step.get(k, {}).items():
            if aborted[i]:
                continue
            x, s = phi[i], a
            for t, l in js:
                if t > s:
                    x = S_.propagator(s, t) @ x
                w, r, _ = S_.at(t)
                x = S_.ops[l] @ x
                lam[i] *= w[l] / r[l]
                s = t
                njumps[i] += 1
            if b > s:
                x = S_.propagator(s, b) @ x
            new[i] = x
        phi = new
        # guard the recorded weight lam |phi|^2, whose square enters the sums
        with np.errstate(over="ignore", invalid="ignore"):
            n2 = np.einsum("bi,bi->b", phi.conj(), phi).real
            wt = np.abs(lam) * n2
        big = ~np.isfinite(wt) | (wt > BLOWUP) | (n2 > BLOWUP) | (np.abs(lam) > BLOWUP)
        if np.any(big & ~aborted):
            aborted |= big
            phi[aborted] = 0
            lam[aborted] = 0
        record(k + 1)
        if keep_paths:
            P_phi[:, k + 1], P_lam[:, k + 1] = phi, lam
    jt, jtime, jch = [], [], []
    for i, js in enumerate(jumps):
        for t, l in js:
            jt.append(start + i)
            jtime.append(t)
            jch.append(l)
    S.extra = {"n_aborted": np.array([aborted.sum()]), "jump_traj": np.array(jt, dtype=np.int64),
               "jump_time": np.array(jtime, dtype=float), "jump_channel": np.array(jch, dtype=np.int64)}
    if keep_paths:
        S.extra["paths_phi"] = P_phi
        S.extra["paths_lam"] = P_lam
    return S


@dataclass
class OstensibleResult:
    plan: OstensiblePlan
    sums: WeightedSums
    n_traj: int
    seed: int

    @property
    def n_aborted(self) -> int:
        return int(self.sums.extra["n_aborted"].sum())

    def estimate(self) -> EnsembleEstimate:
        est = estimate_from_sums(self.plan.grid.times, self.sums, "raw")
        p = self.plan.policy
        est.kind = "ostensible"
        est.info.update({"engine": "ostensible", "rate_mode": p.mode, "c0": p.c0, "r_max": p.r_max,
                         "w_max": p.clip, "n_aborted": self.n_aborted})
        if np.max(est.mu_se) > SE_TRACE_WARN:
            warnings.warn(f"ostensible trace standard error reaches {np.max(est.mu_se):.3f}; "
                          "the horizon is long for this ensemble size", RuntimeWarning)
        return est


def simulate(m: CanonicalModel, psi0, grid: TimeGrid, policy: OstensibleRates = OstensibleRates(),
             n_traj: int = 1000, seed: int = 0, observables=None, workers=None, block: int = 2000,
             keep_paths: bool = False, plan: OstensiblePlan | None = None) -> OstensibleResult:
    from .jump_engine import default_observables, normalize_state
    psi0 = normalize_state(psi0)
    if plan is None:
        plan = make_plan(m, grid, policy)
    if observables is None:
        observables = default_observables(m.d)
    feat = observable_features(observables, m.d)
    parts = run_blocks(_simulate_block, (plan, psi0, seed, feat, keep_paths), n_traj, block, workers)
    res = OstensibleResult(plan, tree_sum(parts), n_traj, seed)
    if res.n_aborted:
        warnings.warn(f"ostensible blow-up: {res.n_aborted} paths exceeded {BLOWUP:g} and were dropped",
                      RuntimeWarning)
    return res


def run_ostensible_trajectory(m: CanonicalModel, psi0, grid: TimeGrid, policy: OstensibleRates,
                              rng: np.random.Generator) -> OstensiblePath:
    from .jump_engine import normalize_state
    plan = make_plan(m, grid, policy)
    S = _simulate_block(0, 1, plan, normalize_state(psi0), None,
                        observable_features([], m.d), True, gens=[rng])
    if S.extra["n_aborted"][0]:
        raise OstensibleBlowUp("ostensible blow-up: path exceeded the overflow guard")
    jumps = list(zip(S.extra["jump_time"].tolist(), S.extra["jump_channel"].tolist()))
    return OstensiblePath(grid.times, S.extra["paths_phi"][0], S.extra["paths_lam"][0], jumps)


def estimate_ostensible(result: OstensibleResult) -> EnsembleEstimate:
    return result.estimate()
