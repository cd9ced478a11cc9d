"""Shared Monte-Carlo plumbing: per-trajectory random streams, block scheduling,
streaming weighted sums and the estimators built on them."""
from __future__ import annotations

import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

DEFAULT_BLOCK = 1000
SE_FLOOR = 1e-9  # absolute slack for comparisons against exact (zero-variance) estimates


class DegenerateEnsemble(ArithmeticError):
    """The normalizing weight sum vanished."""


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for trajectory ``index``; depends only on (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def worker_count(requested: int | None = None) -> int:
    n = requested if requested is not None else (os.cpu_count() or 1)
    env = os.environ.get("UNRAVEL_THREADS")
    if env:
        n = min(n, max(1, int(env)))
    return max(1, int(n))


def block_ranges(n_traj: int, block: int = DEFAULT_BLOCK) -> list:
    return [(a, min(a + block, n_traj)) for a in range(0, n_traj, block)]


_TASK = None


def _call_task(k):
    fn, args, ranges = _TASK
    a, b = ranges[k]
    return fn(a, b, *args)


def run_blocks(fn, args: tuple, n_traj: int, block: int = DEFAULT_BLOCK,
               workers: int | None = None) -> list:
    """Evaluate ``fn(start, stop, *args)`` on fixed trajectory blocks.

    The block partition does not depend on the worker count and results come
    back in block order, so any deterministic reduction over them is
    independent of scheduling.  Worker processes are forked and inherit the
    task, so models with arbitrary callables need no pickling.
    """
    global _TASK
    ranges = block_ranges(n_traj, block)
    n = min(worker_count(workers), len(ranges))
    if n <= 1 or "fork" not in multiprocessing.get_all_start_methods():
        return [fn(a, b, *args) for a, b in ranges]
    _TASK = (fn, args, ranges)
    try:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=n, mp_context=ctx) as ex:
            return list(ex.map(_call_task, range(len(ranges))))
    finally:
        _TASK = None


def tree_sum(items: list):
    """Pairwise reduction in a fixed order."""
    items = list(items)
    if not items:
        raise ValueError("nothing to reduce")
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


@dataclass
class WeightedSums:
    """Per-time sums over trajectories of a real weight ``m`` and unit vectors ``psi``.

    Each trajectory contributes ``m psi psi^dagger``; observables ``o_k`` are
    ``Re <psi|O_k|psi>``.
    """
    n: int = 0
    s_m: np.ndarray = None  # (T,)
    s_m2: np.ndarray = None
    s_rho_pos: np.ndarray = None  # (T, d, d) from positive weights
    s_rho_neg: np.ndarray = None  # (T, d, d) from negative weights (magnitudes)
    s_mo: np.ndarray = None  # (T, K)
    s_m2o: np.ndarray = None
    s_m2o2: np.ndarray = None
    s_jumps: np.ndarray = None  # (T,)
    max_norm_defect: float = 0.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, n_times: int, d: int, n_obs: int) -> "WeightedSums":
        z = np.zeros
        return cls(0, z(n_times), z(n_times), z((n_times, d, d), complex), z((n_times, d, d), complex),
                   z((n_times, n_obs)), z((n_times, n_obs)), z((n_times, n_obs)), z(n_times), 0.0, {})

    def add(self, k: int, m: np.ndarray, psi: np.ndarray, obs_feat: np.ndarray, jumps=None):
        """Accumulate time index ``k`` from weights ``m`` (B,) and vectors ``psi`` (B, d).

        ``obs_feat`` is the (d*d, K) matrix from :func:`observable_features`.
        """
        B, d = psi.shape
        X = (psi[:, :, None] * psi.conj()[:, None, :]).reshape(B, d * d)
        mp = np.maximum(m, 0.0)
        mn = np.maximum(-m, 0.0)
        m2 = m * m
        self.s_m[k] += m.sum()
        self.s_m2[k] += m2.sum()
        self.s_rho_pos[k] += (mp @ X).reshape(d, d)
        self.s_rho_neg[k] += (mn @ X).reshape(d, d)
        if obs_feat.shape[1]:
            o = np.real(X @ obs_feat)
            self.s_mo[k] += m @ o
            self.s_m2o[k] += m2 @ o
            self.s_m2o2[k] += m2 @ (o * o)
        if jumps is not None:
            self.s_jumps[k] += jumps.sum()
        if B:
            nd = float(np.max(np.abs(np.sqrt(np.einsum("bi,bi->b", psi.conj(), psi).real) - 1.0)))
            self.max_norm_defect = max(self.max_norm_defect, nd)

    def __add__(self, other: "WeightedSums") -> "WeightedSums":
        extra = {}
        for key in set(self.extra) | set(other.extra):
            a, b = self.extra.get(key), other.extra.get(key)
            extra[key] = b if a is None else (a if b is None else _cat(a, b))
        return WeightedSums(
            self.n + other.n, self.s_m + other.s_m, self.s_m2 + other.s_m2,
            self.s_rho_pos + other.s_rho_pos, self.s_rho_neg + other.s_rho_neg,
            self.s_mo + other.s_mo, self.s_m2o + other.s_m2o, self.s_m2o2 + other.s_m2o2,
            self.s_jumps + other.s_jumps, max(self.max_norm_defect, other.max_norm_defect), extra)


def observable_features(observables, d: int) -> np.ndarray:
    """Matrix ``F`` with ``Tr(O_k X) = vec(X) @ F[:, k]`` for row-major ``vec``."""
    if not observables:
        return np.zeros((d * d, 0), dtype=complex)
    return np.stack([np.asarray(O, dtype=complex).T.reshape(-1) for O in observables], axis=1)


def _cat(a, b):
    if isinstance(a, list):
        return a + b
    return np.concatenate([a, b], axis=0)


@dataclass
class EnsembleEstimate:
    times: np.ndarray
    rho: np.ndarray  # (T, d, d)
    obs_mean: np.ndarray  # (T, K)
    obs_se: np.ndarray  # (T, K)
    mu_mean: np.ndarray  # weight mean, estimates 1
    mu_se: np.ndarray
    n_trajectories: int
    kind: str
    rho_pos: np.ndarray = None  # Wittstock-Paulsen parts (raw normalization)
    rho_neg: np.ndarray = None
    jumps_mean: np.ndarray = None
    max_norm_defect: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def trace(self) -> np.ndarray:
        return np.real(np.einsum("kii->k", self.rho))


def _sample_se(s1, s2, n):
    var = np.maximum(s2 - s1 * s1 / n, 0.0) / max(n - 1, 1)
    return np.sqrt(var / n)


def estimate_from_sums(times, S: WeightedSums, kind: str = "normalized") -> EnsembleEstimate:
    """Raw mean ``E[m psi psi^+]`` or the self-normalized ratio ``sum m psi psi^+ / sum m``.

    Standard errors: sample standard deviation over trajectories for the raw
    estimator, delta method for the ratio.
    """
    N = S.n
    if N < 2:
        raise ValueError("need at least two trajectories")
    mu_mean = S.s_m / N
    mu_se = _sample_se(S.s_m, S.s_m2, N)
    rho_pos, rho_neg = S.s_rho_pos / N, S.s_rho_neg / N
    if kind == "raw":
        rho = rho_pos - rho_neg
        obs = S.s_mo / N
        se = _sample_se(S.s_mo, S.s_m2o2, N)
    elif kind == "normalized":
        if np.any(S.s_m == 0):
            k = int(np.argmax(S.s_m == 0))
            raise DegenerateEnsemble(f"degenerate ensemble: weight sum vanishes at t={float(times[k])!r}")
        den = S.s_m
        rho = (S.s_rho_pos - S.s_rho_neg) / den[:, None, None]
        obs = S.s_mo / den[:, None]
        num = S.s_m2o2 - 2 * obs * S.s_m2o + obs * obs * S.s_m2[:, None]
        se = np.sqrt(np.maximum(num, 0.0)) / np.abs(den)[:, None]
    else:
        raise ValueError(f"unknown estimator kind {kind!r}")
    return EnsembleEstimate(times=np.asarray(times), rho=rho, obs_mean=obs, obs_se=se,
                            mu_mean=mu_mean, mu_se=mu_se, n_trajectories=N, kind=kind,
                            rho_pos=rho_pos, rho_neg=rho_neg, jumps_mean=S.s_jumps / N,
                            max_norm_defect=S.max_norm_defect)


def within_band(est: np.ndarray, ref: np.ndarray, se: np.ndarray, k: float,
                floor: float = SE_FLOOR) -> np.ndarray:
    """Elementwise ``|est - ref| <= k * se + floor``."""
    return np.abs(np.asarray(est) - np.asarray(ref)) <= k * np.asarray(se) + floor
