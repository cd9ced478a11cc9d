"""Command line entry point: ``unravel run`` and ``unravel check-cp``.

A run configuration is one JSON object::

    {"engine": "oracle" | "jump" | "ostensible" | "dgs" | "check_cp" | "compare",
     "model": {...} | "model_file": "path.json",
     "psi0": "plus" | "minus" | "superposition" | [amplitudes],
     "grid": {"t0": 0, "t_final": 10, "n_steps": 2000},
     "n_traj": 20000, "seed": 1, "policy": {...}, "estimator": "normalized",
     "observables": ["sigma_x", ...], "workers": 4}

``dgs`` additionally takes ``"environment"``, ``"hamiltonian"``,
``"equal_time"`` and ``"regularize"``; ``compare`` takes
``"compare": {"engine": "jump" | "ostensible"}``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__, gaussian_engine, jump_engine, model, oracle, ostensible_engine, qops
from ._ensemble import SE_FLOOR, DegenerateEnsemble

ENGINES = ("oracle", "jump", "ostensible", "dgs", "check_cp", "compare")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_DEGENERATE = 0, 2, 3, 4
NAMED_STATES = {
    "plus": [1.0, 0.0],
    "minus": [0.0, 1.0],
    "superposition": [1 / math.sqrt(2), 1 / math.sqrt(2)],
}
PAULI_NAMES = {"sigma_x": "sx", "sigma_y": "sy", "sigma_z": "sz"}


class ConfigError(ValueError):
    pass


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_csv(path, header, columns):
    cols = [np.asarray(c, dtype=float) for c in columns]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*cols):
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def content_hash(obj) -> str:
    """Git blob hash of the canonical JSON encoding."""
    data = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _seed(value) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value < 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return value


def load_config(path, seed=None) -> dict:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {path}: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if "model_file" in cfg:
        mf = os.path.join(os.path.dirname(os.path.abspath(path)), cfg["model_file"])
        if not os.path.isfile(mf):
            raise ConfigError(f"model file not found: {cfg['model_file']}")
        with open(mf) as fh:
            cfg["model"] = json.load(fh)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _grid(cfg) -> oracle.TimeGrid:
    g = cfg.get("grid")
    if not isinstance(g, dict):
        raise ConfigError("missing grid {t0, t_final, n_steps}")
    return oracle.TimeGrid(float(g.get("t0", 0.0)), float(g["t_final"]), int(g["n_steps"]))


def _state(cfg, d) -> np.ndarray:
    s = cfg.get("psi0", "plus")
    if isinstance(s, str):
        if s not in NAMED_STATES or d != 2:
            raise ConfigError(f"unknown initial state {s!r}")
        return np.array(NAMED_STATES[s], dtype=complex)
    v = np.array([complex(a[0], a[1]) if isinstance(a, list) else complex(a) for a in s])
    if v.shape != (d,):
        raise ConfigError(f"initial state must have {d} amplitudes")
    return v / np.linalg.norm(v)


def _observables(cfg, d):
    requested = cfg.get("observables")
    if requested is None:
        obs = jump_engine.default_observables(d)
        names = ["sx", "sy", "sz"] if d == 2 else [f"o{k}" for k in range(len(obs))]
        return names, obs
    names, obs = [], []
    for k, o in enumerate(requested):
        if isinstance(o, str):
            names.append(PAULI_NAMES.get(o, o))
        else:
            names.append(f"o{k}")
        obs.append(model.parse_matrix(o, d))
    return names, obs


def _n_traj(cfg) -> int:
    n = int(cfg.get("n_traj", 1000))
    if n < 2:
        raise ConfigError("n_traj must be at least 2 for stochastic engines")
    return n


def _jump_policy(cfg) -> jump_engine.RatePolicy:
    p = dict(cfg.get("policy", {}))
    return jump_engine.RatePolicy(**p)


def _ost_policy(cfg) -> ostensible_engine.OstensibleRates:
    p = dict(cfg.get("policy", {}))
    return ostensible_engine.OstensibleRates(**p)


def _tolerances() -> dict:
    return {"cp_tol": qops.CP_TOL, "self_adjoint_tol": qops.SELF_ADJOINT_TOL,
            "kraus_cutoff": qops.KRAUS_CUTOFF, "channel_sum_tol": qops.CHANNEL_SUM_TOL,
            "trace_drift_tol": oracle.TRACE_DRIFT_TOL, "singular_den_tol": model.DEN_TOL,
            "se_floor": SE_FLOOR, "ostensible_blowup": ostensible_engine.BLOWUP,
            "dgs_psd_tol": gaussian_engine.PSD_TOL, "dgs_eps_ladder": list(gaussian_engine.EPS_LADDER)}


def _conventions() -> dict:
    return {"vectorization": "row-major, res(A rho B) = (A kron B^T) res(rho)",
            "basis": "e1 excited, sigma_z = diag(1, -1), sigma_minus = e2 e1^+",
            "csv_precision": "17 significant digits"}


def _oracle_rhos(cfg, m, grid):
    if "rho0" in cfg:
        rho0 = model.parse_matrix(cfg["rho0"], m.d)
    else:
        psi = _state(cfg, m.d)
        rho0 = np.outer(psi, psi.conj())
    w_max = cfg.get("w_max")
    return oracle.integrate_master(m, rho0, grid, w_max), w_max


def run_oracle(cfg, out):
    m = model.model_from_json(cfg["model"])
    grid = _grid(cfg)
    names, obs = _observables(cfg, m.d)
    rhos, w_max = _oracle_rhos(cfg, m, grid)
    flow = oracle.propagate_flow(m, grid, w_max)
    cols = [grid.times] + [oracle.expectation(rhos, O) for O in obs]
    cols += [np.real(np.einsum("kii->k", rhos)), flow.min_choi]
    write_csv(os.path.join(out, "results.csv"), ["t"] + names + ["trace", "min_choi"], cols)
    return {"engine": "oracle", "cp_everywhere": bool(flow.cp_flags.all())}


def run_check_cp(cfg, out):
    m = model.model_from_json(cfg["model"])
    grid = _grid(cfg)
    flow = oracle.propagate_flow(m, grid, cfg.get("w_max"))
    w = np.array([m.couplings(t, cfg.get("w_max")) for t in grid.times]).reshape(len(grid.times), -1)
    header = ["t", "min_choi", "cp"] + [f"w{l}" for l in range(w.shape[1])]
    write_csv(os.path.join(out, "results.csv"), header,
              [grid.times, flow.min_choi, flow.cp_flags.astype(float)] + list(w.T))
    return {"engine": "check_cp", "cp_everywhere": bool(flow.cp_flags.all()),
            "min_choi": float(flow.min_choi.min())}


def _stochastic(cfg, engine):
    m = model.model_from_json(cfg["model"])
    grid = _grid(cfg)
    names, obs = _observables(cfg, m.d)
    psi0 = _state(cfg, m.d)
    n, seed, workers = _n_traj(cfg), _seed(cfg.get("seed", 0)), cfg.get("workers")
    if engine == "jump":
        kind = cfg.get("estimator", "normalized")
        res = jump_engine.simulate(m, psi0, grid, _jump_policy(cfg), n, seed, obs, workers)
        est = res.estimate(kind)
    elif engine == "ostensible":
        res = ostensible_engine.simulate(m, psi0, grid, _ost_policy(cfg), n, seed, obs, workers)
        est = res.estimate()
    else:
        raise ConfigError(f"unknown stochastic engine {engine!r}")
    return m, grid, names, obs, psi0, est


def _write_estimate(out, names, est, extra_cols=()):
    header = ["t"] + names + [f"{nm}_se" for nm in names] + ["E_mu", "SE_mu", "n_jumps_mean"]
    cols = [est.times] + list(est.obs_mean.T) + list(est.obs_se.T)
    cols += [est.mu_mean, est.mu_se, est.jumps_mean]
    write_csv(os.path.join(out, "results.csv"), header, cols)


def run_stochastic(cfg, out, engine):
    _, _, names, _, _, est = _stochastic(cfg, engine)
    _write_estimate(out, names, est)
    return {**_jsonable(est.info), "kind": est.kind, "n_trajectories": est.n_trajectories}


def run_compare(cfg, out):
    engine = cfg.get("compare", {}).get("engine", "jump")
    m, grid, names, obs, psi0, est = _stochastic(cfg, engine)
    _write_estimate(out, names, est)
    rhos = oracle.integrate_master(m, np.outer(psi0, psi0.conj()), grid, cfg.get("w_max"))
    header, cols = ["t"], [grid.times]
    zs = []
    for k, nm in enumerate(names):
        ref = oracle.expectation(rhos, obs[k])
        se = est.obs_se[:, k]
        z = (est.obs_mean[:, k] - ref) / np.maximum(se, SE_FLOOR)
        zs.append(z)
        header += [f"{nm}_oracle", f"{nm}_{engine}", f"{nm}_se", f"{nm}_z"]
        cols += [ref, est.obs_mean[:, k], se, z]
    write_csv(os.path.join(out, "compare.csv"), header, cols)
    zs = np.array(zs)[:, 1:]  # t0 is deterministic
    return {**_jsonable(est.info), "kind": est.kind, "n_trajectories": est.n_trajectories,
            "fraction_abs_z_le_2": float(np.mean(np.abs(zs) <= 2))}


def run_dgs(cfg, out):
    env = gaussian_engine.environment_from_json(cfg["environment"])
    d = env.L.shape[0]
    H = model.parse_matrix(cfg["hamiltonian"], d) if "hamiltonian" in cfg else np.zeros((d, d))
    grid = _grid(cfg)
    names, obs = _observables(cfg, d)
    res = gaussian_engine.simulate(H, env, _state(cfg, d), grid, _n_traj(cfg), _seed(cfg.get("seed", 0)),
                                   obs, cfg.get("equal_time", "one_sided"), bool(cfg.get("regularize", True)),
                                   cfg.get("eta_proper"), cfg.get("workers"))
    est = res.estimate()
    header = ["t"] + names + [f"{nm}_se" for nm in names] + ["trace", "trace_se", "hermiticity_defect"]
    cols = [est.times] + list(est.obs_mean.T) + list(est.obs_se.T)
    cols += [est.trace_mean, est.trace_se, est.hermiticity_defect]
    write_csv(os.path.join(out, "results.csv"), header, cols)
    return {**_jsonable(est.info), "kind": est.kind, "n_trajectories": est.n_trajectories}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def run(cfg: dict, out: str) -> dict:
    engine = cfg.get("engine")
    if engine not in ENGINES:
        raise ConfigError(f"engine must be one of {ENGINES}")
    if engine != "dgs" and "model" not in cfg:
        raise ConfigError("config needs a model or model_file")
    if engine == "dgs" and "environment" not in cfg:
        raise ConfigError("dgs engine needs an environment")
    os.makedirs(out, exist_ok=True)
    t_start = time.perf_counter()
    if engine == "oracle":
        info = run_oracle(cfg, out)
    elif engine == "check_cp":
        info = run_check_cp(cfg, out)
    elif engine == "compare":
        info = run_compare(cfg, out)
    elif engine == "dgs":
        info = run_dgs(cfg, out)
    else:
        info = run_stochastic(cfg, out, engine)
    manifest = {"version": __version__, "config": cfg, "content_hash": content_hash(cfg),
                "conventions": _conventions(), "tolerances": _tolerances(), "run": info,
                "wall_time_s": time.perf_counter() - t_start}
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(_jsonable(manifest), fh, indent=2, sort_keys=True)
    return manifest


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, DegenerateEnsemble):
        return EXIT_DEGENERATE
    if isinstance(exc, (ConfigError, KeyError, TypeError, ValueError)):
        return EXIT_CONFIG
    if isinstance(exc, ArithmeticError):
        return EXIT_NUMERICAL
    raise exc


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="unravel", description="Unravelings of canonical master equations.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the engine named in the config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", default=".")
    c = sub.add_parser("check-cp", help="Choi spectrum of the flow on the config grid")
    c.add_argument("--config", required=True)
    c.add_argument("--out", default=".")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config, getattr(args, "seed", None))
        if args.command == "check-cp":
            cfg["engine"] = "check_cp"
        run(cfg, args.out)
    except Exception as exc:  # mapped to documented exit codes
        code = _exit_code(exc)
        print(f"unravel: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
