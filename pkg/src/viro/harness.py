"""Evaluation suite: NEES, ATE, 3-sigma envelopes, Monte-Carlo aggregation,
observability reports and the CSV outputs consumed by plotting tools."""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import observability as obs
from . import sim as simmod
from .pipeline import run_pipeline

FMT = "%.17g"


@dataclass
class EvalSeries:
    stamps: np.ndarray
    nees_ori: np.ndarray
    nees_pos: np.ndarray
    valid: np.ndarray            # False where a covariance block was singular


def compute_nees(result):
    """Per-stamp 3-dof NEES for orientation and position.

    The orientation error uses the same retraction as the filter
    (truth = exp(-e) @ estimate), so NEES is chi-square(3) for a consistent
    filter.  Singular covariance blocks flag the entry invalid.
    """
    n = len(result.stamps)
    e_ori = result.orientation_errors()
    e_pos = result.position_errors()
    nees_o = np.zeros(n)
    nees_p = np.zeros(n)
    valid = np.ones(n, dtype=bool)
    for i in range(n):
        try:
            nees_o[i] = e_ori[i] @ np.linalg.solve(result.pth[i], e_ori[i])
            nees_p[i] = e_pos[i] @ np.linalg.solve(result.ppp[i], e_pos[i])
        except np.linalg.LinAlgError:
            valid[i] = False
    bad = ~np.isfinite(nees_o) | ~np.isfinite(nees_p)
    valid &= ~bad
    return EvalSeries(result.stamps, nees_o, nees_p, valid)


def compute_ate(est_p, gt_p):
    """Translation RMSE after closed-form rigid (SE(3)) alignment."""
    est_p = np.asarray(est_p, dtype=float)
    gt_p = np.asarray(gt_p, dtype=float)
    if est_p.shape[0] < 2:
        raise ValueError("need at least two poses")
    mu_e = est_p.mean(axis=0)
    mu_g = gt_p.mean(axis=0)
    ce = est_p - mu_e
    cg = gt_p - mu_g
    if np.max(np.linalg.norm(ce, axis=1)) < 1e-12:
        raise ValueError("degenerate trajectory: all poses identical")
    W = ce.T @ cg
    U, _, Vt = np.linalg.svd(W)
    S = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        S[2, 2] = -1.0
    R = Vt.T @ S @ U.T
    aligned = (R @ ce.T).T + mu_g
    return float(np.sqrt(np.mean(np.sum((aligned - gt_p) ** 2, axis=1))))


def sigma_bound_rows(result):
    """Per-stamp actual errors and +/-3 sigma envelopes per error component."""
    e_ori = result.orientation_errors()
    e_pos = result.position_errors()
    rows = []
    for i, t in enumerate(result.stamps):
        s_ori = 3.0 * np.sqrt(np.clip(np.diag(result.pth[i]), 0.0, None))
        s_pos = 3.0 * np.sqrt(np.clip(np.diag(result.ppp[i]), 0.0, None))
        rows.append([t, *e_ori[i], *s_ori, *e_pos[i], *s_pos])
    return rows


SIGMA_HEADER = ["stamp",
                "err_th_x", "err_th_y", "err_th_z",
                "sig3_th_x", "sig3_th_y", "sig3_th_z",
                "err_p_x", "err_p_y", "err_p_z",
                "sig3_p_x", "sig3_p_y", "sig3_p_z"]


def yaw_sigma(result):
    """3-sigma bound of the rotation-about-gravity (z) error component."""
    return 3.0 * np.sqrt(np.clip(result.pth[:, 2, 2], 0.0, None))


# ----- CSV writers ----------------------------------------------------------


def _write_csv(path, header, rows, preamble=None):
    with open(path, "w") as f:
        if preamble:
            f.write(preamble if preamble.endswith("\n") else preamble + "\n")
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(FMT % x for x in row) + "\n")


def write_run_outputs(result, out_dir):
    """trajectory.csv, nees.csv, sigma_bounds.csv, ate.txt, init_report.csv."""
    os.makedirs(out_dir, exist_ok=True)
    rows = [[t, *result.q[i], *result.p[i], *result.v[i]]
            for i, t in enumerate(result.stamps)]
    _write_csv(os.path.join(out_dir, "trajectory.csv"),
               ["stamp", "qx", "qy", "qz", "qw", "px", "py", "pz",
                "vx", "vy", "vz"], rows,
               preamble=f"# mode={result.mode}")

    series = compute_nees(result)
    _write_csv(os.path.join(out_dir, "nees.csv"),
               ["stamp", "nees_ori", "nees_pos", "valid"],
               [[t, series.nees_ori[i], series.nees_pos[i], float(series.valid[i])]
                for i, t in enumerate(series.stamps)],
               preamble=f"# mode={result.mode} runs=1 aggregate=none")

    _write_csv(os.path.join(out_dir, "sigma_bounds.csv"), SIGMA_HEADER,
               sigma_bound_rows(result), preamble=f"# mode={result.mode}")

    ate = compute_ate(result.p, result.truth_p)
    with open(os.path.join(out_dir, "ate.txt"), "w") as f:
        f.write(FMT % ate + "\n")

    if result.init_report is not None:
        rows = result.init_report.rows()
        _write_csv(os.path.join(out_dir, "init_report.csv"),
                   list(rows[0].keys()),
                   [list(r.values()) for r in rows],
                   preamble=f"# init_stamp={result.init_stamp}")
    return ate


# ----- Monte-Carlo ----------------------------------------------------------


@dataclass
class MonteCarloResult:
    mode: str
    seeds: list
    stamps: np.ndarray
    mean_nees_ori: np.ndarray
    mean_nees_pos: np.ndarray
    ates: np.ndarray
    init_stamps: np.ndarray
    yaw_sigmas: np.ndarray       # (runs, stamps)


def _mc_worker(args):
    config, seed = args
    result = run_pipeline(replace(config, seed=seed, out_dir=None))
    series = compute_nees(result)
    return (seed, series.nees_ori, series.nees_pos, series.valid,
            compute_ate(result.p, result.truth_p), result.init_stamp,
            yaw_sigma(result), result.stamps)


def monte_carlo(config, seeds, workers=1):
    """Independent runs over seeds, merged deterministically (sorted by seed)."""
    seeds = list(seeds)
    jobs = [(config, s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(_mc_worker, jobs))
    else:
        raw = [_mc_worker(j) for j in jobs]
    raw.sort(key=lambda r: r[0])

    stamps = raw[0][7]
    nees_o = np.stack([r[1] for r in raw])
    nees_p = np.stack([r[2] for r in raw])
    valid = np.stack([r[3] for r in raw])
    with np.errstate(invalid="ignore"):
        mean_o = np.where(valid.any(axis=0),
                          np.nansum(np.where(valid, nees_o, 0.0), axis=0)
                          / np.maximum(valid.sum(axis=0), 1), np.nan)
        mean_p = np.where(valid.any(axis=0),
                          np.nansum(np.where(valid, nees_p, 0.0), axis=0)
                          / np.maximum(valid.sum(axis=0), 1), np.nan)
    return MonteCarloResult(
        mode=config.mode, seeds=seeds, stamps=stamps,
        mean_nees_ori=mean_o, mean_nees_pos=mean_p,
        ates=np.array([r[4] for r in raw]),
        init_stamps=np.array([r[5] for r in raw]),
        yaw_sigmas=np.stack([r[6] for r in raw]))


def write_montecarlo_outputs(mc, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    _write_csv(os.path.join(out_dir, "nees.csv"),
               ["stamp", "nees_ori", "nees_pos"],
               [[t, mc.mean_nees_ori[i], mc.mean_nees_pos[i]]
                for i, t in enumerate(mc.stamps)],
               preamble=(f"# mode={mc.mode} runs={len(mc.seeds)} "
                         "aggregate=mean-over-runs"))
    with open(os.path.join(out_dir, "ate.txt"), "w") as f:
        f.write(f"# mode={mc.mode} runs={len(mc.seeds)}\n")
        for s, a in zip(mc.seeds, mc.ates):
            f.write(f"seed={s} ate=" + FMT % a + "\n")
        f.write("mean=" + FMT % float(np.mean(mc.ates)) + "\n")


# ----- observability report -------------------------------------------------


def run_obs_report(out_dir, trajectory="figure8", n_steps=50, dt=0.4, seed=0,
                   duration=60.0):
    """Ideal / actual / FEJ observability residual tables -> obs_report.csv."""
    os.makedirs(out_dir, exist_ok=True)
    cfg = simmod.SimConfig(trajectory=trajectory, duration=duration, seed=seed)
    gt = simmod.gen_trajectory(cfg)
    setup = obs.AnalysisSetup()
    reports = [
        obs.build_observability_matrix(gt, setup, mode="ideal",
                                       n_steps=n_steps, dt=dt, seed=seed),
        obs.build_observability_matrix(gt, setup, mode="actual",
                                       n_steps=n_steps, dt=dt, seed=seed),
        obs.build_observability_matrix(gt, setup, mode="fej",
                                       n_steps=n_steps, dt=dt, seed=seed),
    ]
    rows = [list(r.values()) for rep in reports for r in rep.rows()]
    header = list(reports[0].rows()[0].keys())
    path = os.path.join(out_dir, "obs_report.csv")
    with open(path, "w") as f:
        f.write(f"# trajectory={trajectory} n_steps={n_steps} dt={FMT % dt}\n")
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(str(x) if isinstance(x, (str, int)) else FMT % x
                             for x in row) + "\n")
    return reports


def evaluate_files(traj_csv, gt_csv):
    """ATE between a saved trajectory and a groundtruth file (matched stamps)."""
    est = _read_traj(traj_csv)
    gt = _read_traj(gt_csv)
    common = np.intersect1d(est["stamp"], gt["stamp"])
    if len(common) < 2:
        raise ValueError("fewer than two matching stamps")
    ei = np.searchsorted(est["stamp"], common)
    gi = np.searchsorted(gt["stamp"], common)
    return compute_ate(est["p"][ei], gt["p"][gi])


def _read_traj(path):
    stamps, ps = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("stamp"):
                continue
            vals = [float(x) for x in line.split(",")]
            stamps.append(vals[0])
            ps.append(vals[5:8])
    order = np.argsort(stamps)
    return {"stamp": np.array(stamps)[order], "p": np.array(ps)[order]}
