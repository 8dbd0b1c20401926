"""Command-line front end: ``ctube run|certify|authority-map|sweep``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as cfgmod
from .certificate import (
    barrier_authority,
    sigma_min_linear_closed_form,
    sigma_min_sampled,
    t_min,
)
from .control import simulate, summarize
from .errors import ConfigurationError, CtubeError

log = logging.getLogger("ctube")

DISCREPANCY_RTOL = 0.01


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _clean(obj):
    """Replace non-finite floats by strings so the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(_clean(data), indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _out_dir(cfg, out: Optional[str]) -> Path:
    d = Path(out or cfg.output_dir or Path("out") / cfg.name)
    d.mkdir(parents=True, exist_ok=True)
    return d


def run_scenario(cfg, out: Optional[str] = None, warm_start: bool = True) -> dict:
    """Simulate the configured experiment and write its artifacts."""
    out_dir = _out_dir(cfg, out)
    summary = {"scenario": cfg.name, "controller": cfg.controller_kind, "dt": cfg.dt}
    if cfg.controller_kind == "nmpc":
        from .nmpc import receding_horizon_run

        problem = cfg.nmpc_problem()
        res = receding_horizon_run(
            problem, cfg.x0, cfg.t_end, sim_dt=cfg.dt, replan_every=cfg.nmpc["replan_every"], warm_start=warm_start
        )
        traj = res.trajectory
        summary.update(summarize(traj, problem.schedule))
        converged = [p for p in res.plans if p["converged"]]
        summary.update(
            {
                "h_obs_min": float(min(traj.aux_barriers["h_obs"])) if "h_obs" in traj.aux_barriers else None,
                "plans": len(res.plans),
                "converged_plans": len(converged),
                "max_converged_violation": max((p["violation"] for p in converged), default=0.0),
                "plan_failures": len(res.failures),
            }
        )
        write_json(out_dir / "plans.json", res.plans)
    else:
        controller = cfg.controller(warm_start=warm_start)
        aux = [cfg.obstacle_barrier()] if cfg.obstacle is not None else []
        traj = simulate(cfg.system(), controller, cfg.x0, cfg.t_end, cfg.dt, aux_barriers=aux)
        summary.update(summarize(traj, controller.schedule))
    traj.write_csv(out_dir / "trajectory.csv")
    write_json(out_dir / "summary.json", summary)
    if cfg.authority_map is not None:
        authority_map(cfg, out_dir)
    log.info("%s: wrote %s", cfg.name, out_dir)
    return summary


def authority_grid(cfg):
    """sigma over the configured 2-D grid; returns (x1, x2, S) with S[j, i] at (x1[i], x2[j])."""
    amap = cfg.authority_map
    if amap is None:
        raise ConfigurationError(f"{cfg.path}: no [authority_map] section")
    sys_, b, U = cfg.system(), cfg.barrier(), cfg.input_set()
    if sys_.state_dim != 2:
        raise ConfigurationError(f"{cfg.path}: authority maps need a 2-D state")
    x1 = np.linspace(*amap["x1_range"], amap["points"])
    x2 = np.linspace(*amap["x2_range"], amap["points"])
    S = np.empty((x2.size, x1.size))
    for j, b2 in enumerate(x2):
        for i, a1 in enumerate(x1):
            S[j, i] = barrier_authority(b, sys_, U, np.array([a1, b2]))
    return x1, x2, S


def authority_map(cfg, out_dir) -> Path:
    x1, x2, S = authority_grid(cfg)
    path = Path(out_dir) / "authority_map.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x1", "x2", "sigma"])
        for j, b2 in enumerate(x2):
            for i, a1 in enumerate(x1):
                w.writerow([repr(float(a1)), repr(float(b2)), repr(float(S[j, i]))])
    return path


def _relative_gap(a: float, b: float) -> float:
    if not (math.isfinite(a) and math.isfinite(b)):
        return math.inf if a != b else 0.0
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def certify(cfg, seed: Optional[int] = None) -> dict:
    """Worst-case authority and T_min for the configured tube."""
    c = cfg.certificate
    seed = cfg.seed if seed is None else seed
    schedule = cfg.schedule()
    b, sys_, U = cfg.barrier(), cfg.system(), cfg.input_set()
    pd = bool(np.linalg.eigvalsh(cfg.barrier_P)[0] > 0)
    # for a scalar box the ball formula is a valid lower bound (|w|_1 >= |w|_2)
    closed_ok = cfg.is_linear and pd and np.ndim(U.u_max) == 0
    method = c["method"]
    if method == "auto":
        method = "closed_form" if closed_ok else "sampled"
    if method in ("closed_form", "both") and not closed_ok:
        raise ConfigurationError(
            f"{cfg.path}: closed-form certificate needs a linear system, positive definite P and a scalar input bound"
        )
    certs = {}
    if method in ("closed_form", "both"):
        A, B = cfg.linear_matrices()
        certs["closed_form"] = sigma_min_linear_closed_form(A, B, cfg.barrier_P, cfg.barrier_c, float(U.u_max), schedule.r0)
    if method in ("sampled", "both"):
        domain = None
        if c["domain_lo"] is not None and c["domain_hi"] is not None:
            domain = (c["domain_lo"], c["domain_hi"])
        certs["sampled"] = sigma_min_sampled(
            b, sys_, U, schedule,
            time_grid=c["time_grid"], boundary_samples=c["boundary_samples"],
            refine_steps=c["refine_steps"], seed=seed, domain=domain,
        )
    primary = certs.get("closed_form") or certs["sampled"]
    flags = []
    if "closed_form" in certs and "sampled" in certs:
        gap = _relative_gap(certs["closed_form"].sigma_min, certs["sampled"].sigma_min)
        if gap > DISCREPANCY_RTOL:
            flags.append({
                "kind": "closed_form_vs_sampled",
                "closed_form": certs["closed_form"].sigma_min,
                "sampled": certs["sampled"].sigma_min,
                "relative_gap": gap,
            })
    for key, value in (("sigma_min", c["reference_sigma_min"]), ("t_min", c["reference_t_min"])):
        if value is None:
            continue
        mine = primary.sigma_min if key == "sigma_min" else primary.t_min
        gap = _relative_gap(value, mine)
        if gap > DISCREPANCY_RTOL:
            flags.append({"kind": f"reference_{key}", "reference": value, "computed": mine, "relative_gap": gap})
    # reference T_min implied by a reference sigma_min, for the consistency check
    if c["reference_sigma_min"] is not None and c["reference_t_min"] is not None:
        implied = t_min(schedule.r0, c["reference_sigma_min"])
        gap = _relative_gap(implied, c["reference_t_min"])
        if gap > DISCREPANCY_RTOL:
            flags.append({"kind": "reference_inconsistent", "r0_over_sigma_min": implied,
                          "reference_t_min": c["reference_t_min"], "relative_gap": gap})
    out = primary.to_dict()
    out.update({
        "scenario": cfg.name,
        "T": schedule.T,
        "T_satisfies_T_min": bool(schedule.T >= primary.t_min),
        "discrepancy_flags": flags,
        "certificates": {k: v.to_dict() for k, v in certs.items()},
    })
    if primary.seed is None:
        out["seed"] = seed
    return out


def _sweep_one(args):
    path, out_root, warm_start = args
    try:
        cfg = cfgmod.load(path)
        summary = run_scenario(cfg, str(Path(out_root) / cfg.name), warm_start=warm_start)
        return path, 0, summary
    except CtubeError as exc:
        return path, 1, str(exc)


def sweep(directory, out_root: str = "out", jobs: Optional[int] = None, warm_start: bool = True):
    """Run every ``*.cfg`` under ``directory`` in a process pool."""
    paths = sorted(str(p) for p in Path(directory).glob("*.cfg"))
    if not paths:
        raise ConfigurationError(f"no .cfg files in {directory}")
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_sweep_one, [(p, out_root, warm_start) for p in paths]))


def _load(args):
    cfg = cfgmod.load(args.config)
    if getattr(args, "dt", None) is not None:
        if not args.dt > 0:
            raise ConfigurationError(f"--dt must be positive, got {args.dt}")
        cfg = replace(cfg, dt=args.dt)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctube", description="Constricting-tube prescribed-time safety experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dt=True):
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        if dt:
            p.add_argument("--dt", type=float, help="override the integration step")

    p = sub.add_parser("run", help="simulate a scenario")
    p.add_argument("config")
    common(p)
    p.add_argument("--no-warm-start", action="store_true", help="cold-start every QP / plan")

    p = sub.add_parser("certify", help="compute sigma_min and T_min")
    p.add_argument("config")
    common(p, dt=False)

    p = sub.add_parser("authority-map", help="write sigma over a 2-D grid")
    p.add_argument("config")
    common(p, dt=False)

    p = sub.add_parser("sweep", help="run every .cfg in a directory concurrently")
    p.add_argument("directory")
    p.add_argument("--out", default="out")
    p.add_argument("--jobs", type=int)
    p.add_argument("--no-warm-start", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "run":
            summary = run_scenario(_load(args), args.out, warm_start=not args.no_warm_start)
            print(json.dumps(_clean(summary), indent=2, sort_keys=True, default=_json_default))
        elif args.command == "certify":
            cfg = _load(args)
            cert = certify(cfg, args.seed)
            write_json(_out_dir(cfg, args.out) / "certificate.json", cert)
            print(json.dumps(_clean(cert), indent=2, sort_keys=True, default=_json_default))
        elif args.command == "authority-map":
            cfg = _load(args)
            print(authority_map(cfg, _out_dir(cfg, args.out)))
        else:
            status = 0
            for path, code, result in sweep(args.directory, args.out, args.jobs, not args.no_warm_start):
                print(f"{path}: {'ok' if code == 0 else 'FAILED: ' + result}")
                status = max(status, code)
            return status
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except CtubeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0
