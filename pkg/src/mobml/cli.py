"""Command line interface.

Exit codes: 0 success, 2 configuration or validation error, 3 numerical
failure, 1 unexpected internal error. Every subcommand writes a JSON report
(``<subcommand>.json``) and a log into the output directory. Set
``MOBML_LOG=DEBUG`` for verbose logging.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import _backend
from .dynamics import mean_squared_displacement, simulate
from .errors import ConfigurationError, DidNotConverge, NumericalError
from .inference import (
    OptimizerSettings,
    ParametricMobilityFamily,
    axis_force_ensembles,
    estimate_active,
    estimate_passive,
    fit_kernel_model,
    fit_mle,
    frozen_ensemble,
    random_directions,
    ray_samples,
)
from .io_config import load_model_file, load_run_config, load_trajectory, save_model_file, save_trajectory
from .mobility import set_num_threads

log = logging.getLogger("mobml")


def _write_report(out_dir: Path, name: str, report: dict) -> Path:
    path = out_dir / f"{name}.json"
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return path


def _load_run(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"sim.seed={args.seed}")
    return load_run_config(args.params, overrides)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args, out: Path) -> dict:
    run = _load_run(args)
    traj = simulate(run)
    path = out / Path(run.trajectory).name
    save_trajectory(traj, path)
    log.info("wrote %d states to %s (%d mobility repairs)", traj.times.size, path, traj.meta["repairs"])
    report = {"trajectory": str(path), "n_states": int(traj.times.size),
              "repairs": int(traj.meta["repairs"]), "backend": _backend.NAME}
    if args.emit_msd:
        lags, msd = mean_squared_displacement(traj, min(args.emit_msd, traj.times.size - 1))
        msd_path = out / "msd.csv"
        rows = ["lag,msd"] + [f"{format(t, '.17g')},{format(m, '.17g')}" for t, m in zip(lags, msd)]
        msd_path.write_text("\n".join(rows) + "\n")
        report["msd"] = str(msd_path)
    return report


def cmd_estimate_passive(args, out: Path) -> dict:
    run = _load_run(args)
    model = run.build_model()
    x = run.initial_positions()
    tau = args.tau or run.sim.dt
    ens = frozen_ensemble(model, x, run.sim, args.samples, n_steps=args.member_steps, workers=args.threads)
    rep = estimate_passive(ens, tau, run.sim.kBT)
    return {"estimator": "passive", **rep.to_dict()}


def cmd_estimate_active(args, out: Path) -> dict:
    run = _load_run(args)
    model = run.build_model()
    x = run.initial_positions()
    tau = args.tau or run.sim.dt
    ens = axis_force_ensembles(model, x, run.sim, args.force_magnitude, args.samples,
                               n_steps=args.member_steps, workers=args.threads)
    rep = estimate_active(ens, tau)
    return {"estimator": "active", "force_magnitude": args.force_magnitude, **rep.to_dict()}


def _parse_bounds(items, size):
    if not items:
        return [(1e-3, 1e3)] * size
    bounds = []
    for item in items:
        try:
            lo, hi = (float(v) for v in item.split(","))
        except ValueError as exc:
            raise ConfigurationError(f"expected lo,hi got {item!r}", "--bounds") from exc
        bounds.append((lo, hi))
    return bounds


def cmd_fit_mle(args, out: Path) -> dict:
    run = _load_run(args)
    if args.trajectory:
        traj = load_trajectory(args.trajectory)
    else:
        traj = simulate(run)
    size = {"scalar_iso": 1, "oseen": 2}[args.family]
    theta0 = args.theta0 or ([1.0] * size)
    family = ParametricMobilityFamily(args.family, theta0, _parse_bounds(args.bounds, size))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DidNotConverge)
        fitted = fit_mle(family, traj, run.sim, OptimizerSettings(max_iter=args.max_iter),
                         field=run.force)
    for w in caught:
        log.warning("%s", w.message)
    model = fitted.model()
    save_model_file(model.self_model, out / "M_ii_fit.json")
    save_model_file(model.pair_model, out / "M_ij_fit.json")
    log.info("theta = %s, NLL = %.17g", fitted.theta.tolist(), fitted.nll)
    return fitted.to_dict()


def cmd_fit_kernel(args, out: Path) -> dict:
    source = load_model_file(args.source)
    length = source.characteristic_length
    lo, hi, count = args.radii
    radii = np.linspace(lo * length, hi * length, int(count))
    bandwidth = (args.bandwidth or 3.0) * length
    dirs = random_directions(args.directions, args.seed)
    samples = ray_samples(source, dirs, radii)
    model = fit_kernel_model(samples, bandwidth, args.ridge, positive_diagonal=args.positive_diagonal)
    path = out / args.output_name
    save_model_file(model, path)
    # held-out check along the same rays, between sample radii
    mids = 0.5 * (radii[1:] + radii[:-1])
    errs = [np.linalg.norm(model.block(v) - b) / np.linalg.norm(b) for v, b in ray_samples(source, dirs, mids)]
    return {"model": str(path), "n_samples": len(samples), "bandwidth": bandwidth, "ridge": args.ridge,
            "heldout_max_rel_frobenius": float(max(errs)) if errs else None}


def probe_statistics(model, radii=None, n_directions: int = 26, seed: int = 0) -> dict:
    """Evaluate a block source on a probe grid and summarize PSD/symmetry/decay."""
    if model.kind in ("constant", "oseen_self", "kernel_self"):
        blocks = [model.block()]
        pairs = []
    else:
        if radii is None:
            lo = getattr(getattr(model, "params", None), "r_min", None) or model.characteristic_length
            radii = np.geomspace(lo, 8 * lo, 7)
        dirs = random_directions(n_directions, seed)
        blocks = []
        pairs = []
        for d in dirs:
            for r in radii:
                b = model.block(d * r)
                b2 = model.block(d * 2 * r)
                blocks.append(b)
                m2 = np.abs(b2).max()
                pairs.append(np.abs(b).max() / m2 if m2 > 0 else np.inf)
    sym = max(float(np.abs(b - b.T).max()) for b in blocks)
    eigs = [np.linalg.eigvalsh(0.5 * (b + b.T)) for b in blocks]
    ratios = [e[0] / e[-1] if e[-1] > 0 else 0.0 for e in eigs]
    report = {
        "kind": model.kind,
        "n_probes": len(blocks),
        "symmetry_residual": sym,
        "min_eigenvalue": float(min(e[0] for e in eigs)),
        "min_eigenvalue_ratio": float(min(ratios)),
    }
    if pairs:
        report["decay_ratio_r_to_2r"] = {"min": float(min(pairs)), "max": float(max(pairs)),
                                        "mean": float(np.mean(pairs))}
    return report


def cmd_validate_model(args, out: Path) -> dict:
    model = load_model_file(args.model)
    radii = np.geomspace(args.r_range[0], args.r_range[1], 7) if args.r_range else None
    report = probe_statistics(model, radii)
    print(json.dumps(report, indent=1, sort_keys=True))
    return report


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate-active": cmd_estimate_active,
    "estimate-passive": cmd_estimate_passive,
    "fit-mle": cmd_fit_mle,
    "fit-kernel": cmd_fit_kernel,
    "validate-model": cmd_validate_model,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mobml", description=__doc__.splitlines()[0])
    parser.add_argument("-o", "--output-dir", default=".", help="directory for outputs (created)")
    parser.add_argument("--threads", type=int, default=1,
                        help="threads for pair kernels and ensembles; results do not depend on it")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_params(p):
        p.add_argument("params", help="XML parameter file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value, e.g. sim.dt=0.001 (repeatable)")
        p.add_argument("--seed", type=int, help="override sim.seed")
        return p

    p = with_params(sub.add_parser("simulate", help="integrate the dynamics and write a trajectory"))
    p.add_argument("--emit-msd", type=int, metavar="MAX_LAG", help="also write lag/MSD CSV")

    for name, helptext in (("estimate-passive", "moment estimator from thermal fluctuations"),
                           ("estimate-active", "response estimator from applied forces")):
        p = with_params(sub.add_parser(name, help=helptext))
        p.add_argument("--samples", type=int, default=10000, help="members per ensemble")
        p.add_argument("--tau", type=float, help="lag (default: sim.dt)")
        p.add_argument("--member-steps", type=int, default=2, help="steps per restarted member")
        if name == "estimate-active":
            p.add_argument("--force-magnitude", type=float, default=1.0)

    p = with_params(sub.add_parser("fit-mle", help="maximum-likelihood fit of a parametric family"))
    p.add_argument("--family", choices=("scalar_iso", "oseen"), default="scalar_iso")
    p.add_argument("--theta0", type=float, nargs="+")
    p.add_argument("--bounds", action="append", metavar="LO,HI", help="one per parameter")
    p.add_argument("--trajectory", help="fit this CSV instead of simulating the params file")
    p.add_argument("--max-iter", type=int, default=500)

    p = sub.add_parser("fit-kernel", help="compress a pair model into a kernel model")
    p.add_argument("--source", required=True, help="pair model JSON to sample")
    p.add_argument("--bandwidth", type=float, help="in units of the source length scale (default 3)")
    p.add_argument("--ridge", type=float, default=1e-10)
    p.add_argument("--directions", type=int, default=4, help="sample rays")
    p.add_argument("--radii", type=float, nargs=3, default=(2.5, 10.0, 8), metavar=("LO", "HI", "COUNT"),
                   help="radii per ray, in units of the source length scale")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--positive-diagonal", action="store_true")
    p.add_argument("--output-name", default="kernel_pair.json")

    p = sub.add_parser("validate-model", help="check a model file and report its properties")
    p.add_argument("model")
    p.add_argument("--r-range", type=float, nargs=2, metavar=("LO", "HI"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Path(args.output_dir)
    level = os.environ.get("MOBML_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(message)s")
    try:
        out.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(out / f"{args.command}.log", mode="w")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        log.addHandler(handler)
        set_num_threads(max(1, args.threads))
        report = COMMANDS[args.command](args, out)
        _write_report(out, args.command, report)
        return 0
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001
        if level == "DEBUG":
            raise
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        for h in list(log.handlers):
            if isinstance(h, logging.FileHandler):
                log.removeHandler(h)
                h.close()


if __name__ == "__main__":
    sys.exit(main())
