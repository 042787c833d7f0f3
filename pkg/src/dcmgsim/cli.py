"""Command-line front end.

Every subcommand is a thin shell over the library; anything printed here
can be recomputed from the written artifacts.  The default output root is
$DCMGSIM_OUT (falling back to ./out).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, report
from .attacks import (cooperative_residual, design_cooperative,
                      predict_cooperative_impact, predict_mitigated_apvd,
                      predict_single_impact)
from .countermeasure import calibrate_threshold
from .dac import DacParams, certify_rac
from .netgraph import build_laplacian
from .scenario import (SCHEMA_VERSION, ScenarioError, load_attacks,
                       load_scenario)
from .simkernel import SimulationError, run, twin_run
from .trace import load_trace_dir, stealth_report

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2


def _out_root() -> Path:
    return Path(os.environ.get("DCMGSIM_OUT", "out"))


def _load(args):
    cfg = load_scenario(args.scenario)
    if getattr(args, "attack", None):
        cfg = cfg.with_attacks(load_attacks(args.attack))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "fidelity", None):
        cfg = cfg.with_fidelity(args.fidelity)
    if getattr(args, "threshold", None) is not None:
        cfg = cfg.with_countermeasure(threshold=args.threshold)
    if getattr(args, "monitor_only", False):
        cfg = cfg.with_countermeasure(enabled=False)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    outdir = Path(args.out) if args.out else _out_root() / cfg.name
    trace = run(cfg)
    paths = trace.save(outdir)
    s = trace.summary()
    print(f"wrote {paths['trace']}")
    print(f"steady apvd {s['steady_apvd']:.6g} V, classification {s['classification']}, "
          f"alarms {s['alarm_times'] or 'none'}, "
          f"max residual margin {s['max_uio_margin']}")
    return EXIT_OK


def cmd_twin(args) -> int:
    cfg = _load(args)
    outdir = Path(args.out) if args.out else _out_root() / f"{cfg.name}_twin"
    attacked, clean = twin_run(cfg)
    attacked.save(outdir / "attacked")
    clean.save(outdir / "clean")
    rep = stealth_report(attacked, clean)
    with open(outdir / "stealth.json", "w") as fh:
        json.dump(rep, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"max residual difference {rep['max_residual_diff']:.3e}, "
          f"max psi divergence {rep['max_psi_diff']:.3e}, "
          f"crossings attacked/clean "
          f"{rep['attacked_crossings']}/{rep['clean_crossings']}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _load(args)
    result = calibrate_threshold(cfg, margin=args.margin, seed=args.seed)
    print(f"noise floor: {result.noise_floor:.6g} V s")
    for label, peak in result.per_op.items():
        print(f"  {label}: max indicator {peak:.6g} V s")
    for label in result.excluded:
        print(f"  {label}: excluded (run failed)")
    print(f"threshold (margin {result.margin:g}): {result.threshold:.6g} V s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"threshold": result.threshold, "margin": result.margin,
                       "noise_floor": result.noise_floor, "per_op": result.per_op,
                       "excluded": result.excluded}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _load(args)
    specs = load_attacks(args.attack)
    for spec in specs:
        if spec.layer != "dgu":
            raise ScenarioError("impact prediction covers unit-output links only")
    geoms = [cfg.link_geometry(s.link) for s in specs]
    n, k_I = cfg.n_consensus_units, cfg.k_I

    def const_of(spec):
        d = spec.fake_input(0.0)
        if np.any(np.abs(spec.fake_input(0.4) - d) > 0):
            return None
        return d

    dfakes = [const_of(s) for s in specs]
    print(f"{'link':>8} {'slope V/s':>12} {'offset V':>12} class")
    preds = []
    for spec, geom, d in zip(specs, geoms, dfakes):
        if d is None:
            print(f"{str(spec.link):>8} {'-':>12} {'-':>12} time-varying")
            continue
        p = predict_single_impact(d, geom, k_I, n)
        preds.append((geom, d))
        print(f"{str(spec.link):>8} {p.apvd_slope:12.6g} {p.apvd_offset:12.6g} "
              f"{p.classification}")
    if preds:
        gs = [g for g, _ in preds]
        ds = [d for _, d in preds]
        joint = predict_cooperative_impact(ds, gs, k_I, n)
        post = predict_mitigated_apvd(ds, gs, k_I, n, cfg.countermeasure.k_ci,
                                      cfg.v_ref)
        print(f"cooperative residual: {cooperative_residual(ds, gs, k_I):.6g}")
        print(f"joint offset: {joint.apvd_offset:.6g} V ({joint.classification}); "
              f"current sharing violated: {joint.current_sharing_violated}")
        print(f"post-mitigation average voltage: {post:.9g} V "
              f"(deviation {post - cfg.v_ref:.6g} V)")
    return EXIT_OK


def cmd_design_coop(args) -> int:
    cfg = _load(args)
    links = [tuple(int(v) for v in pair.split(",")) for pair in args.links]
    if len(links) < 2:
        print("cooperative design needs at least two links", file=sys.stderr)
        return EXIT_CONFIG
    fixed_vals = [tuple(float(v) for v in pair.split(",")) for pair in args.fixed]
    if len(fixed_vals) != len(links) - 1:
        print("need exactly one fixed input per link except the last",
              file=sys.stderr)
        return EXIT_CONFIG
    geoms = [cfg.link_geometry(lk) for lk in links]
    fixed = [(g, np.asarray(d)) for g, d in zip(geoms[:-1], fixed_vals)]
    solved = design_cooperative(fixed, geoms[-1], cfg.k_I)
    ds = [np.asarray(d) for d in fixed_vals] + [solved]
    resid = cooperative_residual(ds, geoms, cfg.k_I)
    print(f"solved input for link {links[-1]}: [{solved[0]:.9g}, {solved[1]:.9g}]")
    print(f"cancellation residual: {resid:.3e}")
    if args.out:
        lines = ["# cooperative injection set (generated)"]
        for lk, d in zip(links, ds):
            lines += ["", "[[attack]]", f"link = [{lk[0]}, {lk[1]}]",
                      f"t_start = {args.t_start}", 'layer = "dgu"',
                      f"fake_input = {{ const = [{d[0]:.12g}, {d[1]:.12g}] }}"]
        Path(args.out).write_text("\n".join(lines) + "\n")
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_check_rac(args) -> int:
    cfg = _load(args)
    a = args.a if args.a is not None else cfg.dac_a
    gamma = args.gamma if args.gamma is not None else cfg.dac_gamma
    params = DacParams(a=a, gamma=gamma)
    lap = build_laplacian(cfg.topology, cfg.topology.dac_weights)
    lams = np.sort(np.linalg.eigvalsh(lap))[1:]
    cert = certify_rac(params, lams)
    print(f"a = {a:g}, gamma = {gamma:g}; structure conditions: "
          f"{'ok' if cert.structure_ok else 'FAILED'}")
    for e in cert.entries:
        print(f"  lambda = {e.lam:10.4f}: max Re = {e.max_real_part:10.4f}  "
              f"disc = {e.discriminant:.3e}  real root = {e.real_root:10.4f}  "
              f"{'ok' if e.numeric_ok and e.analytic_ok else 'FAILED'}")
    print("robust average consensus: " + ("certified" if cert.ok else "FAILED"))
    return EXIT_OK if cert.ok else EXIT_ABORT


def cmd_plot(args) -> int:
    trace = load_trace_dir(args.run_dir)
    links = [tuple(int(v) for v in pair.split(",")) for pair in (args.link or [])]
    out = args.out or (Path(args.run_dir) / "figures" / "panels.svg")
    path = report.render(trace, args.panels, out, links=links)
    print(f"wrote {path}")
    return EXIT_OK


def _batch_worker(job: dict) -> str:
    cfg = load_scenario(job["scenario"])
    if job.get("attack"):
        cfg = cfg.with_attacks(load_attacks(job["attack"]))
    if "seed" in job:
        cfg = cfg.with_seed(int(job["seed"]))
    if "fidelity" in job:
        cfg = cfg.with_fidelity(job["fidelity"])
    trace = run(cfg)
    outdir = Path(job["out"])
    trace.save(outdir)
    return str(outdir)


def cmd_batch(args) -> int:
    if sys.version_info >= (3, 11):
        import tomllib
    else:  # pragma: no cover
        import tomli as tomllib
    doc = tomllib.loads(Path(args.jobs).read_text())
    jobs = doc.get("run", [])
    if not jobs:
        print("no [[run]] entries in the batch file", file=sys.stderr)
        return EXIT_CONFIG
    root = Path(args.out) if args.out else _out_root() / "batch"
    for k, job in enumerate(jobs):
        job.setdefault("out", str(root / job.get("name", f"run{k}")))
    with ProcessPoolExecutor(max_workers=args.workers) as pool:
        for done in pool.map(_batch_worker, jobs):
            print(f"finished {done}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dcmgsim",
        description="DC microgrid attack/defense simulation toolkit")
    ap.add_argument("--version", action="version",
                    version=f"dcmgsim {__version__} (schema {SCHEMA_VERSION})")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(p, attack=True):
        p.add_argument("--scenario", required=True,
                       help="built-in name or path to a scenario .toml")
        if attack:
            p.add_argument("--attack", help="built-in name or attack .toml")
        p.add_argument("--seed", type=int)
        p.add_argument("--fidelity", choices=("full", "reduced"))

    p = sub.add_parser("run", help="simulate and write trace/events/summary")
    add_common(p)
    p.add_argument("--out")
    p.add_argument("--threshold", type=float, help="override the alarm level")
    p.add_argument("--monitor-only", action="store_true",
                   help="indicators on, alarms and compensation off")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("twin", help="attacked run plus noise-identical clean twin")
    add_common(p)
    p.add_argument("--out")
    p.add_argument("--threshold", type=float)
    p.set_defaults(fn=cmd_twin)

    p = sub.add_parser("calibrate", help="alarm level from tolerated operations")
    add_common(p, attack=False)
    p.add_argument("--margin", type=float, default=1.1)
    p.add_argument("--json", help="also write the report as JSON")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("predict-impact", help="closed-form impact of an attack file")
    add_common(p)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("design-coop", help="solve a rate-cancelling injection set")
    add_common(p, attack=False)
    p.add_argument("--links", nargs="+", required=True, metavar="I,J")
    p.add_argument("--fixed", nargs="*", default=[], metavar="D1,D2",
                   help="fixed fake inputs, one per link except the last")
    p.add_argument("--t-start", type=float, default=6.0)
    p.add_argument("--out", help="write the solved set as an attack .toml")
    p.set_defaults(fn=cmd_design_coop)

    p = sub.add_parser("check-rac", help="robust average consensus certificate")
    add_common(p, attack=False)
    p.add_argument("--a", type=float)
    p.add_argument("--gamma", type=float)
    p.set_defaults(fn=cmd_check_rac)

    p = sub.add_parser("plot", help="render trace panels to an image file")
    p.add_argument("run_dir", help="output directory of a previous run")
    p.add_argument("--panels", nargs="+", required=True)
    p.add_argument("--link", action="append", metavar="I,J",
                   help="residual panel link (repeatable)")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("batch", help="fan out runs listed in a TOML job file")
    p.add_argument("--jobs", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_batch)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ScenarioError, FileNotFoundError, report.PlotError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"simulation aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
