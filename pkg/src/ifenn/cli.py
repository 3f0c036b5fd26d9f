"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline
from .config import build_mesh_from_config, load_config
from .errors import (
    Aborted,
    DivergedLoss,
    IfennError,
    InvalidGeometry,
    NotConverged,
    SingularMatrix,
)
from .fem_core import IFENN, METHODS
from .mesh import write_mesh
from .pinn import init_xavier, load_weights, save_weights, train
from .solver import run_analysis

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
NUMERICAL = (Aborted, NotConverged, SingularMatrix, DivergedLoss)


class UsageError(Exception):
    pass


def _out_dir(args, cfg) -> Path:
    d = args.out_dir or os.environ.get("IFENN_OUT") or cfg.paths.output_dir
    path = Path(d)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _out_file(args, cfg, name) -> Path:
    p = Path(name)
    return p if p.is_absolute() else _out_dir(args, cfg) / p


def _config(args, **overrides):
    ov = {k: v for k, v in overrides.items() if v}
    return load_config(args.config, args.preset, ov)


def _log(args, msg):
    if not args.quiet:
        print(msg, file=sys.stderr)


def cmd_mesh(args) -> int:
    geo = {}
    for key in ("width", "height", "nx", "ny", "notch", "applied_displacement"):
        val = getattr(args, key)
        if val is not None:
            geo[key] = val
    if "width" in geo and "notch" not in geo and args.preset is None:
        # keep the default notch-to-width ratio when only the size changes
        base = load_config(args.config).geometry
        geo["notch"] = base.notch / base.width * geo["width"]
    cfg = _config(args, geometry=geo)
    mesh = build_mesh_from_config(replace(cfg, paths=replace(cfg.paths, mesh="")))
    path = _out_file(args, cfg, args.output)
    write_mesh(mesh, path)
    _log(args, f"wrote {mesh.n_elements} elements, {mesh.n_nodes} nodes to {path}")
    return EXIT_OK


def _solver_overrides(args):
    s = {}
    if args.method:
        s["method"] = args.method
    if args.snapshots:
        s["snapshot_lfs"] = args.snapshots
    if args.increments:
        s["n_increments"] = args.increments
    return s


def cmd_solve(args) -> int:
    paths = {}
    if args.mesh:
        paths["mesh"] = args.mesh
    if args.weights:
        paths["weights"] = args.weights
    cfg = _config(args, solver=_solver_overrides(args), paths=paths)
    network = None
    if cfg.solver.method == IFENN:
        if not cfg.paths.weights:
            raise UsageError("method ifenn requires --weights")
        network = load_weights(cfg.paths.weights)
    mesh = build_mesh_from_config(cfg)
    material = cfg.material.build()
    status = EXIT_OK
    try:
        res = run_analysis(cfg.solver, mesh, material, network)
        curve, snaps, state = res.curve, res.snapshots, res.state
    except Aborted as exc:
        _log(args, f"aborted: {exc}")
        rows = [(r.lf, r.reactions, r.iterations, r.n_dofs, r.wall_time) for r in exc.results or []]
        curve, snaps, state = np.array(rows, dtype=float).reshape(-1, 5), {}, exc.state
        status = EXIT_NUMERIC
    pipeline.write_curve(curve, _out_file(args, cfg, "curve.csv"), _out_file(args, cfg, "timing.csv"))
    for target, snap in sorted(snaps.items()):
        pipeline.write_snapshot(snap, _out_file(args, cfg, f"snapshot_lf{target:.4f}.csv"))
    if state is not None:
        state.save(_out_file(args, cfg, "state.npz"))
    _log(args, f"{len(curve)} increments written to {_out_dir(args, cfg)}")
    return status


def cmd_export(args) -> int:
    paths = {"mesh": args.mesh} if args.mesh else {}
    cfg = _config(args, paths=paths)
    mesh = build_mesh_from_config(cfg)
    snap = pipeline.read_snapshot(args.snapshot)
    lf = snap.lf if (args.with_lf or cfg.use_lf) else None
    data = pipeline.export_collocation(snap, mesh, cfg.solver.g, lf)
    path = _out_file(args, cfg, args.output)
    pipeline.write_collocation(data, path)
    _log(args, f"{len(data.interior)} interior and {len(data.boundary)} boundary rows written to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    t = {}
    if args.epochs is not None:
        t["epochs"] = args.epochs
    if args.seed is not None:
        t["seed"] = args.seed
    if args.lr is not None:
        t["learning_rate"] = args.lr
    cfg = load_config(args.config, args.preset, {"train": t} if t else None)
    data = pipeline.read_collocation(args.colloc)
    tc = cfg.train
    net = init_xavier([data.width, *tc.hidden, 1], tc.seed, tc.scale_exp)
    every = max(1, tc.epochs // 20)
    trained, history = train(net, data, tc, callback=lambda e, J: _log(args, f"epoch {e} loss {J:.6e}")
                             if e % every == 0 else None)
    wpath = _out_file(args, cfg, args.output)
    save_weights(trained, wpath)
    hpath = wpath.with_name(wpath.stem + "_loss.csv")
    hpath.write_text("epoch,loss\n" + "".join(f"{i},{J!r}\n" for i, J in enumerate(history)))
    _log(args, f"loss {history[0]:.4e} -> {history[-1]:.4e}; weights in {wpath}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config, args.preset)
    ref = pipeline.read_snapshot(args.reference)
    pred = pipeline.read_snapshot(args.predicted)
    reports = pipeline.compare_snapshots(ref, pred)
    path = _out_file(args, cfg, args.output)
    rep = reports[args.field]
    pipeline.write_report(rep, path, path.with_name(path.stem + "_summary.csv"))
    print(f"l2_mismatch={rep.l2_mismatch:.6e} mean_rse={rep.mean_rse:.6e} n_undefined={rep.n_undefined}")
    return EXIT_OK


def _lf_list(text):
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad loadfactor list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key=value run configuration")
    common.add_argument("--preset", choices=["single-notch", "double-notch", "l-shape"])
    common.add_argument("--out-dir", help="output directory (default: $IFENN_OUT or the config value)")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1 for reproducibility)")
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="ifenn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mesh", parents=[common], help="generate a mesh file")
    m.add_argument("--width", type=float)
    m.add_argument("--height", type=float)
    m.add_argument("--nx", type=int)
    m.add_argument("--ny", type=int)
    m.add_argument("--notch", type=float)
    m.add_argument("--applied-displacement", dest="applied_displacement", type=float)
    m.add_argument("-o", "--output", default="mesh.txt")
    m.set_defaults(func=cmd_mesh)

    s = sub.add_parser("solve", parents=[common], help="run an incremental analysis")
    s.add_argument("--method", choices=list(METHODS))
    s.add_argument("--mesh", help="mesh file (default: generate from the config)")
    s.add_argument("--weights", help="trained network, required for ifenn")
    s.add_argument("--snapshots", type=_lf_list, help="comma-separated loadfactors to snapshot")
    s.add_argument("--increments", type=int)
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("export-colloc", parents=[common], help="collocation CSV from a snapshot")
    e.add_argument("--snapshot", required=True)
    e.add_argument("--mesh")
    e.add_argument("--with-lf", action="store_true", help="append the loadfactor input column")
    e.add_argument("-o", "--output", default="colloc.csv")
    e.set_defaults(func=cmd_export)

    t = sub.add_parser("train", parents=[common], help="train the network on a collocation CSV")
    t.add_argument("--colloc", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("-o", "--output", default="weights.txt")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compare", parents=[common], help="RSE / L2 report between two snapshots")
    c.add_argument("--reference", required=True)
    c.add_argument("--predicted", required=True)
    c.add_argument("--field", choices=["eps_bar", "d"], default="eps_bar")
    c.add_argument("-o", "--output", default="report.csv")
    c.set_defaults(func=cmd_compare)
    return p


def _thread_limit(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except NUMERICAL as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, IfennError, InvalidGeometry, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
