"""Command line entry point.

Exit codes: 0 when every run converged, 2 when a run stalled or hit the
tick limit, 1 on an error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .errors import InvalidSpecError, ModalShapeError, RunAborted
from .harness import DEFAULT_CACHE, export_csv, run_baseline, run_scenario, summarize, sweep
from .mesh import (EllipsoidSpec, MaterialParams, RigidTransform, assemble_system,
                   generate_ellipsoid_mesh, read_mesh, write_mesh)
from .modal import save_basis, solve_modes
from .scenario import load_scenario

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2


def _exit_for(status):
    return EXIT_OK if status == "converged" else EXIT_NOT_CONVERGED


def _print_summary(summary):
    print(json.dumps(summary, default=float))


def cmd_run(args):
    sc = load_scenario(args.scenario)
    run = run_baseline if args.baseline else run_scenario
    rec = run(sc, seed=args.seed)
    if args.out:
        export_csv(rec, args.out)
    _print_summary(summarize(rec, sc.tol_rel))
    return _exit_for(rec.status)


def cmd_sweep(args):
    paths = sorted(Path(args.directory).rglob("*.yaml"))
    if not paths:
        print(f"no scenario files under {args.directory}", file=sys.stderr)
        return EXIT_ERROR
    code = EXIT_OK
    results = sweep(paths, baseline=args.baseline, workers=args.workers)
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    for path, (sc, rec) in zip(paths, results):
        if isinstance(rec, RunAborted):
            print(json.dumps({"file": str(path), "name": sc.name, "status": "error", "error": str(rec)}))
            code = EXIT_ERROR
            continue
        if out_dir:
            export_csv(rec, out_dir / f"{sc.name}.csv")
        _print_summary({"file": str(path), **summarize(rec, sc.tol_rel)})
        if code == EXIT_OK:
            code = _exit_for(rec.status)
    print(f"# basis cache: {DEFAULT_CACHE.hits} hits, {DEFAULT_CACHE.misses} misses", file=sys.stderr)
    return code


def cmd_modes(args):
    mesh = read_mesh(args.mesh)
    basis = solve_modes(assemble_system(mesh, MaterialParams(args.E, args.v, args.M)), args.m)
    out = args.out or f"{args.mesh}.modes"
    save_basis(basis, out)
    print(json.dumps({"file": out, "n_dofs": basis.n_dofs, "m": basis.m,
                      "freqs": [float(f) for f in basis.freqs]}))
    return EXIT_OK


def spec_from_mapping(data) -> EllipsoidSpec:
    """Ellipsoid spec from ``a_x a_y a_z`` plus optional ``n_lat n_lon n_rad``,
    ``euler_deg`` and ``translation`` keys."""
    if not isinstance(data, dict):
        raise InvalidSpecError("mesh spec must be a mapping")
    data = dict(data)
    missing = {"a_x", "a_y", "a_z"} - set(data)
    if missing:
        raise InvalidSpecError(f"mesh spec is missing {sorted(missing)}")
    pose = RigidTransform.from_euler_deg(data.pop("euler_deg", (0.0, 0.0, 0.0)),
                                         data.pop("translation", (0.0, 0.0, 0.0)))
    unknown = set(data) - {"a_x", "a_y", "a_z", "n_lat", "n_lon", "n_rad"}
    if unknown:
        raise InvalidSpecError(f"unknown mesh spec keys: {sorted(unknown)}")
    return EllipsoidSpec(pose=pose, **data)


def cmd_mesh_gen(args):
    spec = spec_from_mapping(yaml.safe_load(Path(args.spec).read_text()))
    mesh = generate_ellipsoid_mesh(spec).transformed(spec.pose)
    out = args.out or str(Path(args.spec).with_suffix(".mesh"))
    write_mesh(mesh, out)
    print(json.dumps({"file": out, "nodes": mesh.n_nodes, "tets": len(mesh.tets)}))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="modalshape", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario file")
    r.add_argument("scenario")
    r.add_argument("--out", help="write the run record as CSV")
    r.add_argument("--seed", type=int)
    r.add_argument("--baseline", action="store_true", help="use the point-based baseline controller")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run every *.yaml scenario below a directory")
    s.add_argument("directory")
    s.add_argument("--out", help="directory for one CSV per run")
    s.add_argument("--baseline", action="store_true")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("modes", help="solve and dump the modal basis of a mesh file")
    m.add_argument("mesh")
    m.add_argument("m", type=int)
    m.add_argument("--E", type=float, default=50.0)
    m.add_argument("--v", type=float, default=0.45)
    m.add_argument("--M", type=float, default=20.0)
    m.add_argument("--out")
    m.set_defaults(func=cmd_modes)

    g = sub.add_parser("mesh", help="mesh utilities")
    gsub = g.add_subparsers(dest="mesh_command", required=True)
    gen = gsub.add_parser("gen", help="write an ellipsoid mesh from a YAML spec")
    gen.add_argument("spec")
    gen.add_argument("--out")
    gen.set_defaults(func=cmd_mesh_gen)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RunAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(f"diagnostics: {exc.diagnostics}", file=sys.stderr)
        return EXIT_ERROR
    except (ModalShapeError, OSError, ValueError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
