"""Command line entry point: ``gapfem run <config> [overrides]``.

Exit codes: 0 on success, 1 on configuration errors, 2 on numerical
failures (assembly, solve, or every level of a study failing).
"""

import argparse
import os
import sys

from . import harness
from .assembly import AssemblyError
from .mesh import MeshError
from .solve_post import SolverError


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="gapfem",
        description="Hybridized Nitsche multipatch experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a study from a config file")
    run.add_argument("config", help="key = value configuration file")
    run.add_argument("--study", help="override study kind")
    run.add_argument("--geometry", help="override geometry (torus | planar)")
    run.add_argument("--p", help="override spline degree")
    run.add_argument("--levels", help="override mesh sizes, comma separated")
    run.add_argument("--delta", help="override gap sizes, comma separated")
    run.add_argument("--s", help="override scaling exponents, comma separated")
    run.add_argument("--tau0", help="override hybrid stabilization strength")
    run.add_argument("--out", help="override output directory")
    run.add_argument(
        "--no-figures", action="store_true", help="skip matplotlib figure output"
    )
    run.add_argument(
        "--dump-meshes", action="store_true", help="write plain-text mesh listings"
    )
    return parser


_OVERRIDE_KEYS = {
    "study": "study",
    "geometry": "geometry",
    "p": "p",
    "levels": "levels",
    "delta": "deltas",
    "s": "s_values",
    "tau0": "tau0",
    "out": "out",
}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        overrides = {}
        for arg_name, cfg_key in _OVERRIDE_KEYS.items():
            value = getattr(args, arg_name)
            if value is not None:
                overrides[cfg_key] = value
        if args.no_figures:
            overrides["figures"] = False
        if args.dump_meshes:
            overrides["dump_meshes"] = True
        config = harness.load_config(args.config, overrides)
    except harness.ConfigError as exc:
        print(f"gapfem: config error: {exc}", file=sys.stderr)
        return 1

    try:
        output = harness.run_study(config)
        if output.rows == [] and output.failures:
            raise SolverError(
                "all levels failed: " + "; ".join(f["error"] for f in output.failures)
            )
        csv_path = harness.write_outputs(output, config.out)
        if config.dump_meshes:
            _dump_meshes(config)
    except (AssemblyError, MeshError, SolverError, ValueError) as exc:
        print(f"gapfem: numerical failure: {exc}", file=sys.stderr)
        return 2

    print(f"gapfem: wrote {csv_path}")
    for fail in output.failures:
        print(
            f"gapfem: level failed (label={fail['label']} h={fail['h']:g}): "
            f"{fail['error']}",
            file=sys.stderr,
        )
    return 0


def _dump_meshes(config):
    from .mesh import dump_active_mesh

    setup = harness.build_setup(
        geom=config.geometry,
        h=config.levels[0],
        delta=config.deltas[0] if config.deltas else 0.0,
        p=config.p,
        margin=config.margin,
        hybrid_ratio=config.hybrid_ratio,
        depth=config.depth,
    )
    os.makedirs(config.out, exist_ok=True)
    for i, patch in enumerate(setup.patches, start=1):
        with open(os.path.join(config.out, f"mesh_patch{i}.txt"), "w") as fh:
            dump_active_mesh(patch.mesh, fh)
    with open(os.path.join(config.out, "mesh_hybrid.txt"), "w") as fh:
        dump_active_mesh(setup.hybrid.mesh, fh)


if __name__ == "__main__":
    sys.exit(main())
