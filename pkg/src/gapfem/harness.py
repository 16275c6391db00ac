"""Experiment driver: study configuration, runs, tables, dumps, and figures.

Studies reproduce the convergence and hybrid-variable experiments: fixed-gap
convergence, gap-size scaling, the planar hybrid-variable sweeps, and single
solves.  Results are written as a deterministic CSV (fixed column order and
float formatting, no timestamps), a rates summary, optional plain-text field
dumps, and matplotlib figures rendered next to the delimited output.
Wall-clock timings go to a separate file so the CSV stays bit-reproducible.
"""

import csv
import os
import time
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import assembly, geometry, mesh, solve_post, splines

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "StudyOutput",
    "build_setup",
    "solve_level",
    "run_fixed_gap",
    "run_gap_scaling",
    "run_hybrid_study",
    "run_single_solve",
    "run_study",
    "load_config",
]

OUTPUT_ENV_VAR = "GAPFEM_OUT"

CSV_COLUMNS = [
    "study",
    "geometry",
    "p",
    "level",
    "h",
    "delta",
    "s",
    "tau0",
    "tau_patch",
    "beta",
    "alpha",
    "margin",
    "hybrid_ratio",
    "dofs_hybrid",
    "dofs_patch1",
    "dofs_patch2",
    "l2_patch1",
    "l2_patch2",
    "l2_total",
    "h1_patch1",
    "h1_patch2",
    "h1_total",
    "en_hybrid_stab",
    "en_grad",
    "en_ghost",
    "en_boundary_grad",
    "en_jump",
    "en_total",
    "crossgap_max",
    "crossgap_mean",
]


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    """Declarative description of one study.

    ``levels`` lists mesh sizes h (strictly decreasing); gap sizes come
    either from ``deltas`` (fixed-gap, single solves), from scaling
    exponents ``s_values`` with delta = 0.1 h0^s (h0 = h normalized by the
    coarsest level), or from ``delta_over_h`` ratios (hybrid studies).
    """

    study: str = "single_solve"
    geometry: str = "planar"
    p: int = 2
    levels: list = dataclass_field(default_factory=lambda: [1 / 8])
    deltas: list = dataclass_field(default_factory=lambda: [0.0])
    s_values: list = dataclass_field(default_factory=list)
    tau0: float = 0.01
    tau0_sweep: list = dataclass_field(default_factory=list)
    delta_over_h: list = dataclass_field(default_factory=list)
    tau_patch: float = 0.01
    beta: float = None
    alpha: float = 2.0
    margin: int = 1
    hybrid_ratio: float = 1.0
    depth: int = 6
    problem: str = "manufactured"
    constant_value: float = 1.0
    field_samples: int = 41
    figures: bool = True
    dump_meshes: bool = False
    out: str = "gapfem_out"

    def validate(self):
        if self.study not in (
            "fixed_gap",
            "gap_scaling",
            "hybrid_study",
            "single_solve",
        ):
            raise ConfigError(f"unknown study '{self.study}'")
        if self.geometry not in ("torus", "planar"):
            raise ConfigError(f"unknown geometry '{self.geometry}'")
        if not (1 <= int(self.p) <= 4):
            raise ConfigError("p must lie in [1, 4]")
        if not self.levels:
            raise ConfigError("levels must be nonempty")
        if any(h2 >= h1 for h1, h2 in zip(self.levels, self.levels[1:])):
            raise ConfigError("levels must be strictly decreasing")
        if any(d < 0 for d in self.deltas):
            raise ConfigError("delta must be nonnegative")
        if self.study == "gap_scaling" and not self.s_values:
            raise ConfigError("gap_scaling needs s_values")
        if any(s <= 0 for s in self.s_values):
            raise ConfigError("scaling exponents must be positive")
        if self.study == "hybrid_study" and not (
            self.tau0_sweep or self.delta_over_h
        ):
            raise ConfigError("hybrid_study needs tau0_sweep or delta_over_h")
        if self.problem not in ("manufactured", "constant"):
            raise ConfigError(f"unknown problem '{self.problem}'")
        return self


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}

_LIST_KEYS = {"levels", "deltas", "s_values", "tau0_sweep", "delta_over_h"}
_FLOAT_KEYS = {"tau0", "tau_patch", "beta", "alpha", "hybrid_ratio", "constant_value"}
_INT_KEYS = {"p", "margin", "depth", "field_samples"}
_BOOL_KEYS = {"figures", "dump_meshes"}


def _parse_value(key, raw):
    raw = raw.strip()
    if key in _LIST_KEYS:
        if not raw:
            return []
        return [float(tok) for tok in raw.replace(",", " ").split()]
    if key in _FLOAT_KEYS:
        return None if raw.lower() in ("", "none", "auto") else float(raw)
    if key in _INT_KEYS:
        return int(raw)
    if key in _BOOL_KEYS:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"cannot parse boolean '{raw}' for key '{key}'")
    return raw


def load_config(path, overrides=None):
    """Read a ``key = value`` config file and apply override pairs."""
    cfg = ExperimentConfig()
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = (tok.strip() for tok in line.split("=", 1))
                if not hasattr(cfg, key):
                    raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
                setattr(cfg, key, _parse_value(key, raw))
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    for key, raw in (overrides or {}).items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config key '{key}'")
        setattr(cfg, key, _parse_value(key, raw) if isinstance(raw, str) else raw)
    env_out = os.environ.get(OUTPUT_ENV_VAR)
    if env_out:
        cfg.out = env_out
    return cfg.validate()


# ---------------------------------------------------------------------------
# setup construction

class _MeshCache:
    """Patch meshes depend only on the reference trim, not on the gap size."""

    def __init__(self):
        self._store = {}

    def get(self, grid, patch, depth):
        key = (grid.cells, grid.degree, patch.kept_sign, depth)
        if key not in self._store:
            self._store[key] = mesh.ActiveMesh2D(grid, patch, depth=depth)
        return self._store[key]


_mesh_cache = _MeshCache()


def _make_problem(config_geometry, problem_kind, constant_value):
    if problem_kind == "constant":
        return geometry.ConstantProblem(constant_value)
    if config_geometry == "torus":
        return geometry.TorusProblem()
    return geometry.PlanarProblem()


def build_setup(
    geom="planar",
    h=1 / 8,
    delta=0.0,
    p=2,
    beta=None,
    tau0=0.01,
    tau_patch=0.01,
    alpha=2.0,
    margin=1,
    hybrid_ratio=1.0,
    depth=6,
    problem=None,
    mesh_cache=None,
):
    """Build the full discrete problem for one (geometry, h, delta).

    Patch grids live on the unit reference square with cell size 1/round(1/h);
    the hybrid grid is a structured hex background of cell size
    ``hybrid_ratio * h`` extracted around the sampled perturbed boundaries.
    """
    n = max(2, int(round(1.0 / h)))
    h = 1.0 / n
    params = assembly.MethodParameters(
        degree=p, beta=beta, tau0=tau0, tau_patch=tau_patch, alpha=alpha
    )
    if geom == "torus":
        outer, inner = geometry.torus_patch_geometry(delta)
    elif geom == "planar":
        outer, inner = geometry.planar_patch_geometry(delta)
    else:
        raise ConfigError(f"unknown geometry '{geom}'")
    if problem is None:
        problem = _make_problem(geom, "manufactured", 0.0)

    grid = splines.KnotGrid(origin=(0.0, 0.0), cell_size=h, cells=(n, n), degree=p)
    cache = mesh_cache or _mesh_cache
    patches = []
    for patch_geom in (outer, inner):
        m = cache.get(grid, patch_geom, depth)
        space = splines.make_space(grid, m.active_cells)
        patches.append(assembly.PatchDiscretization(patch_geom, m, space))

    h_bg = hybrid_ratio * h
    spacing = geometry.boundary_sample_spacing(min(h, h_bg), p)
    samples1 = outer.boundary_samples(spacing)
    samples2 = inner.boundary_samples(spacing)
    gamma = geometry.gamma_midpoint_model(samples1, samples2)

    all_pts = np.vstack([samples1[0], samples2[0]])
    bg = mesh.hybrid_background_grid(all_pts, h_bg, p, pad_cells=margin + 2)
    hyb_mesh = mesh.extract_hybrid_mesh(bg, all_pts, margin=margin)
    hyb_space = splines.make_space(bg, hyb_mesh.active_cells)
    projector = geometry.tangent_projector_field(hyb_mesh, gamma, p)
    hybrid = assembly.HybridDiscretization(hyb_mesh, hyb_space, projector)

    return assembly.ProblemSetup(hybrid, patches, gamma, problem, params)


def solve_level(setup, delta):
    """Assemble, solve, and evaluate one level; returns the error report."""
    system = assembly.assemble_system(setup)
    solution = solve_post.solve(system, setup)
    report = solve_post.evaluate_solution(solution, system, delta)
    return report, solution, system


# ---------------------------------------------------------------------------
# study execution

@dataclass
class StudyOutput:
    """Rows (one per solve), fitted rates, and optional field dumps."""

    config: ExperimentConfig
    rows: list = dataclass_field(default_factory=list)
    rates: list = dataclass_field(default_factory=list)
    timings: list = dataclass_field(default_factory=list)
    field_dumps: dict = dataclass_field(default_factory=dict)
    failures: list = dataclass_field(default_factory=list)


def _report_row(config, level, h, delta, s, tau0, report):
    en = report.energy
    grad = np.sqrt(en["patch_grad_1"] + en["patch_grad_2"])
    ghost = np.sqrt(en["patch_ghost_1"] + en["patch_ghost_2"])
    bgrad = np.sqrt(en["boundary_grad_1"] + en["boundary_grad_2"])
    jump = np.sqrt(en["interface_jump_1"] + en["interface_jump_2"])
    return {
        "study": config.study,
        "geometry": config.geometry,
        "p": config.p,
        "level": level,
        "h": h,
        "delta": delta,
        "s": s,
        "tau0": tau0,
        "tau_patch": config.tau_patch,
        "beta": assembly.MethodParameters(config.p, config.beta).beta,
        "alpha": config.alpha,
        "margin": config.margin,
        "hybrid_ratio": config.hybrid_ratio,
        "dofs_hybrid": report.dofs[0],
        "dofs_patch1": report.dofs[1],
        "dofs_patch2": report.dofs[2],
        "l2_patch1": report.l2[0],
        "l2_patch2": report.l2[1],
        "l2_total": report.l2_total,
        "h1_patch1": report.h1[0],
        "h1_patch2": report.h1[1],
        "h1_total": report.h1_total,
        "en_hybrid_stab": np.sqrt(en["hybrid_stab"]),
        "en_grad": grad,
        "en_ghost": ghost,
        "en_boundary_grad": bgrad,
        "en_jump": jump,
        "en_total": report.energy_total,
        "crossgap_max": report.crossgap_max,
        "crossgap_mean": report.crossgap_mean,
    }


def _run_series(config, cases, label_key):
    """Run (label, h, delta, tau0) cases; fit rates per label group."""
    out = StudyOutput(config)
    groups = {}
    for label, level, h, delta, tau0 in cases:
        t0 = time.perf_counter()
        problem = _make_problem(config.geometry, config.problem, config.constant_value)
        try:
            setup = build_setup(
                geom=config.geometry,
                h=h,
                delta=delta,
                p=config.p,
                beta=config.beta,
                tau0=tau0,
                tau_patch=config.tau_patch,
                alpha=config.alpha,
                margin=config.margin,
                hybrid_ratio=config.hybrid_ratio,
                depth=config.depth,
                problem=problem,
            )
            report, solution, system = solve_level(setup, delta)
        except Exception as exc:  # record and continue with other levels
            out.failures.append(
                {"label": label, "level": level, "h": h, "delta": delta, "error": str(exc)}
            )
            continue
        elapsed = time.perf_counter() - t0
        s_val = label if label_key == "s" else ""
        row = _report_row(config, level, 1.0 / round(1.0 / h), delta, s_val, tau0, report)
        out.rows.append(row)
        out.timings.append(
            {"label": label, "level": level, "h": h, "seconds": elapsed}
        )
        groups.setdefault(label, []).append((row["h"], report, solution, setup))
    for label, entries in groups.items():
        if len(entries) >= 2:
            hs = [e[0] for e in entries]
            for norm in ("l2", "h1", "energy"):
                errs = [
                    {
                        "l2": e[1].l2_total,
                        "h1": e[1].h1_total,
                        "energy": e[1].energy_total,
                    }[norm]
                    for e in entries
                ]
                if all(v > 0 for v in errs):
                    fit = solve_post.fit_pre_plateau(hs, errs, config.p)
                    out.rates.append(
                        {
                            "label": label,
                            "norm": norm,
                            "slope": fit.least_squares,
                            "levels_used": fit.levels_used,
                            "pairwise": fit.pairwise,
                        }
                    )
    out._groups = groups
    return out


def run_fixed_gap(config):
    """Fixed gap sizes over a level sequence (surface model problem)."""
    cases = [
        (delta, lvl, h, delta, config.tau0)
        for delta in config.deltas
        for lvl, h in enumerate(config.levels)
    ]
    return _run_series(config, cases, label_key="delta")


def run_gap_scaling(config):
    """Gap scaled as delta = 0.1 h0^s with h0 = h / max(levels)."""
    h_max = max(config.levels)
    cases = []
    for s in config.s_values:
        for lvl, h in enumerate(config.levels):
            delta = 0.1 * (h / h_max) ** s
            cases.append((s, lvl, h, delta, config.tau0))
    return _run_series(config, cases, label_key="s")


def run_hybrid_study(config):
    """Planar hybrid-variable sweeps with field dumps per setting."""
    if config.geometry != "planar":
        raise ConfigError("hybrid_study runs on the planar geometry")
    h = config.levels[0]
    cases = []
    if config.tau0_sweep:
        delta = config.deltas[0] if config.deltas else 0.2 * h
        for tau0 in config.tau0_sweep:
            cases.append((f"tau0={tau0:g}", 0, h, delta, tau0))
    for ratio in config.delta_over_h:
        cases.append((f"doh={ratio:g}", 0, h, ratio * h, config.tau0))
    out = _run_series(config, cases, label_key="label")
    for label, entries in out._groups.items():
        _, _, solution, setup = entries[0]
        out.field_dumps[label] = sample_fields(solution, setup, config.field_samples)
    return out


def run_single_solve(config):
    """One assemble + solve with all diagnostics and field dumps."""
    h = config.levels[0]
    delta = config.deltas[0] if config.deltas else 0.0
    out = _run_series(config, [("solve", 0, h, delta, config.tau0)], label_key="label")
    for label, entries in out._groups.items():
        _, _, solution, setup = entries[0]
        out.field_dumps[label] = sample_fields(solution, setup, config.field_samples)
    return out


_STUDIES = {
    "fixed_gap": run_fixed_gap,
    "gap_scaling": run_gap_scaling,
    "hybrid_study": run_hybrid_study,
    "single_solve": run_single_solve,
}


def run_study(config):
    return _STUDIES[config.study](config)


# ---------------------------------------------------------------------------
# field sampling

def sample_fields(solution, setup, n):
    """Sample patch fields and the hybrid slice on an n-by-n lattice.

    Patch fields are sampled at physical lattice points over the unit square
    (pulled back through the rigid shift); the hybrid field is sampled on
    the z = 0 slice.  Uncovered points carry NaN so each table has exactly
    n^2 rows.
    """
    xs = np.linspace(0.0, 1.0, n)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    phys = np.stack([X.ravel(), Y.ravel(), np.zeros(n * n)], axis=-1)
    tables = {}
    for i, patch in enumerate(setup.patches, start=1):
        coefs = solution.patch(i)
        vals = np.full(n * n, np.nan)
        shift = patch.geometry.delta * getattr(
            patch.geometry, "shift_dir", np.zeros(3)
        )
        ref = phys - shift
        for q in range(n * n):
            xy = ref[q, :2]
            if not patch.space.grid.contains(xy):
                continue
            phi = float(patch.geometry.levelset(xy[None, :]))
            if not patch.geometry.kept(np.array([phi])) and phi != 0.0:
                continue
            cell = patch.space.grid.locate(xy)
            if not patch.space.is_active(cell):
                continue
            dofs, v, _ = patch.space.eval_scattered(cell, xy[None, :], max_order=0)
            vals[q] = v[0] @ coefs[dofs]
        tables[f"patch{i}"] = np.column_stack([phys[:, 0], phys[:, 1], phys[:, 2], vals])
    hvals = np.full(n * n, np.nan)
    coefs = solution.hybrid
    for q in range(n * n):
        xpt = phys[q]
        if not setup.hybrid.mesh.grid.contains(xpt):
            continue
        try:
            cell = setup.hybrid.mesh.locate(xpt)
        except mesh.MeshError:
            continue
        dofs, v, _ = setup.hybrid.space.eval_scattered(cell, xpt[None, :], max_order=0)
        hvals[q] = v[0] @ coefs[dofs]
    tables["hybrid"] = np.column_stack([phys[:, 0], phys[:, 1], phys[:, 2], hvals])
    return tables


# ---------------------------------------------------------------------------
# output writers

def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float):
        return format(value, ".12e")
    return str(value)


def write_outputs(output, out_dir):
    """Write results.csv, rates.txt, timings.txt, field dumps, and figures."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "results.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in output.rows:
            writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])

    with open(os.path.join(out_dir, "rates.txt"), "w") as fh:
        cfg = output.config
        fh.write(f"study={cfg.study} geometry={cfg.geometry} p={cfg.p}\n")
        fh.write("h normalization: h0 = h / max(levels)\n")
        for fit in output.rates:
            pw = " ".join(format(v, ".4f") for v in fit["pairwise"])
            fh.write(
                f"label={fit['label']} norm={fit['norm']} "
                f"slope={fit['slope']:.4f} levels_used={fit['levels_used']} "
                f"pairwise=[{pw}]\n"
            )
        for fail in output.failures:
            fh.write(
                f"FAILED label={fail['label']} h={fail['h']:g} "
                f"delta={fail['delta']:g}: {fail['error']}\n"
            )

    with open(os.path.join(out_dir, "timings.txt"), "w") as fh:
        for t in output.timings:
            fh.write(
                f"label={t['label']} level={t['level']} h={t['h']:g} "
                f"seconds={t['seconds']:.3f}\n"
            )

    for label, tables in output.field_dumps.items():
        safe = str(label).replace("=", "_").replace("/", "_")
        for name, table in tables.items():
            path = os.path.join(out_dir, f"field_{safe}_{name}.txt")
            with open(path, "w") as fh:
                fh.write("x y z value\n")
                for row in table:
                    fh.write(" ".join(format(v, ".12e") for v in row) + "\n")

    if output.config.figures:
        render_figures(output, out_dir)
    return csv_path


def render_figures(output, out_dir):
    """Convergence plots and field maps next to the CSV output."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = output.rows
    if not rows:
        return
    by_label = {}
    for row in rows:
        label = row["s"] if row["s"] != "" else row["delta"]
        by_label.setdefault(label, []).append(row)

    if output.config.study in ("fixed_gap", "gap_scaling") and any(
        len(v) >= 2 for v in by_label.values()
    ):
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
        for norm, ax in zip(("l2_total", "h1_total"), axes):
            for label, group in sorted(by_label.items()):
                hs = [r["h"] for r in group]
                errs = [r[norm] for r in group]
                ax.loglog(hs, errs, "o-", label=f"{label:g}")
            ax.set_xlabel("h")
            ax.set_ylabel(norm.replace("_total", " error"))
            ax.grid(True, which="both", alpha=0.3)
            ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, "convergence.png"), dpi=150)
        plt.close(fig)

    if output.config.study == "hybrid_study":
        labels = [str(r["tau0"]) for r in rows]
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.bar(range(len(rows)), [r["crossgap_max"] for r in rows])
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(
            [f"tau0={l}\nd={r['delta']:.3g}" for l, r in zip(labels, rows)],
            fontsize=6,
        )
        ax.set_yscale("log")
        ax.set_ylabel("cross-gap variation (max)")
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, "crossgap.png"), dpi=150)
        plt.close(fig)

    n = output.config.field_samples
    for label, tables in output.field_dumps.items():
        safe = str(label).replace("=", "_").replace("/", "_")
        fig, axes = plt.subplots(1, len(tables), figsize=(3.3 * len(tables), 3))
        if len(tables) == 1:
            axes = [axes]
        for ax, (name, table) in zip(axes, sorted(tables.items())):
            grid_vals = table[:, 3].reshape(n, n)
            im = ax.imshow(
                grid_vals.T,
                origin="lower",
                extent=(0, 1, 0, 1),
                interpolation="nearest",
            )
            ax.set_title(name, fontsize=8)
            fig.colorbar(im, ax=ax, shrink=0.8)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, f"fields_{safe}.png"), dpi=150)
        plt.close(fig)
