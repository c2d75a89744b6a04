"""Run configuration, initial data, output writers and the command-line driver."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import re
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from chbiot.diagnostics import (
    SeriesRecorder,
    TimeSeriesRow,
    continuous_dependence_experiment,
    darcy_velocity,
    energy_inequality_monitor,
    marching_squares,
)
from chbiot.grid import Mesh, build_mesh
from chbiot.material import MaterialTable
from chbiot.stepper import LINEAR_SOLVERS, MODELS, RunAborted, State, TimeStepConfig, run

log = logging.getLogger("chbiot")

CSV_HEADER = "time,mass,E_phi,E_u,E_theta,E_total,grad_mu_sq,grad_p_sq,outer_iters"
_MATERIAL_KEYS = {f.name for f in fields(MaterialTable)} - {"source_u", "mobility_constant"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    n: int = 256
    dt: float = 2.0**-7
    t_final: float = 1.5
    model: str = "chb"
    outdir: str = "output"
    output_every: int = 1
    vtk_every: int = 0
    write_contours: bool = False
    monitor_bound: float = 1e4
    constant_coefficients: bool = False
    decoupling_tol: float = 1e-6
    decoupling_max_iters: int = 50
    newton_tol: float = 1e-9
    newton_max_iters: int = 25
    linear_solver: str = "lu-bicgstab"
    material: MaterialTable = field(default_factory=MaterialTable)

    def validate(self) -> "RunConfig":
        if not (isinstance(self.n, int) and self.n >= 1):
            raise ConfigError(f"n must be a positive integer, got {self.n!r}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError("dt must be positive")
        if not (self.t_final >= 0 and math.isfinite(self.t_final)):
            raise ConfigError("t_final must be non-negative")
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}")
        if self.linear_solver not in LINEAR_SOLVERS:
            raise ConfigError(f"linear_solver must be one of {LINEAR_SOLVERS}")
        if self.output_every < 1 or self.vtk_every < 0:
            raise ConfigError("output_every must be >= 1 and vtk_every >= 0")
        for name in ("decoupling_tol", "newton_tol", "monitor_bound"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.decoupling_max_iters < 1 or self.newton_max_iters < 1:
            raise ConfigError("iteration caps must be positive")
        return self

    def time_config(self, model: str | None = None) -> TimeStepConfig:
        return TimeStepConfig(
            dt=self.dt,
            t_final=self.t_final,
            model=model or self.model,
            material=self.material,
            decoupling_tol=self.decoupling_tol,
            decoupling_max_iters=self.decoupling_max_iters,
            newton_tol=self.newton_tol,
            newton_max_iters=self.newton_max_iters,
            constant_coefficients=self.constant_coefficients,
            linear_solver=self.linear_solver,
        )

    def dump(self) -> str:
        """Every key in ``key = value`` form, readable by :func:`parse_config`."""
        lines = []
        for f in fields(self):
            if f.name == "material":
                continue
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        for f in fields(self.material):
            if f.name in _MATERIAL_KEYS:
                lines.append(f"{f.name} = {_format_value(getattr(self.material, f.name))}")
        return "\n".join(lines) + "\n"


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_POWER = re.compile(r"^\s*([-+]?\d+(?:\.\d*)?)\s*\^\s*([-+]?\d+)\s*$")


def _parse_float(text: str) -> float:
    m = _POWER.match(text)
    if m:
        return float(m.group(1)) ** int(m.group(2))
    return float(text)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(kind, text: str):
    if kind is bool or kind == "bool":
        return _parse_bool(text)
    if kind is int or kind == "int":
        value = _parse_float(text)
        if value != int(value):
            raise ValueError(f"not an integer: {text!r}")
        return int(value)
    if kind is float or kind == "float":
        return _parse_float(text)
    return text.strip()


_RUN_TYPES = {
    "n": int,
    "dt": float,
    "t_final": float,
    "model": str,
    "outdir": str,
    "output_every": int,
    "vtk_every": int,
    "write_contours": bool,
    "monitor_bound": float,
    "constant_coefficients": bool,
    "decoupling_tol": float,
    "decoupling_max_iters": int,
    "newton_tol": float,
    "newton_max_iters": int,
    "linear_solver": str,
}


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Omitted keys keep their defaults."""
    run_kw = {}
    mat_kw = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        try:
            if key in _RUN_TYPES:
                run_kw[key] = _coerce(_RUN_TYPES[key], value)
            elif key in _MATERIAL_KEYS:
                mat_kw[key] = _coerce(float, value)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    if "model" in run_kw:
        run_kw["model"] = run_kw["model"].lower()
    try:
        material = MaterialTable(**mat_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(material=material, **run_kw).validate()


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


# -- initial data ---------------------------------------------------------------------------


def initial_profile(x1, x2):
    """Level function of the initial tumor; the tumor occupies ``profile < 1``."""
    return (np.sin(14.4 * x1 + 11.2 * x2 - 12.8) + 1.0) * (8.0 * x1 - 4.2) ** 2 + (np.sin(16.0 * x1 - 8.0) + 1.0) * (
        16.0 * x2 - 8.0
    ) ** 2


def build_initial_data(mesh: Mesh) -> State:
    """Smooth bump ``exp(1 - 1/(1 - h))`` on ``{h < 1}``, zero elsewhere; theta = 1/2."""
    x1, x2 = mesh.node_coords[:, 0], mesh.node_coords[:, 1]
    h = initial_profile(x1, x2)
    phi0 = np.zeros(mesh.num_nodes)
    inside = h < 1.0
    phi0[inside] = np.exp(1.0 - 1.0 / (1.0 - h[inside]))
    state = State.zeros(mesh)
    state.phi = phi0
    state.theta = np.full(mesh.num_nodes, 0.5)
    return state


# -- writers ----------------------------------------------------------------------------------


def _g17(x) -> str:
    return format(float(x), ".17g")


def write_timeseries_csv(rows, path) -> Path:
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to write")
    path = Path(path)
    lines = [CSV_HEADER]
    for r in rows:
        nums = (r.time, r.tumor_mass, r.E_phi, r.E_u, r.E_theta, r.E_total, r.grad_mu_norm_sq, r.grad_p_norm_sq)
        lines.append(",".join(_g17(v) for v in nums) + f",{int(r.outer_iterations)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def write_mass_comparison_csv(series: dict, path) -> Path:
    models = list(series)
    lengths = {len(series[m]) for m in models}
    if len(lengths) != 1:
        raise ValueError("model runs produced different numbers of rows")
    lines = ["time," + ",".join(f"mass_{m}" for m in models)]
    for k in range(lengths.pop()):
        t = series[models[0]][k].time
        lines.append(_g17(t) + "," + ",".join(_g17(series[m][k].tumor_mass) for m in models))
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def write_vtk(mesh: Mesh, state: State, path, material: MaterialTable | None = None) -> Path:
    """Legacy ASCII VTK structured grid with nodal phi, mu, theta, p, u and cellwise Darcy flux."""
    material = material or MaterialTable()
    n = mesh.n
    N = mesh.num_nodes
    out = [
        "# vtk DataFile Version 3.0",
        f"chbiot state t={_g17(state.time)}",
        "ASCII",
        "DATASET STRUCTURED_GRID",
        f"DIMENSIONS {n + 1} {n + 1} 1",
        f"POINTS {N} double",
    ]
    out += [f"{_g17(x)} {_g17(y)} 0" for x, y in mesh.node_coords]
    out.append(f"POINT_DATA {N}")
    for name in ("phi", "mu", "theta", "p"):
        out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        out += [_g17(v) for v in getattr(state, name)]
    out.append("VECTORS u double")
    out += [f"{_g17(a)} {_g17(b)} 0" for a, b in np.asarray(state.u).reshape(-1, 2)]
    q = darcy_velocity(mesh, state.phi, state.p, material)
    out.append(f"CELL_DATA {mesh.num_elements}")
    out.append("VECTORS darcy_velocity double")
    out += [f"{_g17(a)} {_g17(b)} 0" for a, b in q]
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path


def write_contours_csv(mesh: Mesh, phi, path, levels=(0.5, 0.9)) -> Path:
    lines = ["level,polyline,x,y"]
    for level in levels:
        cs = marching_squares(mesh, phi, level)
        for k, pl in enumerate(cs.polylines):
            lines += [f"{_g17(level)},{k},{_g17(x)},{_g17(y)}" for x, y in pl]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


# -- orchestration ----------------------------------------------------------------------------


def simulate(
    cfg: RunConfig, model: str | None = None, mesh: Mesh | None = None, outdir: Path | None = None, extra_sinks=()
):
    """One model run with outputs; returns ``(final_state, SeriesRecorder)``."""
    model = model or cfg.model
    mesh = mesh or build_mesh(cfg.n)
    tcfg = cfg.time_config(model)
    recorder = SeriesRecorder(mesh, tcfg.effective_material, model, every=cfg.output_every)
    sinks = [recorder, *extra_sinks]
    if outdir is not None and cfg.vtk_every > 0:

        def vtk_sink(k, state, report):
            if k % cfg.vtk_every == 0:
                write_vtk(mesh, state, outdir / f"state_{model}_{k:05d}.vtk", tcfg.effective_material)
                if cfg.write_contours:
                    write_contours_csv(mesh, state.phi, outdir / f"contours_{model}_{k:05d}.csv")

        sinks.append(vtk_sink)
    final = run(mesh, build_initial_data(mesh), tcfg, sinks)
    if outdir is not None:
        write_timeseries_csv(recorder.rows, outdir / f"timeseries_{model}.csv")
    return final, recorder


def _perturbation(mesh: Mesh):
    x1, x2 = mesh.node_coords[:, 0], mesh.node_coords[:, 1]
    return np.exp(-((x1 - 0.5) ** 2 + (x2 - 0.5) ** 2) / 0.02)


def _build_parser():
    ap = argparse.ArgumentParser(prog="chbiot", description="Cahn-Hilliard-Biot tumor growth simulator")
    ap.add_argument("--config", type=Path, help="key = value configuration file")
    ap.add_argument("--model", choices=MODELS, help="model variant")
    ap.add_argument("--n", type=int, help="elements per side of the unit square")
    ap.add_argument("--dt", type=_parse_float, help="time step")
    ap.add_argument("--tfinal", type=_parse_float, help="final time")
    ap.add_argument("--outdir", type=str, help="output directory")
    mode = ap.add_mutually_exclusive_group()
    mode.add_argument("--compare-models", action="store_true", help="run CH, CL and CHB and write the joint mass CSV")
    mode.add_argument("--continuous-dependence", action="store_true", help="run the data-perturbation experiment")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = _build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        overrides = {"model": args.model, "n": args.n, "dt": args.dt, "t_final": args.tfinal, "outdir": args.outdir}
        cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None}).validate()
        if args.compare_models and args.model:
            raise ConfigError("--compare-models runs every variant; do not combine it with --model")
        outdir = Path(cfg.outdir)
        outdir.mkdir(parents=True, exist_ok=True)

        if args.continuous_dependence:
            if not cfg.constant_coefficients:
                raise ConfigError("--continuous-dependence requires constant_coefficients = true")
            mesh = build_mesh(cfg.n)
            rows = continuous_dependence_experiment(
                mesh, build_initial_data(mesh), cfg.time_config(), _perturbation(mesh)
            )
            lines = ["scale,lhs_sq,rhs_sq,ratio"]
            lines += [f"{_g17(r.scale)},{_g17(r.lhs_sq)},{_g17(r.rhs_sq)},{_g17(r.ratio)}" for r in rows]
            (outdir / "continuous_dependence.csv").write_text("\n".join(lines) + "\n")
            for r in rows:
                log.info("scale %.0e  lhs %.4e  rhs %.4e  ratio %.4e", r.scale, r.lhs_sq, r.rhs_sq, r.ratio)
            return 0

        models = list(MODELS) if args.compare_models else [cfg.model]
        mesh = build_mesh(cfg.n)
        summary = {}
        series = {}
        for model in models:
            log.info("running %s on n=%d, dt=%g, T=%g", model, cfg.n, cfg.dt, cfg.t_final)
            final, rec = simulate(cfg, model, mesh, outdir)
            if cfg.vtk_every == 0:
                write_vtk(mesh, final, outdir / f"final_{model}.vtk", cfg.time_config(model).effective_material)
            monitor = energy_inequality_monitor(rec.all_rows, rec.data_functional, cfg.monitor_bound)
            series[model] = rec.rows
            summary[model] = {
                "final_time": final.time,
                "final_mass": rec.rows[-1].tumor_mass,
                "monitor_passed": monitor.passed,
                "monitor_ratio": monitor.ratio,
            }
            log.info("%s: final mass %.6f, energy-bound ratio %.3e", model, rec.rows[-1].tumor_mass, monitor.ratio)
        if args.compare_models:
            write_mass_comparison_csv(series, outdir / "mass_comparison.csv")
        (outdir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return 0
    except (ConfigError, ValueError, OSError, RunAborted) as exc:
        print(f"chbiot: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
