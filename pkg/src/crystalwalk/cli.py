"""``crystalwalk`` command line: spectrum, orbit, density, simulate and verify."""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from ._io import csv_header, fmt
from .bloch import SpectralMappingError, arc_matrix, unitary_eigenvalues, verify_spectral_mapping, vertex_eigenvalues
from .checks import CHECKS, VerifyConfig, report_json, run_checks, select
from .crystal import Crystal, LatticeKind, QuotientFileError, build_crystal, load_quotient
from .dispersion import offset_grid
from .orbit import (
    NoKnownEllipseError,
    boundary_curve,
    ellipse_params,
    inner_curve,
    pushforward_density,
    sample_orbit,
    verify_inclusion,
    winding_curve,
    write_curve_csv,
    write_density_csv,
    write_orbit_csv,
)
from .walksim import (
    WraparoundError,
    build_torus,
    calibrated_limit,
    characteristic,
    limit_characteristic_rhs,
    probe_from_run,
    run_ensemble,
    write_distribution_csv,
    write_probe_csv,
)

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "lattice": "triangular",
    "quotient": None,
    "grid": None,
    "mesh": 64,
    "L": 512,
    "n": [50, 100, 200],
    "pitch": [0.0, 3.0, 10.0, 50.0, 100.0],
    "xi": [(1.0, 0.0), (0.0, 1.0), (2.0, 3.0)],
    "out": ".",
    "workers": 1,
    "seed": 0,
    "only": [],
    "marginal": "arc",
    "per_band": False,
    "samples": 2000,
}
GRID_DEFAULT = {"spectrum": 64, "orbit": 128, "density": 256}
LIST_KEYS = {"n", "pitch", "xi", "only"}


class UsageError(Exception):
    """Bad flags or config values; maps to exit code 2."""


@dataclass
class RunConfig:
    command: str
    lattice: str
    quotient: str | None
    grid: int
    mesh: int
    L: int
    n: list[int]
    pitch: list[float]
    xi: list[tuple[float, float]]
    out: Path
    workers: int
    seed: int
    only: list[str] = field(default_factory=list)
    marginal: str = "arc"
    per_band: bool = False
    samples: int = 2000

    def crystal(self) -> Crystal:
        if self.quotient:
            try:
                return load_quotient(self.quotient)
            except (OSError, QuotientFileError) as exc:
                raise UsageError(f"cannot load quotient file: {exc}") from exc
        try:
            return build_crystal(self.lattice)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc

    @property
    def label(self) -> str:
        return Path(self.quotient).stem if self.quotient else LatticeKind.parse(self.lattice).value


def _xi(text: str) -> tuple[float, float]:
    parts = text.replace(" ", "").split(",")
    if len(parts) != 2:
        raise ValueError(f"xi must look like 'a,b', got {text!r}")
    return float(parts[0]), float(parts[1])


def _convert(key: str, raw: str):
    """Parse one config-file value."""
    if key in LIST_KEYS:
        items = [s.strip() for s in raw.replace(";", " ").split() if s.strip()]
        if key == "xi":
            return [_xi(s) for s in items]
        conv = {"n": int, "pitch": float, "only": str}[key]
        return [conv(s) for s in ",".join(items).split(",") if s] if key != "only" else items
    if key == "per_band":
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"per_band must be a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if key in ("grid", "mesh", "L", "workers", "seed", "samples"):
        return int(raw)
    return raw


def load_config(path: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _convert(key, raw)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from exc
    return out


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--lattice", help="triangular, hexagonal, kagome or square")
    common.add_argument("--quotient", help="quotient-graph file for a custom crystal")
    common.add_argument("--grid", type=int, help="k-grid size N")
    common.add_argument("--mesh", type=int, help="histogram mesh size M")
    common.add_argument("--L", type=int, help="torus side length")
    common.add_argument("--n", type=int, action="append", help="step count (repeatable)")
    common.add_argument("--pitch", type=float, action="append", help="winding-curve pitch (repeatable)")
    common.add_argument("--xi", type=_xi, action="append", help="characteristic-function argument 'a,b' (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="worker threads")
    common.add_argument("--seed", type=int, help="seed for randomized sampling")
    common.add_argument("--only", action="append", help="verify: check name, group or criterion number")
    common.add_argument("--marginal", choices=["arc", "vertex"], help="simulate: per-arc or per-vertex probabilities")
    common.add_argument("--per-band", dest="per_band", action="store_const", const=True, help="density: also write each band")
    common.add_argument("--samples", type=int, help="orbit: winding-curve sample count")
    common.add_argument("--config", help="key = value file; flags take precedence")
    parser = argparse.ArgumentParser(prog="crystalwalk", description="Grover walks on crystal lattices.")
    parser.add_argument("--version", action="version", version=f"crystalwalk {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("spectrum", "twisted-operator spectra and the spectral mapping report"),
        ("orbit", "velocity orbit, boundary and winding curves"),
        ("density", "pushforward limit density"),
        ("simulate", "real-space walk: distributions, return probability, characteristic function"),
        ("verify", "run the acceptance checks"),
    ):
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def resolve(argv: list[str] | None = None) -> RunConfig:
    args = _build_parser().parse_args(argv)
    merged = dict(DEFAULTS)
    if args.config:
        merged.update(load_config(args.config))
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    if merged["grid"] is None:
        merged["grid"] = GRID_DEFAULT.get(args.command, 64)
    cfg = RunConfig(command=args.command, out=Path(merged.pop("out")), **merged)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if not cfg.quotient:
        try:
            LatticeKind.parse(cfg.lattice)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    checks = [
        (cfg.grid >= 8, "grid must be at least 8"),
        (cfg.mesh >= 16, "mesh must be at least 16"),
        (cfg.L >= 4, "L must be at least 4"),
        (all(n >= 0 for n in cfg.n), "step counts must be nonnegative"),
        (all(r >= 0 for r in cfg.pitch), "pitches must be nonnegative"),
        (cfg.workers >= 1, "workers must be positive"),
        (cfg.samples >= 2, "samples must be at least 2"),
        (cfg.marginal in ("arc", "vertex"), "marginal must be arc or vertex"),
    ]
    if cfg.command == "density":
        checks.append((cfg.grid >= 64, "density needs grid >= 64"))
    for ok, msg in checks:
        if not ok:
            raise UsageError(msg)
    if cfg.command == "verify":
        try:
            select(cfg.only)
        except KeyError as exc:
            raise UsageError(f"{exc.args[0]}; known checks: {', '.join(CHECKS)}") from exc


def _json_dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_spectrum(cfg: RunConfig) -> int:
    crystal = cfg.crystal()
    k = offset_grid(cfg.grid, 0.0).reshape(-1, 2)
    lam = vertex_eigenvalues(crystal, k, descending=False)
    z, _ = unitary_eigenvalues(arc_matrix(crystal, k))
    path = cfg.out / f"spectrum_{cfg.label}.csv"
    with open(path, "w") as fh:
        fh.write(csv_header("spectrum", lattice=cfg.label, N=cfg.grid))
        fh.write("k1,k2,kind,index,re,im\n")
        for i, kk in enumerate(k):
            a, b = fmt(kk[0]), fmt(kk[1])
            for j, x in enumerate(lam[i]):
                fh.write(f"{a},{b},vertex,{j},{fmt(x)},0.0\n")
            for j, x in enumerate(z[i]):
                fh.write(f"{a},{b},arc,{j},{fmt(x.real)},{fmt(x.imag)}\n")
    worst, worst_far, mults, failure = 0.0, 0.0, set(), None
    for kk in k:
        try:
            rep = verify_spectral_mapping(crystal, kk, tol=1e-10)
        except SpectralMappingError as exc:
            failure = str(exc)
            break
        worst = max(worst, rep.max_match_residual)
        worst_far = max(worst_far, rep.max_residual_distance)
        lam_k = np.array([p[0] for p in rep.induced_pairs])
        if np.min(np.abs(np.abs(lam_k) - 1.0)) > 1e-6:
            mults.add((rep.mult_plus_one, rep.mult_minus_one))
    report = {
        "lattice": cfg.label,
        "grid": cfg.grid,
        "max_match_residual": worst,
        "max_residual_distance": worst_far,
        "generic_multiplicities": [list(m) for m in sorted(mults)],
        "error": failure,
        "passed": failure is None,
    }
    _json_dump(cfg.out / f"spectrum_{cfg.label}_report.json", report)
    print(f"wrote {path.name}; max match residual {worst:.2e}")
    if failure:
        print(f"spectral mapping failed: {failure}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


_GNUPLOT_ORBIT = """# gnuplot script; run with: gnuplot {name}
set datafile separator ','
set datafile commentschars '#'
set size ratio -1
set xlabel 'u'
set ylabel 'v'
set term pngcairo size 1500,320
set output '{label}_winding.png'
set multiplot layout 1,{panels}
{plots}
unset multiplot
set term pngcairo size 700,700
set output '{label}_orbit.png'
plot '{orbit}' using 6:7 every ::1 with dots title 'orbit'{extra}
"""


def cmd_orbit(cfg: RunConfig) -> int:
    crystal = cfg.crystal()
    target = crystal if cfg.quotient else cfg.lattice
    cloud = sample_orbit(target, cfg.grid)
    label = cfg.label
    orbit_path = cfg.out / f"orbit_{label}.csv"
    write_orbit_csv(orbit_path, cloud, label)
    files = [orbit_path.name]
    plots, extra = [], ""
    kind = crystal.kind
    if kind is not None and kind is not LatticeKind.SQUARE:
        for r in cfg.pitch:
            curve = winding_curve(kind, r, cfg.samples)
            name = f"winding_{label}_r{r:g}.csv"
            write_curve_csv(cfg.out / name, curve.t, curve.uv, label, pitch=r, M=cfg.samples)
            files.append(name)
            plots.append(f"plot '{name}' using 2:3 with dots title 'r={r:g}', 'boundary_{label}.csv' using 2:3 with lines notitle")
        theta = (np.arange(cfg.samples) + 0.5) * (np.pi / cfg.samples) - np.pi / 2
        bc = boundary_curve(kind, np.tan(theta))
        tt = np.concatenate([theta, theta + np.pi])
        order = np.argsort(tt, kind="stable")
        write_curve_csv(cfg.out / f"boundary_{label}.csv", tt[order], bc[order], label, M=cfg.samples)
        files.append(f"boundary_{label}.csv")
        extra = f", 'boundary_{label}.csv' using 2:3 with lines title 'boundary'"
        if kind in (LatticeKind.HEXAGONAL, LatticeKind.KAGOME):
            ic = inner_curve(kind, cfg.samples)
            t = np.arange(cfg.samples) * (2 * np.pi / cfg.samples)
            write_curve_csv(cfg.out / f"inner_{label}.csv", t, ic, label, M=cfg.samples)
            files.append(f"inner_{label}.csv")
            extra += f", 'inner_{label}.csv' using 2:3 with lines title 'inner'"
    report = {"lattice": label, "grid": cfg.grid, "points": len(cloud)}
    status = EXIT_OK
    try:
        res = verify_inclusion(cloud, ellipse_params(target), tol=1e-9)
        report.update(max_q=res.max_q, r=res.bound, argmax_k=list(res.argmax_k), argmax_band=res.argmax_band, passed=res.passed)
        status = EXIT_OK if res.passed else EXIT_CHECK
        print(f"max Q = {res.max_q:.15g} (r = {res.bound:.15g}): {'pass' if res.passed else 'FAIL'}")
    except NoKnownEllipseError:
        report.update(passed=None, note="no support ellipse known for this lattice")
    _json_dump(cfg.out / f"inclusion_{label}.json", report)
    script = cfg.out / f"orbit_{label}.gp"
    script.write_text(
        _GNUPLOT_ORBIT.format(
            name=script.name, label=label, panels=max(len(plots), 1), plots="\n".join(plots) or "# no winding curves",
            orbit=orbit_path.name, extra=extra,
        )
    )
    files.extend([f"inclusion_{label}.json", script.name])
    print("wrote " + ", ".join(files))
    return status


def cmd_density(cfg: RunConfig) -> int:
    crystal = cfg.crystal()
    grid = pushforward_density(crystal, cfg.grid, cfg.mesh, per_band=cfg.per_band)
    label = cfg.label
    path = cfg.out / f"density_{label}.csv"
    write_density_csv(path, grid, label, cfg.grid)
    files = [path.name]
    if grid.per_band is not None:
        for j, mass in enumerate(grid.per_band):
            name = f"density_{label}_band{j}.csv"
            band_grid = type(grid)(grid.edges_x, grid.edges_y, mass, grid.basis)
            write_density_csv(cfg.out / name, band_grid, label, cfg.grid)
            files.append(name)
    script = cfg.out / f"density_{label}.gp"
    script.write_text(
        f"# gnuplot script; run with: gnuplot {script.name}\n"
        "set datafile separator ','\nset size ratio -1\nset view map\n"
        f"set term pngcairo size 700,700\nset output 'density_{label}.png'\n"
        f"splot '{path.name}' using 1:2:3 every ::1 with points pointtype 5 pointsize 0.5 palette notitle\n"
    )
    files.append(script.name)
    print(f"total mass {grid.total():.12f}; wrote " + ", ".join(files))
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    crystal = cfg.crystal()
    if not cfg.n:
        raise UsageError("need at least one --n")
    torus = build_torus(crystal, cfg.L)
    n_max = max(cfg.n)
    try:
        torus.check_steps(n_max)
    except WraparoundError as exc:
        raise UsageError(str(exc)) from exc
    run = run_ensemble(torus, n_max, cfg.n, cfg.marginal, cfg.workers)
    label = cfg.label
    times = sorted(set(cfg.n))
    write_distribution_csv(cfg.out / f"distribution_{label}.csv", [run.mixed(n) for n in times], torus, label)
    write_probe_csv(cfg.out / f"probe_{label}.csv", probe_from_run(run), label, cfg.L)
    with open(cfg.out / f"characteristic_{label}.csv", "w") as fh:
        fh.write(csv_header("characteristic", lattice=label, L=cfg.L, marginal=cfg.marginal))
        fh.write("n,xi1,xi2,chi_re,chi_im,limit_calibrated,limit_formula,error\n")
        for xi in cfg.xi:
            cal = calibrated_limit(crystal, xi)
            formula = limit_characteristic_rhs(crystal, xi)
            for n in times:
                if n == 0:
                    continue
                chi = characteristic(run.members[n], np.asarray(xi) / n, torus)
                fh.write(
                    f"{n},{fmt(xi[0])},{fmt(xi[1])},{fmt(chi.real)},{fmt(chi.imag)},{fmt(cal)},{fmt(formula)},{fmt(abs(chi - cal))}\n"
                )
    mass = [run.mixed(n).total() for n in times]
    print(f"norm drift {run.max_norm_drift:.2e}; masses " + ", ".join(f"{m:.12f}" for m in mass))
    print(f"wrote distribution_{label}.csv, probe_{label}.csv, characteristic_{label}.csv")
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    config = VerifyConfig(seed=cfg.seed, workers=cfg.workers)
    start = time.perf_counter()
    results = run_checks(select(cfg.only), config, echo=lambda r: print(r.line(), flush=True))
    path = cfg.out / "verify_report.json"
    path.write_text(report_json(results, config))
    failed = [r.name for r in results if not r.ok]
    print(f"runtime {time.perf_counter() - start:.1f} s; report written to {path}", file=sys.stderr)
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {
    "spectrum": cmd_spectrum,
    "orbit": cmd_orbit,
    "density": cmd_density,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    try:
        cfg = resolve(argv)
        cfg.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[cfg.command](cfg)
    except UsageError as exc:
        print(f"crystalwalk: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
