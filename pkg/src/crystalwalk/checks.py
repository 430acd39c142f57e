"""Acceptance checks shared by ``crystalwalk verify`` and the test suite.

Every check returns a :class:`CheckResult`.  Hard checks decide the exit
code; report-only checks are recorded but never fail a run.  Serialized
reports leave out wall-clock times so that reruns compare byte for byte.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bloch import SpectralMappingError, verify_spectral_mapping
from .crystal import LatticeKind, build_crystal
from .dispersion import (
    SINGULAR_POINTS,
    BandTrackingError,
    gamma_numeric,
    grid_velocities,
    hessian_det,
    hessian_field,
    hessian_matrix,
    kagome_factor,
    offset_grid,
    torus_delta,
    velocity_closed_form,
    velocity_numeric,
    velocity_spectral,
)
from .orbit import (
    boundary_curve,
    coverage_fraction,
    ellipse_params,
    sample_orbit,
    unrotate,
    verify_inclusion,
)
from .walksim import (
    bloch_reconstruction,
    basis_state,
    build_torus,
    calibrated_limit,
    characteristic,
    escape_mass,
    evolve,
    localization_constant,
    probe_from_run,
    residual_weight,
    run_ensemble,
)

CRYSTALS = (LatticeKind.TRIANGULAR, LatticeKind.HEXAGONAL, LatticeKind.KAGOME)
BUILTINS = CRYSTALS + (LatticeKind.SQUARE,)

PASS, FAIL, REPORT = "pass", "fail", "report"


@dataclass
class CheckResult:
    name: str
    criterion: int
    status: str
    measured: dict
    threshold: dict
    message: str = ""
    runtime: float = field(default=0.0, compare=False)

    @property
    def hard(self) -> bool:
        return self.status != REPORT

    @property
    def ok(self) -> bool:
        return self.status != FAIL

    def line(self) -> str:
        tag = {PASS: "PASS", FAIL: "FAIL", REPORT: "INFO"}[self.status]
        return f"[{tag}] criterion {self.criterion:>2} {self.name}: {self.message}"

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "criterion": self.criterion,
            "status": self.status,
            "measured": self.measured,
            "threshold": self.threshold,
            "message": self.message,
        }


@dataclass
class VerifyConfig:
    seed: int = 0
    workers: int = 1
    sim_L: int = 512
    probe_L: int = 404


class _Context:
    """Caches expensive shared work (walk simulations) across checks."""

    def __init__(self, config: VerifyConfig):
        self.config = config
        self._runs: dict = {}

    def rng(self, salt: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, salt])

    def triangular_run(self):
        key = "tri"
        if key not in self._runs:
            torus = build_torus(LatticeKind.TRIANGULAR, self.config.sim_L)
            self._runs[key] = run_ensemble(torus, 200, (50, 100, 200), "arc", self.config.workers)
        return self._runs[key]

    def probe_run(self, kind: LatticeKind):
        if kind is LatticeKind.TRIANGULAR:
            return self.triangular_run()
        if kind not in self._runs:
            torus = build_torus(kind, self.config.probe_L)
            self._runs[kind] = run_ensemble(torus, 200, (), "arc", self.config.workers)
        return self._runs[kind]


def _status(ok: bool) -> str:
    return PASS if ok else FAIL


def _avoiding(rng: np.random.Generator, kind: LatticeKind, count: int, radius: float) -> np.ndarray:
    """Uniform wave vectors at sup-distance above ``radius`` from the singular set."""
    pts = np.asarray(SINGULAR_POINTS[kind])
    out = []
    while len(out) < count:
        k = rng.uniform(0, 2 * np.pi, size=2)
        if np.min(np.max(np.abs(torus_delta(k[None, :], pts)), axis=-1)) > radius:
            out.append(k)
    return np.array(out)


def check_inclusion(ctx: _Context) -> CheckResult:
    start = time.perf_counter()
    measured, ok = {}, True
    for kind in CRYSTALS:
        res = verify_inclusion(sample_orbit(kind, 512), tol=1e-9)
        measured[kind.value] = {"max_q": res.max_q, "r": res.bound, "argmax_k": list(res.argmax_k)}
        ok &= res.passed
    elapsed = time.perf_counter() - start
    ok &= elapsed <= 30.0
    worst = max(measured[k.value]["max_q"] - measured[k.value]["r"] for k in CRYSTALS)
    return CheckResult(
        "ellipse_inclusion", 1, _status(ok), measured, {"tol": 1e-9, "runtime_s": 30.0},
        f"max(Q - r) = {worst:.3e} over N=512 grids",
    )


def check_tightness(ctx: _Context) -> CheckResult:
    theta = (np.arange(1000) + 0.5) * (np.pi / 1000) - np.pi / 2
    ratios = np.tan(theta)
    measured, ok, notes = {}, True, []
    for kind in CRYSTALS:
        spec = ellipse_params(kind)
        q_curve = spec.q(unrotate(kind, boundary_curve(kind, ratios)))
        curve_err = float(np.max(np.abs(q_curve - spec.r)))
        cloud = sample_orbit(kind, 512, limits=False)
        q_grid = float(np.max(cloud.qvals[~cloud.singular]))
        good = curve_err <= 1e-12 and q_grid >= spec.r - 1e-3
        ok &= good
        measured[kind.value] = {"curve_max_abs_q_minus_r": curve_err, "grid_max_q": q_grid, "r": spec.r}
        if not good:
            notes.append(f"{kind.value}: curve Q={float(np.median(q_curve)):.6g}, grid max Q={q_grid:.6g} vs r={spec.r:.6g}")
    return CheckResult(
        "boundary_tightness", 2, _status(ok), measured, {"curve_tol": 1e-12, "grid_gap": 1e-3},
        "; ".join(notes) or "boundary curves on Q=r, grid reaches r within 1e-3",
    )


def check_square_bound(ctx: _Context) -> CheckResult:
    _, v, _ = grid_velocities(LatticeKind.SQUARE, 512)
    m = float(np.nanmax(np.sum(v * v, axis=-1)))
    return CheckResult(
        "square_bound", 3, _status(m <= 0.5 + 1e-9), {"max_speed2": m}, {"bound": 0.5, "tol": 1e-9},
        f"max |grad gamma|^2 = {m:.12f}",
    )


def check_spectral_mapping(ctx: _Context) -> CheckResult:
    start = time.perf_counter()
    measured, ok, notes = {}, True, []
    k = offset_grid(64, 0.0).reshape(-1, 2)
    for kind in BUILTINS:
        crystal = build_crystal(kind)
        worst, mults = 0.0, set()
        try:
            for kk in k:
                rep = verify_spectral_mapping(crystal, kk, tol=1e-10)
                worst = max(worst, rep.max_match_residual, rep.max_residual_distance)
                lam = np.array([p[0] for p in rep.induced_pairs])
                if np.min(np.abs(np.abs(lam) - 1.0)) > 1e-6:
                    mults.add((rep.mult_plus_one, rep.mult_minus_one))
        except SpectralMappingError as exc:
            ok = False
            notes.append(f"{kind.value}: {exc}")
            worst = float("inf")
        const = len(mults) == 1
        ok &= const
        total = sum(next(iter(mults))) if const else None
        measured[kind.value] = {"max_residual": worst, "generic_multiplicities": sorted(mults), "residual_total": total}
        if not const:
            notes.append(f"{kind.value}: multiplicities vary {sorted(mults)}")
    elapsed = time.perf_counter() - start
    ok &= elapsed <= 60.0
    summary = ", ".join(f"{kk}={v['residual_total']}" for kk, v in measured.items())
    return CheckResult(
        "spectral_mapping", 4, _status(ok), measured, {"tol": 1e-10, "runtime_s": 60.0},
        "; ".join(notes) or f"64x64 grids, +-1 multiplicities {summary}",
    )


def check_gradients(ctx: _Context) -> CheckResult:
    measured, ok = {}, True
    for salt, kind in enumerate(CRYSTALS):
        crystal = build_crystal(kind)
        ks = _avoiding(ctx.rng(100 + salt), kind, 1000, 0.05)
        err = 0.0
        for kk in ks:
            for j in range(crystal.n_vertices):
                cf = velocity_closed_form(kind, j, kk).xy
                try:
                    fd = velocity_numeric(crystal, j, kk, h=1e-5).xy
                except BandTrackingError:
                    continue
                err = max(err, float(np.max(np.abs(cf - fd))))
        measured[kind.value] = {"max_abs_err": err}
        ok &= err <= 1e-7
    # chain-rule factor from eigenvalues of the two operators
    hexc, kag = build_crystal(LatticeKind.HEXAGONAL), build_crystal(LatticeKind.KAGOME)
    ks = _avoiding(ctx.rng(200), LatticeKind.KAGOME, 1000, 0.05)
    gh, gk = gamma_numeric(hexc, 0, ks), gamma_numeric(kag, 0, ks)
    g_eig = 3.0 * np.sin(gh) / (4.0 * np.sin(gk))
    g_err = float(np.max(np.abs(g_eig - kagome_factor(np.cos(gh)))))
    g0_err = abs(float(kagome_factor(1.0)) - np.sqrt(3) / 2)
    measured["kagome_factor"] = {"max_abs_err": g_err, "g00_err": g0_err}
    ok &= g_err <= 1e-10 and g0_err <= 1e-12
    worst = max(v["max_abs_err"] for v in measured.values())
    return CheckResult(
        "gradient_correctness", 5, _status(ok), measured, {"fd_tol": 1e-7, "g_tol": 1e-10, "g00_tol": 1e-12},
        f"worst closed-form vs FD {worst:.2e}, g(0,0) error {g0_err:.1e}",
    )


def _adjacent_mask(kind: LatticeKind, N: int, offset: float) -> np.ndarray:
    """Nodes whose closed cell (side h, centred on the node) contains a singular point."""
    h = 2 * np.pi / N
    mask = np.zeros((N, N), bool)
    for pt in SINGULAR_POINTS[kind]:
        pos = np.asarray(pt) / h - offset
        lo = np.ceil(pos - 0.5 - 1e-9).astype(int)
        hi = np.floor(pos + 0.5 + 1e-9).astype(int)
        for a in range(lo[0], hi[0] + 1):
            for b in range(lo[1], hi[1] + 1):
                mask[a % N, b % N] = True
    return mask


def _on_point_mask(kind: LatticeKind, N: int) -> np.ndarray:
    mask = np.zeros((N, N), bool)
    h = 2 * np.pi / N
    for pt in SINGULAR_POINTS[kind]:
        idx = np.asarray(pt) / h
        if np.allclose(idx, np.rint(idx)):
            mask[int(np.rint(idx[0])) % N, int(np.rint(idx[1])) % N] = True
    return mask


def check_hessian(ctx: _Context) -> CheckResult:
    measured, ok = {}, True
    cases = (
        ("cells_N64", 64, 0.5, True),
        ("cells_N64_unshifted", 64, 0.0, True),
        ("nodes_N48", 48, 0.0, False),
    )
    for kind in CRYSTALS:
        row = {}
        for label, N, offset, by_cell in cases:
            h = 2 * np.pi / N
            _, finite = hessian_field(kind, offset_grid(N, offset), cell_radius=h / 2 if by_cell else 0.0)
            bands = [j for j in range(finite.shape[-1]) if not (kind is LatticeKind.KAGOME and j == 2)]
            flagged = ~np.all(finite[..., bands], axis=-1)
            expect = _adjacent_mask(kind, N, offset) if by_cell else _on_point_mask(kind, N)
            row[label] = {"mismatches": int(np.count_nonzero(flagged != expect)), "flagged": int(flagged.sum())}
            ok &= bool(np.array_equal(flagged, expect))
        measured[kind.value] = row
    ks = _avoiding(ctx.rng(300), LatticeKind.TRIANGULAR, 100, 0.1)
    rel = 0.0
    for kk in ks:
        c = hessian_det(LatticeKind.TRIANGULAR, 0, kk)
        f = hessian_det(LatticeKind.TRIANGULAR, 0, kk, method="fd")
        scale = float(np.sum(hessian_matrix(LatticeKind.TRIANGULAR, kk)[0] ** 2))
        rel = max(rel, abs(c.det_H - f.det_H) / scale)
    measured["triangular_fd_rel_err"] = rel
    ok &= rel <= 1e-6
    return CheckResult(
        "hessian_singular_set", 6, _status(ok), measured, {"fd_rel_tol": 1e-6},
        f"finite flags match the singular cells; det H relative FD error {rel:.2e}",
    )


def check_flat_band(ctx: _Context) -> CheckResult:
    _, v, _ = grid_velocities(LatticeKind.KAGOME, 512)
    closed = float(np.max(np.linalg.norm(v[..., 2, :], axis=-1)))
    k = offset_grid(128).reshape(-1, 2)
    vs, _ = velocity_spectral(build_crystal(LatticeKind.KAGOME), k)
    spectral = float(np.max(np.linalg.norm(vs[:, 2, :], axis=-1)))
    m = max(closed, spectral)
    return CheckResult(
        "flat_band", 7, _status(m <= 1e-10), {"closed_form_max": closed, "eigenvector_max": spectral},
        {"tol": 1e-10}, f"max |grad gamma| on the flat band {m:.2e}",
    )


def check_fourier(ctx: _Context) -> CheckResult:
    measured, worst = {}, 0.0
    for kind in BUILTINS:
        torus = build_torus(kind, 16)
        err = 0.0
        for a in range(torus.n_arcs):
            real = evolve(torus, basis_state(torus, a), 5).amplitudes
            err = max(err, float(np.max(np.abs(real - bloch_reconstruction(torus, a, 5)))))
        measured[kind.value] = err
        worst = max(worst, err)
    return CheckResult(
        "fourier_consistency", 8, _status(worst <= 1e-10), measured, {"tol": 1e-10},
        f"L=16, n=5, max amplitude error {worst:.2e}",
    )


def check_escape(ctx: _Context) -> CheckResult:
    run = ctx.triangular_run()
    spec = ellipse_params(LatticeKind.TRIANGULAR)
    m100 = escape_mass(run.mixed(100), 100, spec, 0.1, run.torus)
    m200 = escape_mass(run.mixed(200), 200, spec, 0.1, run.torus)
    ok = m100 <= 0.05 and m200 < m100
    return CheckResult(
        "simulation_support", 9, _status(ok), {"escape_n100": m100, "escape_n200": m200, "norm_drift": run.max_norm_drift},
        {"max_escape_n100": 0.05}, f"escape mass {m100:.3e} (n=100) -> {m200:.3e} (n=200)",
    )


def check_characteristic(ctx: _Context) -> CheckResult:
    run = ctx.triangular_run()
    ok, measured = True, {}
    for xi in ((1, 0), (0, 1), (2, 3)):
        target = calibrated_limit(LatticeKind.TRIANGULAR, xi)
        errs = [abs(characteristic(run.members[n], np.asarray(xi, float) / n, run.torus) - target) for n in (50, 100, 200)]
        good = errs[0] > errs[1] > errs[2] and errs[2] <= 0.02
        ok &= good
        measured[f"xi={xi[0]},{xi[1]}"] = {"limit": target, "errors_n50_100_200": errs}
    final = max(v["errors_n50_100_200"][-1] for v in measured.values())
    return CheckResult(
        "characteristic_convergence", 10, _status(ok), measured, {"final_tol": 0.02},
        f"errors decrease with n; worst at n=200 {final:.2e}",
    )


def check_localization(ctx: _Context) -> CheckResult:
    ok, measured = True, {}
    for kind in CRYSTALS:
        p = probe_from_run(ctx.probe_run(kind))
        low = float(p.running_avg.min())
        ok &= low >= 0.05
        measured[kind.value] = {
            "min_running_avg": low,
            "final_running_avg": float(p.running_avg[-1]),
            "formula_constant": localization_constant(kind),
            "residual_weight": residual_weight(kind),
        }
    msg = ", ".join(
        f"{k}: avg {v['final_running_avg']:.3f} (constant {v['formula_constant']:.4f}, residual share {v['residual_weight']:.4f})"
        for k, v in measured.items()
    )
    return CheckResult("localization", 11, _status(ok), measured, {"min_running_avg": 0.05}, msg)


def check_coverage(ctx: _Context) -> list[CheckResult]:
    measured = {kind.value: coverage_fraction(kind, 1024, 64) for kind in CRYSTALS}
    sq = coverage_fraction(LatticeKind.SQUARE, 1024, 64)
    report = CheckResult(
        "coverage_report", 12, REPORT, measured, {},
        ", ".join(f"{k} {v:.4f}" for k, v in measured.items()),
    )
    hard = CheckResult("coverage_square", 12, _status(sq >= 0.99), {"square": sq}, {"min": 0.99}, f"square {sq:.4f}")
    return [report, hard]


def _determinism_payload(config: VerifyConfig) -> str:
    # the seeded and simulation-driven pieces, rerun from scratch
    ctx = _Context(VerifyConfig(seed=config.seed, workers=config.workers, sim_L=64, probe_L=64))
    parts = [check_gradients(ctx).to_json(), check_hessian(ctx).to_json()]
    run = run_ensemble(build_torus(LatticeKind.KAGOME, 64), 30, (30,), "arc", config.workers)
    parts.append({"kagome_n30": run.mixed(30).prob.tolist()})
    return json.dumps(parts, sort_keys=True)


def check_determinism(ctx: _Context) -> CheckResult:
    a = _determinism_payload(ctx.config)
    b = _determinism_payload(ctx.config)
    same = a == b
    return CheckResult(
        "determinism", 13, _status(same), {"bytes": len(a), "identical": same}, {},
        "seeded checks and a walk rerun produce identical bytes" if same else "reruns differ",
    )


CHECKS: dict[str, tuple[int, str, Callable]] = {
    "ellipse_inclusion": (1, "ellipse", check_inclusion),
    "boundary_tightness": (2, "ellipse", check_tightness),
    "square_bound": (3, "ellipse", check_square_bound),
    "spectral_mapping": (4, "spectral", check_spectral_mapping),
    "gradient_correctness": (5, "gradient", check_gradients),
    "hessian_singular_set": (6, "hessian", check_hessian),
    "flat_band": (7, "gradient", check_flat_band),
    "fourier_consistency": (8, "simulation", check_fourier),
    "simulation_support": (9, "simulation", check_escape),
    "characteristic_convergence": (10, "simulation", check_characteristic),
    "localization": (11, "simulation", check_localization),
    "coverage": (12, "coverage", check_coverage),
    "determinism": (13, "determinism", check_determinism),
}


def select(only: list[str] | None) -> list[str]:
    """Check names matching ``only`` (names, groups or criterion numbers); all when empty."""
    if not only:
        return list(CHECKS)
    picked = []
    for token in only:
        hits = [n for n, (c, g, _) in CHECKS.items() if token in (n, g, str(c))]
        if not hits:
            raise KeyError(f"unknown check {token!r}")
        picked.extend(h for h in hits if h not in picked)
    return [n for n in CHECKS if n in picked]


def run_checks(names: list[str] | None = None, config: VerifyConfig | None = None, echo=None) -> list[CheckResult]:
    config = config or VerifyConfig()
    ctx = _Context(config)
    results = []
    for name in names or list(CHECKS):
        start = time.perf_counter()
        out = CHECKS[name][2](ctx)
        out = out if isinstance(out, list) else [out]
        elapsed = time.perf_counter() - start
        for r in out:
            r.runtime = elapsed
            results.append(r)
            if echo:
                echo(r)
    return results


def report_json(results: list[CheckResult], config: VerifyConfig) -> str:
    body = {
        "seed": config.seed,
        "checks": [r.to_json() for r in results],
        "passed": all(r.ok for r in results),
    }
    return json.dumps(body, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, (tuple, set)):
        return list(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")
