"""Velocity orbits, the elliptic support bound, winding curves and pushforward densities."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ._io import csv_header as _header, fmt as _fmt
from .crystal import Crystal, LatticeKind, build_crystal
from .dispersion import (
    CLOSED_FORM,
    FLAT_BANDS,
    SINGULAR_POINTS,
    VelocityPoint,
    directional_limit,
    grid_velocities,
    kagome_factor,
    rotate,
    torus_delta,
    velocity_field,
)


class NoKnownEllipseError(ValueError):
    """No support ellipse is known for this lattice."""


@dataclass(frozen=True)
class EllipseSpec:
    """``x^2 + s xy + y^2 <= r``."""

    r: float
    s: float

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError(f"ellipse radius must be positive, got {self.r}")
        if not abs(self.s) < 2:
            raise ValueError(f"|s| must be below 2 for a definite form, got {self.s}")

    def q(self, xy) -> np.ndarray:
        xy = np.asarray(xy, float)
        x, y = xy[..., 0], xy[..., 1]
        return x * x + self.s * x * y + y * y

    def form(self) -> np.ndarray:
        return np.array([[1.0, self.s / 2], [self.s / 2, 1.0]])

    def half_extent(self) -> float:
        """Half-width of the bounding box; equal in x and y."""
        return float(np.sqrt(self.r / (1.0 - self.s * self.s / 4.0)))


_ELLIPSES = {
    LatticeKind.TRIANGULAR: EllipseSpec(0.5, -1.0),
    LatticeKind.HEXAGONAL: EllipseSpec(1.0 / 6.0, 1.0),
    LatticeKind.KAGOME: EllipseSpec(0.25, 1.0),
    LatticeKind.SQUARE: EllipseSpec(0.5, 0.0),
}


def _kind_of(lattice) -> LatticeKind | None:
    if isinstance(lattice, Crystal):
        return lattice.kind
    return LatticeKind.parse(lattice)


def ellipse_params(lattice) -> EllipseSpec:
    kind = _kind_of(lattice)
    if kind not in _ELLIPSES:
        raise NoKnownEllipseError(f"no support ellipse known for {getattr(lattice, 'name', lattice)!r}")
    return _ELLIPSES[kind]


def unrotate(lattice, uv) -> np.ndarray:
    """Inverse of :func:`crystalwalk.dispersion.rotate`."""
    uv = np.asarray(uv, float)
    # rotate(eye) is R^T for the orthogonal R applied row-wise
    return uv @ rotate(lattice, np.eye(2)).T


@dataclass
class OrbitCloud:
    """Velocity samples; row ``i`` is band ``band[i]`` at wave vector ``k[i]``."""

    lattice: LatticeKind | None
    k: np.ndarray
    band: np.ndarray
    xy: np.ndarray
    singular: np.ndarray
    N: int
    offset: float
    spec: EllipseSpec | None = None

    def __len__(self) -> int:
        return len(self.band)

    @property
    def qvals(self) -> np.ndarray | None:
        return None if self.spec is None else self.spec.q(self.xy)

    @property
    def uv(self) -> np.ndarray:
        if self.lattice is None or self.lattice not in _ELLIPSES:
            return self.xy.copy()
        return rotate(self.lattice, self.xy)

    def points(self) -> list[VelocityPoint]:
        uv = self.uv
        return [
            VelocityPoint(self.k[i], int(self.band[i]), self.xy[i], uv[i], bool(self.singular[i]))
            for i in range(len(self))
        ]


def _singular_neighbors(kind: LatticeKind, N: int, offset: float):
    """Grid nodes in the closed cell(s) around each enumerated singular point."""
    h = 2 * np.pi / N
    out = []
    for p, pt in enumerate(SINGULAR_POINTS[kind]):
        base = np.floor(np.asarray(pt) / h - offset).astype(int)
        for di in (-1, 0, 1, 2):
            for dj in (-1, 0, 1, 2):
                node = (np.array([base[0] + di, base[1] + dj]) + offset) * h
                d = torus_delta(node, pt)
                if np.max(np.abs(d)) <= h * (1 + 1e-12) and np.any(d != 0):
                    out.append((p, pt, d))
    return out


def sample_orbit(lattice, N: int, offset: float = 0.5, limits: bool = True) -> OrbitCloud:
    """All bands on the ``N x N`` grid, plus directional limits at the singular points.

    Nodes too close to a singular point to evaluate carry their directional
    limit and are flagged singular; with ``limits`` the cone values seen from
    every neighbouring node are appended as well.
    """
    if N < 8:
        raise ValueError("grid size must be at least 8")
    kind = _kind_of(lattice)
    k, v, fixed = grid_velocities(lattice, N, offset)
    B = v.shape[-2]
    kk = np.broadcast_to(k[:, :, None, :], v.shape).reshape(-1, 2)
    band = np.broadcast_to(np.arange(B), v.shape[:-1]).reshape(-1)
    xy = v.reshape(-1, 2)
    sing = fixed.reshape(-1)
    keep = np.all(np.isfinite(xy), axis=-1)
    parts_k, parts_b, parts_xy, parts_s = [kk[keep]], [band[keep]], [xy[keep]], [sing[keep]]
    if limits and kind in CLOSED_FORM:
        for p, pt, d in _singular_neighbors(kind, N, offset):
            for j in range(B):
                parts_k.append(np.asarray(pt, float)[None, :])
                parts_b.append(np.array([j]))
                parts_xy.append(directional_limit(kind, j, p, d)[None, :])
                parts_s.append(np.array([True]))
    spec = _ELLIPSES.get(kind)
    return OrbitCloud(
        kind,
        np.concatenate(parts_k),
        np.concatenate(parts_b),
        np.concatenate(parts_xy),
        np.concatenate(parts_s),
        N,
        offset,
        spec,
    )


@dataclass(frozen=True)
class InclusionResult:
    max_q: float
    bound: float
    passed: bool
    argmax_k: tuple[float, float]
    argmax_band: int


def verify_inclusion(cloud: OrbitCloud, spec: EllipseSpec | None = None, tol: float = 1e-9) -> InclusionResult:
    if len(cloud) == 0:
        raise ValueError("orbit cloud is empty")
    spec = spec or cloud.spec
    if spec is None:
        raise NoKnownEllipseError("cloud has no ellipse; pass one explicitly")
    q = spec.q(cloud.xy)
    i = int(np.argmax(q))
    return InclusionResult(
        float(q[i]), spec.r, bool(q[i] <= spec.r + tol), (float(cloud.k[i, 0]), float(cloud.k[i, 1])), int(cloud.band[i])
    )


def boundary_curve(lattice, r_samples: Iterable[float]) -> np.ndarray:
    """Small-``k`` limits of the rotated velocity along ``k2 = r k1``.

    Returns ``(2R, 2)`` points ``(u, v)``: the ``+`` branch for every ``r``
    followed by the ``-`` branch.  ``r = inf`` is the ``k1 = 0`` axis.
    """
    kind = _kind_of(lattice)
    r = np.asarray(list(r_samples), float)
    inf = np.isinf(r)
    rr = np.where(inf, 0.0, r)
    if kind is LatticeKind.TRIANGULAR:
        den = np.sqrt(12.0) * np.sqrt(1 + rr + rr * rr)
        u = np.where(inf, 3.0 / np.sqrt(12.0), (3 + 3 * rr) / den)
        v = np.where(inf, 1.0 / np.sqrt(12.0), (rr - 1) / den)
    elif kind in (LatticeKind.HEXAGONAL, LatticeKind.KAGOME):
        den = np.sqrt(1 - rr + rr * rr)
        u = np.where(inf, -0.5, (1 - rr) / (2 * den))
        v = np.where(inf, 1.0 / 6.0, (1 + rr) / (6 * den))
        if kind is LatticeKind.KAGOME:
            g = float(kagome_factor(1.0))
            u, v = g * u, g * v
    else:
        raise NoKnownEllipseError(f"no closed-form boundary curve for {kind}")
    plus = np.stack([u, v], axis=-1)
    return np.concatenate([plus, -plus])


def inner_curve(lattice=LatticeKind.HEXAGONAL, M: int = 1000) -> np.ndarray:
    """Rotated directional limits at a Dirac point over ``M`` approach angles."""
    kind = _kind_of(lattice)
    if kind not in (LatticeKind.HEXAGONAL, LatticeKind.KAGOME):
        raise ValueError("inner curves exist only for the hexagonal and kagome lattices")
    t = np.arange(M) * (2 * np.pi / M)
    d = np.stack([np.cos(t), np.sin(t)], axis=-1)
    return rotate(kind, directional_limit(kind, 0, 1, d))


def inner_curve_hexagonal(M: int = 1000) -> np.ndarray:
    return inner_curve(LatticeKind.HEXAGONAL, M)


@dataclass
class WindingCurve:
    r: float
    t: np.ndarray
    band: np.ndarray
    uv: np.ndarray


def winding_curve(lattice, r: float, M: int) -> WindingCurve:
    """Rotated velocities along ``k = (t, r t)`` for ``M`` values of ``t`` in ``[0, 2pi)``.

    Singular parameter values and flat bands are left out.
    """
    if M < 2:
        raise ValueError("need at least two samples")
    if r < 0:
        raise ValueError("pitch must be nonnegative")
    kind = _kind_of(lattice)
    t = np.arange(M) * (2 * np.pi / M)
    k = np.stack([t, r * t], axis=-1)
    v, _ = velocity_field(kind, k)
    flat = FLAT_BANDS.get(kind, ())
    bands = [j for j in range(v.shape[1]) if j not in flat]
    v = v[:, bands]
    ok = np.all(np.isfinite(v), axis=-1)
    ti, bi = np.nonzero(ok)
    return WindingCurve(float(r), t[ti], np.asarray(bands)[bi], rotate(kind, v[ti, bi]))


def boundary_gap(lattice, uv, sectors: int = 360) -> float:
    """How far a point set stays from the ellipse boundary in its worst direction.

    Directions are binned in whitened coordinates where the ellipse is a
    circle; the result is ``1 - min over sectors of max sqrt(Q / r)``.
    """
    spec = ellipse_params(lattice)
    xy = unrotate(lattice, uv)
    C = np.linalg.cholesky(spec.form())
    w = xy @ C
    rho = np.sqrt(spec.q(xy) / spec.r)
    ang = np.mod(np.arctan2(w[:, 1], w[:, 0]), 2 * np.pi)
    idx = np.minimum((ang / (2 * np.pi) * sectors).astype(int), sectors - 1)
    best = np.zeros(sectors)
    np.maximum.at(best, idx, rho)
    return float(1.0 - best.min())


def min_boundary_distance(lattice, uv) -> float:
    """Smallest ``1 - sqrt(Q / r)`` over the points."""
    spec = ellipse_params(lattice)
    rho = np.sqrt(spec.q(unrotate(lattice, uv)) / spec.r)
    return float(1.0 - rho.max())


def coverage_fraction(lattice, N: int, M: int) -> float:
    """Share of mesh cells inside the ellipse that some grid velocity lands in.

    Uses the unshifted grid ``2 pi i / N`` so that doubling ``N`` only adds
    samples; nodes on singular points are dropped.
    """
    if N < 16 or M < 16:
        raise ValueError("N and M must be at least 16")
    spec = ellipse_params(lattice)
    _, v, _ = grid_velocities(lattice, N, offset=0.0)
    xy = v.reshape(-1, 2)
    xy = xy[np.all(np.isfinite(xy), axis=-1)]
    a = spec.half_extent()
    edges = np.linspace(-a, a, M + 1)
    hits, _, _ = np.histogram2d(xy[:, 0], xy[:, 1], bins=[edges, edges])
    c = 0.5 * (edges[1:] + edges[:-1])
    cx, cy = np.meshgrid(c, c, indexing="ij")
    inside = spec.q(np.stack([cx, cy], axis=-1)) <= spec.r
    return float(np.count_nonzero((hits > 0) & inside) / np.count_nonzero(inside))


@dataclass
class DensityGrid:
    """Cell masses on a rectangular mesh; ``mass[i, j]`` covers ``[ex[i], ex[i+1]) x [ey[j], ey[j+1])``."""

    edges_x: np.ndarray
    edges_y: np.ndarray
    mass: np.ndarray
    basis: np.ndarray
    per_band: np.ndarray | None = None

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        cx = 0.5 * (self.edges_x[1:] + self.edges_x[:-1])
        cy = 0.5 * (self.edges_y[1:] + self.edges_y[:-1])
        return np.meshgrid(cx, cy, indexing="ij")

    def total(self) -> float:
        return float(self.mass.sum())


def _transformed_bbox(spec: EllipseSpec, basis: np.ndarray) -> tuple[float, float]:
    # extent of {B p : p^T A p <= r} along each axis is sqrt(r * (B A^-1 B^T)_ii)
    S = basis @ np.linalg.inv(spec.form()) @ basis.T
    return float(np.sqrt(spec.r * S[0, 0])), float(np.sqrt(spec.r * S[1, 1]))


def pushforward_density(lattice, N: int, M: int, basis=None, per_band: bool = False) -> DensityGrid:
    """Histogram of ``basis @ grad gamma_j(k)`` for uniform ``k`` and equal band weights.

    ``basis`` defaults to the crystal's own lattice basis (the identity for
    the built-ins).  The mesh spans the image of the support ellipse when one
    is known and the sample range otherwise.
    """
    if N < 64:
        raise ValueError("quadrature grid must be at least 64")
    crystal = lattice if isinstance(lattice, Crystal) else build_crystal(lattice)
    if basis is None:
        basis = crystal.embedding.ThetaTilde
    basis = np.asarray(basis, float)
    _, v, _ = grid_velocities(lattice, N)
    B = v.shape[-2]
    pts = v @ basis.T
    finite = np.all(np.isfinite(pts), axis=-1)
    try:
        ax, ay = _transformed_bbox(ellipse_params(crystal), basis)
        pad = 1e-9
        ex = np.linspace(-ax - pad, ax + pad, M + 1)
        ey = np.linspace(-ay - pad, ay + pad, M + 1)
    except NoKnownEllipseError:
        p = pts[finite]
        ex = np.linspace(p[:, 0].min(), p[:, 0].max(), M + 1)
        ey = np.linspace(p[:, 1].min(), p[:, 1].max(), M + 1)
    bands = np.zeros((B, M, M))
    for j in range(B):
        p = pts[:, :, j][finite[:, :, j]]
        bands[j], _, _ = np.histogram2d(p[:, 0], p[:, 1], bins=[ex, ey])
    bands /= finite.sum(axis=(0, 1))[:, None, None]
    mass = bands.sum(axis=0) / B
    return DensityGrid(ex, ey, mass, basis, bands if per_band else None)


def _cell_min_q(grid: DensityGrid, spec: EllipseSpec) -> np.ndarray:
    """Exact minimum of ``Q(basis^-1 w)`` over each closed cell."""
    Binv = np.linalg.inv(grid.basis)
    A = Binv.T @ spec.form() @ Binv
    ex, ey = grid.edges_x, grid.edges_y
    X0, Y0 = np.meshgrid(ex[:-1], ey[:-1], indexing="ij")
    X1, Y1 = np.meshgrid(ex[1:], ey[1:], indexing="ij")

    def q(x, y):
        return A[0, 0] * x * x + 2 * A[0, 1] * x * y + A[1, 1] * y * y

    inside = (X0 <= 0) & (X1 >= 0) & (Y0 <= 0) & (Y1 >= 0)
    best = np.full(X0.shape, np.inf)
    for x in (X0, X1):
        yc = np.clip(-A[0, 1] * x / A[1, 1], Y0, Y1)
        best = np.minimum(best, q(x, yc))
    for y in (Y0, Y1):
        xc = np.clip(-A[0, 1] * y / A[0, 0], X0, X1)
        best = np.minimum(best, q(xc, y))
    return np.where(inside, 0.0, best)


def mass_outside(grid: DensityGrid, spec: EllipseSpec) -> float:
    """Mass in cells lying entirely outside the (transformed) ellipse."""
    return float(grid.mass[_cell_min_q(grid, spec) > spec.r].sum())


def mass_in_center_cells(grid: DensityGrid, spec: EllipseSpec) -> float:
    """Mass in cells whose centre satisfies the (transformed) ellipse inequality."""
    cx, cy = grid.centers()
    w = np.stack([cx, cy], axis=-1) @ np.linalg.inv(grid.basis).T
    return float(grid.mass[spec.q(w) <= spec.r].sum())


def write_orbit_csv(path, cloud: OrbitCloud, label: str) -> None:
    uv = cloud.uv
    q = cloud.qvals if cloud.spec is not None else np.full(len(cloud), np.nan)
    with open(path, "w") as fh:
        fh.write(_header("orbit", lattice=label, N=cloud.N, offset=cloud.offset))
        fh.write("k1,k2,band,x,y,u,v,qval,singular\n")
        for i in range(len(cloud)):
            fh.write(
                ",".join(
                    [_fmt(cloud.k[i, 0]), _fmt(cloud.k[i, 1]), str(int(cloud.band[i])), _fmt(cloud.xy[i, 0]),
                     _fmt(cloud.xy[i, 1]), _fmt(uv[i, 0]), _fmt(uv[i, 1]), _fmt(q[i]), str(int(cloud.singular[i]))]
                )
                + "\n"
            )


def write_density_csv(path, grid: DensityGrid, label: str, N: int) -> None:
    cx, cy = grid.centers()
    with open(path, "w") as fh:
        fh.write(_header("density", lattice=label, N=N, M=grid.mass.shape[0]))
        fh.write("cx,cy,mass\n")
        for a, b, m in zip(cx.ravel(), cy.ravel(), grid.mass.ravel()):
            fh.write(f"{_fmt(a)},{_fmt(b)},{_fmt(m)}\n")


def write_curve_csv(path, t: Sequence[float], uv: np.ndarray, label: str, **params) -> None:
    with open(path, "w") as fh:
        fh.write(_header("curve", lattice=label, **params))
        fh.write("t,u,v\n")
        for a, (u, v) in zip(t, uv):
            fh.write(f"{_fmt(a)},{_fmt(u)},{_fmt(v)}\n")
