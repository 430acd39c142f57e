"""Dispersion bands, pseudo-velocities and Hessian determinants.

Bands are indexed from 0 by descending eigenvalue of the twisted random walk
and use the branch ``gamma = arccos(lambda)`` in ``[0, pi]``.  Closed forms
exist for the triangular, hexagonal and kagome lattices; any other crystal
goes through the eigensolver (``gamma_numeric``, ``velocity_spectral``).

The vectorised helpers take wave vectors of shape ``(..., 2)`` and return
arrays with a trailing band axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bloch import TWO_PI, _incidence, phases, reduce_k, symmetrized_vertex_matrix, vertex_eigenvalues
from .crystal import Crystal, LatticeKind, build_crystal

SQRT2 = np.sqrt(2.0)
SQRT3 = np.sqrt(3.0)

DENOMINATOR_THRESHOLD = 1e-9

CLOSED_FORM = (LatticeKind.TRIANGULAR, LatticeKind.HEXAGONAL, LatticeKind.KAGOME)

_DIRAC = (2 * np.pi / 3, 4 * np.pi / 3)
SINGULAR_POINTS: dict[LatticeKind, np.ndarray] = {
    LatticeKind.TRIANGULAR: np.array([[0.0, 0.0]]),
    LatticeKind.HEXAGONAL: np.array([[0.0, 0.0], _DIRAC, _DIRAC[::-1]]),
    LatticeKind.KAGOME: np.array([[0.0, 0.0], _DIRAC, _DIRAC[::-1]]),
    LatticeKind.SQUARE: np.array([[0.0, 0.0], [np.pi, np.pi]]),
}

# s(G) of the bounding quadratic form; the (u, v) frame is the s(G) * pi/4 rotation
ROTATION_SIGN = {
    LatticeKind.TRIANGULAR: -1,
    LatticeKind.HEXAGONAL: 1,
    LatticeKind.KAGOME: 1,
    LatticeKind.SQUARE: 0,
}

N_BANDS = {LatticeKind.TRIANGULAR: 1, LatticeKind.HEXAGONAL: 2, LatticeKind.KAGOME: 3, LatticeKind.SQUARE: 1}

FLAT_BANDS = {LatticeKind.KAGOME: (2,)}


class SingularPointError(ValueError):
    """Velocity requested at a singular wave vector without an approach direction."""


class BandTrackingError(RuntimeError):
    """A finite-difference stencil straddles a band crossing."""


def _kind(lattice) -> LatticeKind:
    if isinstance(lattice, Crystal):
        if lattice.kind is None:
            raise ValueError("custom crystal has no closed form; use the numeric routines")
        return lattice.kind
    return LatticeKind.parse(lattice)


def torus_delta(k, p) -> np.ndarray:
    """Componentwise difference ``k - p`` wrapped into ``[-pi, pi)``."""
    return np.mod(np.asarray(k, float) - np.asarray(p, float) + np.pi, TWO_PI) - np.pi


def rotate(lattice, xy) -> np.ndarray:
    """(x, y) -> (u, v), the s(G) pi/4 rotation: ``u = (x - s y)/sqrt2, v = (s x + y)/sqrt2``."""
    s = ROTATION_SIGN[_kind(lattice)]
    xy = np.asarray(xy, float)
    x, y = xy[..., 0], xy[..., 1]
    if s == 0:
        return xy.copy()
    return np.stack([(x - s * y) / SQRT2, (s * x + y) / SQRT2], axis=-1)


def _hex_modulus(k):
    # |1 + e^{ik1} + e^{ik2}| directly; 3 + 2(c1 + c2 + c12) cancels to ~1e-16 at the Dirac points
    k1, k2 = k[..., 0], k[..., 1]
    return np.abs(1.0 + np.exp(1j * k1) + np.exp(1j * k2))


def cos_gamma(lattice, k) -> np.ndarray:
    """Closed-form band eigenvalues ``cos gamma_j(k)``, descending, shape ``(..., n_bands)``."""
    kind = _kind(lattice)
    k = np.asarray(k, float)
    k1, k2 = k[..., 0], k[..., 1]
    if kind is LatticeKind.TRIANGULAR:
        lam = (np.cos(k1) + np.cos(k2) + np.cos(k1 + k2)) / 3.0
        return np.clip(lam, -1.0, 1.0)[..., None]
    if kind is LatticeKind.SQUARE:
        return ((np.cos(k1) + np.cos(k2)) / 2.0)[..., None]
    m = np.minimum(_hex_modulus(k) / 3.0, 1.0)
    if kind is LatticeKind.HEXAGONAL:
        return np.stack([m, -m], axis=-1)
    return np.stack([0.25 + 0.75 * m, 0.25 - 0.75 * m, np.full_like(m, -0.5)], axis=-1)


def gamma(lattice, j: int, k) -> np.ndarray:
    """Band phase ``gamma_j(k)`` in ``[0, pi]`` from the closed forms."""
    return np.arccos(cos_gamma(lattice, k)[..., j])


def gamma_numeric(crystal: Crystal, j: int, k) -> np.ndarray:
    """Band phase from the eigensolver; works for any quotient graph."""
    lam = vertex_eigenvalues(crystal, k)[..., j]
    return np.arccos(np.clip(lam, -1.0, 1.0))


def line_graph_spectrum_map(eigs, kappa: int, n_extra: int = 1) -> np.ndarray:
    """Random-walk spectrum of the line graph of a kappa-regular graph.

    Maps each eigenvalue through ``(kappa x + kappa - 2) / (2 (kappa - 1))``
    and appends ``-1/(kappa - 1)`` ``n_extra`` times (|E| - |V| per cell).
    """
    if kappa < 3:
        raise ValueError("kappa must be at least 3")
    x = np.asarray(eigs, float)
    mapped = (kappa * x + kappa - 2.0) / (2.0 * (kappa - 1.0))
    return np.concatenate([mapped, np.full(n_extra, -1.0 / (kappa - 1.0))])


def kagome_factor(cos_gamma_hex) -> np.ndarray:
    """Chain-rule factor ``sqrt3 * sqrt((1 + c) / (5 + 3c))`` linking kagome and hexagonal gradients."""
    c = np.asarray(cos_gamma_hex, float)
    return SQRT3 * np.sqrt(np.maximum(1.0 + c, 0.0) / (5.0 + 3.0 * c))


def _velocity_arrays(kind: LatticeKind, k: np.ndarray):
    """Closed-form gradients and their denominators, both ``(..., n_bands[, 2])``."""
    k1, k2 = k[..., 0], k[..., 1]
    if kind is LatticeKind.TRIANGULAR:
        c = cos_gamma(kind, k)[..., 0]
        den = 3.0 * np.sqrt(np.maximum(1.0 - c * c, 0.0))
        s12 = np.sin(k1 + k2)
        num = np.stack([np.sin(k1) + s12, np.sin(k2) + s12], axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            v = num / den[..., None]
        return v[..., None, :], den[..., None]

    m = np.minimum(_hex_modulus(k) / 3.0, 1.0)
    sd = np.sin(k1 - k2)
    num = (2.0 / 9.0) * np.stack([np.sin(k1) + sd, np.sin(k2) - sd], axis=-1)
    # sin(2 gamma) = 2 c sqrt(1 - c^2); the lower band flips the sign
    s2g = 2.0 * m * np.sqrt(np.maximum(1.0 - m * m, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        top = num / s2g[..., None]
    hexv = np.stack([top, -top], axis=-2)
    hexden = np.stack([s2g, -s2g], axis=-1)
    if kind is LatticeKind.HEXAGONAL:
        return hexv, hexden
    g = kagome_factor(np.stack([m, -m], axis=-1))
    kv = g[..., None] * hexv
    kden = (5.0 + 3.0 * m * m)[..., None] * hexden
    flat = np.zeros(k.shape[:-1] + (1, 2))
    return (np.concatenate([kv, flat], axis=-2),
            np.concatenate([kden, np.ones(k.shape[:-1] + (1,))], axis=-1))


def velocity_field(lattice, k, threshold: float = DENOMINATOR_THRESHOLD):
    """Closed-form ``grad gamma_j`` for all bands.

    Returns ``(xy, singular)`` with ``xy`` of shape ``(..., n_bands, 2)``;
    entries whose denominator magnitude falls below ``threshold`` are NaN and
    flagged singular.
    """
    kind = _kind(lattice)
    if kind not in CLOSED_FORM:
        raise ValueError(f"no closed-form velocity for {kind.value}")
    k = np.asarray(k, float)
    v, den = _velocity_arrays(kind, k)
    singular = np.abs(den) < threshold
    v = np.where(singular[..., None], np.nan, v)
    return v, singular


# Small-|q| cones gamma ~ gamma0 + sign * sqrt(q^T M q) around each singular point,
# keyed by (point index, band) -> (M, scale).  Scale 0 means the limit vanishes.
_M_TRI = np.array([[2.0, 1.0], [1.0, 2.0]]) / 3.0
_M_HEX0 = np.array([[2.0, -1.0], [-1.0, 2.0]]) / 9.0
_M_HEXK = np.array([[1.0, -0.5], [-0.5, 1.0]]) / 9.0
_G_DIRAC = float(kagome_factor(0.0))
_G_ZERO = float(kagome_factor(1.0))

_CONES: dict[LatticeKind, dict[tuple[int, int], tuple[np.ndarray, float]]] = {
    LatticeKind.TRIANGULAR: {(0, 0): (_M_TRI, 1.0)},
    LatticeKind.HEXAGONAL: {
        (0, 0): (_M_HEX0, 1.0), (0, 1): (_M_HEX0, -1.0),
        (1, 0): (_M_HEXK, -1.0), (1, 1): (_M_HEXK, 1.0),
        (2, 0): (_M_HEXK, -1.0), (2, 1): (_M_HEXK, 1.0),
    },
    LatticeKind.KAGOME: {
        (0, 0): (_M_HEX0, _G_ZERO), (0, 1): (_M_HEX0, 0.0),
        (1, 0): (_M_HEXK, -_G_DIRAC), (1, 1): (_M_HEXK, _G_DIRAC),
        (2, 0): (_M_HEXK, -_G_DIRAC), (2, 1): (_M_HEXK, _G_DIRAC),
    },
}


def directional_limit(lattice, j: int, point: int, direction) -> np.ndarray:
    """Limit of ``grad gamma_j`` approaching singular point ``point`` along ``direction``.

    ``direction`` may be a batch ``(..., 2)``.  Bands without a cone at the
    point (e.g. the kagome flat band) return their regular value.
    """
    kind = _kind(lattice)
    d = np.asarray(direction, float)
    if kind is LatticeKind.KAGOME and j == 2:
        return np.zeros_like(d)
    M, scale = _CONES[kind][(point, j)]
    Md = d @ M
    norm = np.sqrt(np.einsum("...i,...i->...", d, Md))
    if np.any(norm == 0):
        raise ValueError("approach direction must be nonzero")
    return scale * Md / norm[..., None]


def singular_index(lattice, k, radius: float = 1e-12) -> int | None:
    """Index of the enumerated singular point within ``radius`` (torus sup-norm) of ``k``, else None."""
    pts = SINGULAR_POINTS[_kind(lattice)]
    dist = np.max(np.abs(torus_delta(np.asarray(k, float)[None, :], pts)), axis=-1)
    hit = np.flatnonzero(dist <= radius)
    return int(hit[0]) if hit.size else None


@dataclass(frozen=True)
class VelocityPoint:
    k: np.ndarray
    j: int
    xy: np.ndarray
    uv: np.ndarray
    singular: bool = False


def velocity_closed_form(lattice, j: int, k, direction=None) -> VelocityPoint:
    """Pseudo-velocity of band ``j`` at ``k``.

    On a singular wave vector an approach ``direction`` is required and the
    directional limit is returned with ``singular=True``.
    """
    kind = _kind(lattice)
    k = reduce_k(k)
    if not 0 <= j < N_BANDS[kind]:
        raise IndexError(f"{kind.value} has {N_BANDS[kind]} bands; got j={j}")
    v, sing = velocity_field(kind, k)
    if not sing[j]:
        xy = v[j]
        return VelocityPoint(k, j, xy, rotate(kind, xy), False)
    idx = singular_index(kind, k, radius=1e-6)
    if direction is None or idx is None:
        pts = ", ".join(f"({p[0]:.6g}, {p[1]:.6g})" for p in SINGULAR_POINTS[kind])
        raise SingularPointError(
            f"k={k.tolist()} is singular for {kind.value} band {j}; pass an approach direction. "
            f"Known singular set: {pts}"
        )
    xy = directional_limit(kind, j, idx, direction)
    return VelocityPoint(k, j, xy, rotate(kind, xy), True)


def ratio_direction(r: float) -> np.ndarray:
    """Approach direction for ``k2 / k1 = r``; ``r = inf`` is the ``k1 = 0`` axis."""
    return np.array([0.0, 1.0]) if np.isinf(r) else np.array([1.0, float(r)])


def _stencil_check(lam: np.ndarray, j: int, h: float, k) -> None:
    gaps = []
    if j > 0:
        gaps.append(lam[..., j - 1] - lam[..., j])
    if j + 1 < lam.shape[-1]:
        gaps.append(lam[..., j] - lam[..., j + 1])
    if gaps and np.min(gaps) < 2 * h:
        raise BandTrackingError(f"band {j} is within {np.min(gaps):.3g} of a neighbour near k={np.asarray(k).tolist()}")


def velocity_numeric(crystal: Crystal, j: int, k, h: float = 1e-5) -> VelocityPoint:
    """Central-difference gradient of ``gamma_numeric``; the independent check on the closed forms."""
    if h <= 0:
        raise ValueError("step must be positive")
    k = np.asarray(k, float)
    E = h * np.eye(2)
    pts = np.stack([k + E[0], k - E[0], k + E[1], k - E[1]])
    lam = vertex_eigenvalues(crystal, np.vstack([k[None], pts]))
    _stencil_check(lam, j, h, k)
    if np.any(np.abs(lam[:, j]) >= 1.0 - 1e-12):
        raise BandTrackingError(f"band {j} touches +-1 near k={k.tolist()}")
    g = np.arccos(lam[1:, j])
    xy = np.array([(g[0] - g[1]) / (2 * h), (g[2] - g[3]) / (2 * h)])
    uv = rotate(crystal, xy) if crystal.kind is not None else xy.copy()
    return VelocityPoint(reduce_k(k), j, xy, uv, False)


def velocity_spectral(crystal: Crystal, k, threshold: float = DENOMINATOR_THRESHOLD):
    """Hellmann-Feynman gradients ``-grad(lambda_j) / sin(gamma_j)`` for every band.

    Valid away from band crossings.  Returns ``(xy, singular)`` shaped like
    :func:`velocity_field`.
    """
    k = np.asarray(k, float)
    S = symmetrized_vertex_matrix(crystal, k)
    lam, vec = np.linalg.eigh(S)
    lam, vec = lam[..., ::-1], vec[..., ::-1]
    m = crystal.embedding.shifts
    grads = []
    for i in range(m.shape[1]):
        # derivative of each arc phase is i * m_i(e)
        dS = _weighted_symmetrized(crystal, k, 1j * m[:, i])
        grads.append(np.einsum("...uj,...uw,...wj->...j", vec.conj(), dS, vec).real)
    dlam = np.stack(grads, axis=-1)
    s = np.sqrt(np.maximum(1.0 - lam * lam, 0.0))
    singular = s < threshold
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = -dlam / s[..., None]
    return np.where(singular[..., None], np.nan, xy), singular


def _weighted_symmetrized(crystal: Crystal, k, weight: np.ndarray) -> np.ndarray:
    g = crystal.graph
    T, O = _incidence(crystal)
    deg = np.asarray(g.degrees, float)
    w = phases(crystal, k) * weight / np.sqrt(deg[g.origins] * deg[g.terminals])
    return np.einsum("ue,...e,we->...uw", T, w, O)


def band_velocities(crystal_or_kind, k):
    """Closed form when available, Hellmann-Feynman otherwise."""
    if isinstance(crystal_or_kind, Crystal):
        if crystal_or_kind.kind in CLOSED_FORM:
            return velocity_field(crystal_or_kind.kind, k)
        return velocity_spectral(crystal_or_kind, k)
    kind = LatticeKind.parse(crystal_or_kind)
    if kind in CLOSED_FORM:
        return velocity_field(kind, k)

    return velocity_spectral(build_crystal(kind), k)


# ---------------------------------------------------------------- Hessians


@dataclass(frozen=True)
class HessianValue:
    k: np.ndarray
    j: int
    det_H: float
    finite: bool


def _lambda_derivatives(kind: LatticeKind, k: np.ndarray):
    """Band eigenvalue with first and second derivatives: shapes (..., B), (..., B, 2), (..., B, 2, 2)."""
    k1, k2 = k[..., 0], k[..., 1]
    c1, c2, s1, s2 = np.cos(k1), np.cos(k2), np.sin(k1), np.sin(k2)
    if kind is LatticeKind.TRIANGULAR:
        c12, s12 = np.cos(k1 + k2), np.sin(k1 + k2)
        lam = (c1 + c2 + c12) / 3.0
        d = -np.stack([s1 + s12, s2 + s12], axis=-1) / 3.0
        dd = -np.stack([np.stack([c1 + c12, c12], -1), np.stack([c12, c2 + c12], -1)], -2) / 3.0
        return lam[..., None], d[..., None, :], dd[..., None, :, :]
    cd, sd = np.cos(k1 - k2), np.sin(k1 - k2)
    Fi = np.stack([-2.0 * (s1 + sd), -2.0 * (s2 - sd)], axis=-1)
    Fij = np.stack([np.stack([-2.0 * (c1 + cd), 2.0 * cd], -1),
                    np.stack([2.0 * cd, -2.0 * (c2 + cd)], -1)], -2)
    rF = _hex_modulus(k)
    F = rF * rF
    lam = rF / 3.0
    d = Fi / (6.0 * rF[..., None])
    dd = Fij / (6.0 * rF[..., None, None]) - np.einsum("...i,...j->...ij", Fi, Fi) / (12.0 * (F * rF)[..., None, None])
    lam = np.stack([lam, -lam], -1)
    d = np.stack([d, -d], -2)
    dd = np.stack([dd, -dd], -3)
    if kind is LatticeKind.HEXAGONAL:
        return lam, d, dd
    lam = np.concatenate([0.25 + 0.75 * lam, np.full(lam.shape[:-1] + (1,), -0.5)], -1)
    d = np.concatenate([0.75 * d, np.zeros(d.shape[:-2] + (1, 2))], -2)
    dd = np.concatenate([0.75 * dd, np.zeros(dd.shape[:-3] + (1, 2, 2))], -3)
    return lam, d, dd


def hessian_denominator(lattice, k) -> np.ndarray:
    """The vanishing factor of each band's Hessian determinant (``9 sin^2 gamma``, ``sin^4 2gamma`` ...)."""
    kind = _kind(lattice)
    k = np.asarray(k, float)
    if kind is LatticeKind.TRIANGULAR:
        c = cos_gamma(kind, k)[..., 0]
        return (9.0 * (1.0 - c * c))[..., None]
    m = np.minimum(_hex_modulus(k) / 3.0, 1.0)
    s4 = (2.0 * m * np.sqrt(np.maximum(1.0 - m * m, 0.0))) ** 4
    if kind is LatticeKind.HEXAGONAL:
        return np.stack([s4, s4], -1)
    den = (5.0 + 3.0 * m * m) * s4
    return np.stack([den, den, np.ones_like(den)], -1)


def hessian_matrix(lattice, k) -> np.ndarray:
    """Closed-form second derivatives of every band, shape ``(..., n_bands, 2, 2)``."""
    kind = _kind(lattice)
    k = np.asarray(k, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam, d, dd = _lambda_derivatives(kind, k)
        s = np.sqrt(np.maximum(1.0 - lam * lam, 0.0))
        gi = -d / s[..., None]
        H = -(dd + lam[..., None, None] * np.einsum("...i,...j->...ij", gi, gi)) / s[..., None, None]
    if kind is LatticeKind.KAGOME:
        H[..., 2, :, :] = 0.0
    return H


def hessian_field(lattice, k, cell_radius: float = 0.0, threshold: float = DENOMINATOR_THRESHOLD):
    """``det H`` for all bands plus the ``finite`` mask.

    A band is flagged non-finite where its denominator is below ``threshold``
    or where ``k`` lies within ``cell_radius`` (torus sup-norm) of an
    enumerated singular point.  Flat bands are always finite.
    """
    kind = _kind(lattice)
    k = np.asarray(k, float)
    H = hessian_matrix(kind, k)
    det = H[..., 0, 0] * H[..., 1, 1] - H[..., 0, 1] * H[..., 1, 0]
    finite = np.abs(hessian_denominator(kind, k)) >= threshold
    pts = SINGULAR_POINTS[kind]
    near = np.zeros(k.shape[:-1], bool)
    for p in pts:
        near |= np.max(np.abs(torus_delta(k, p)), axis=-1) <= cell_radius * (1 + 1e-12)
    finite &= ~near[..., None]
    for b in FLAT_BANDS.get(kind, ()):
        finite[..., b] = True
        det[..., b] = 0.0
    det = np.where(finite, det, np.inf)
    return det, finite


def hessian_det(lattice, j: int, k, method: str = "closed", h: float = 1e-4, cell_radius: float = 0.0) -> HessianValue:
    """Determinant of the Hessian of band ``j``.

    ``method="closed"`` uses the analytic second derivatives;
    ``method="fd"`` uses second-order central differences of the band
    eigenvalue (any crystal).  Singular points are flagged, never raised.
    """
    k = reduce_k(k)
    if method == "fd":
        crystal = lattice if isinstance(lattice, Crystal) else build_crystal(lattice)
        H = hessian_numeric(crystal, j, k, h)
        val = float(np.linalg.det(H))
        if crystal.kind is None:
            return HessianValue(k, j, val, bool(np.all(np.isfinite(H))))
        _, fin = hessian_field(crystal.kind, k, cell_radius)
        return HessianValue(k, j, val if fin[j] else np.inf, bool(fin[j]))
    det, fin = hessian_field(lattice, k, cell_radius)
    return HessianValue(k, j, float(det[j]), bool(fin[j]))


def hessian_numeric(crystal: Crystal, j: int, k, h: float = 1e-4) -> np.ndarray:
    """Second-order central differences of ``gamma_numeric`` on a 9-point stencil."""
    k = np.asarray(k, float)
    offs = np.array([[a, b] for a in (-1, 0, 1) for b in (-1, 0, 1)], float) * h
    lam = vertex_eigenvalues(crystal, k + offs)
    _stencil_check(lam, j, h, k)
    g = np.arccos(np.clip(lam[:, j], -1.0, 1.0)).reshape(3, 3)
    H = np.empty((2, 2))
    H[0, 0] = (g[2, 1] - 2 * g[1, 1] + g[0, 1]) / h**2
    H[1, 1] = (g[1, 2] - 2 * g[1, 1] + g[1, 0]) / h**2
    H[0, 1] = H[1, 0] = (g[2, 2] - g[2, 0] - g[0, 2] + g[0, 0]) / (4 * h**2)
    return H


def offset_grid(N: int, offset: float = 0.5) -> np.ndarray:
    """``(N, N, 2)`` wave vectors ``2 pi (i + offset) / N``."""
    c = (np.arange(N) + offset) * (TWO_PI / N)
    return np.stack(np.meshgrid(c, c, indexing="ij"), axis=-1)


def grid_velocities(lattice, N: int, offset: float = 0.5):
    """Velocities of every band on the ``N x N`` grid.

    Near-singular nodes of the closed-form lattices get the directional limit
    along the node's offset from the nearest enumerated point; nodes sitting
    exactly on a singular point stay NaN.  Returns ``(k, v, regularized)``.
    """
    k = offset_grid(N, offset)
    v, sing = band_velocities(lattice, k)
    kind = lattice.kind if isinstance(lattice, Crystal) else LatticeKind.parse(lattice)
    fixed = np.zeros(sing.shape, bool)
    if sing.any() and kind in CLOSED_FORM:
        pts = SINGULAR_POINTS[kind]
        for idx in zip(*np.nonzero(sing)):
            d = torus_delta(k[idx[:2]][None, :], pts)
            p = int(np.argmin(np.max(np.abs(d), axis=-1)))
            if np.any(d[p] != 0):
                v[idx] = directional_limit(kind, idx[2], p, d[p])
                fixed[idx] = True
    return k, v, fixed
