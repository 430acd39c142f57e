"""Twisted random-walk and Grover operators on the quotient graph.

All matrix builders accept a single wave vector of shape ``(d,)`` or a batch
of shape ``(..., d)`` and return matrices of shape ``(..., n, n)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .crystal import Crystal

TWO_PI = 2.0 * np.pi


class SpectrumError(RuntimeError):
    """Eigensolver failure at a given wave vector."""


class SpectralMappingError(RuntimeError):
    """An eigenvalue of the Grover fiber is neither induced nor at +-1."""


class OperatorKind(str, Enum):
    VERTEX = "vertex"
    ARC = "arc"


def reduce_k(k) -> np.ndarray:
    """Reduce wave vector components into [0, 2pi)."""
    return np.mod(np.asarray(k, dtype=float), TWO_PI)


def phases(crystal: Crystal, k) -> np.ndarray:
    """``exp(i <Theta k, theta_hat(e)>)`` per arc, shape ``(..., n_arcs)``."""
    k = np.asarray(k, dtype=float)
    return np.exp(1j * (k @ crystal.embedding.shifts.T))


def _incidence(crystal: Crystal):
    g = crystal.graph
    o, t = g.origins, g.terminals
    T = np.zeros((g.n_vertices, g.n_arcs))
    O = np.zeros((g.n_vertices, g.n_arcs))
    T[t, np.arange(g.n_arcs)] = 1.0
    O[o, np.arange(g.n_arcs)] = 1.0
    return T, O


def vertex_matrix(crystal: Crystal, k) -> np.ndarray:
    """Twisted random walk: entry (u, w) sums ``exp(i k.m(e)) / deg(w)`` over arcs w -> u."""
    T, O = _incidence(crystal)
    deg = np.asarray(crystal.graph.degrees, dtype=float)
    w = phases(crystal, k) / deg[crystal.graph.origins]
    return np.einsum("ue,...e,we->...uw", T, w, O)


def _grover_weights(crystal: Crystal) -> np.ndarray:
    g = crystal.graph
    o, t, inv = g.origins, g.terminals, g.inverses
    deg = np.asarray(g.degrees, dtype=float)
    W = (t[None, :] == o[:, None]) * (2.0 / deg[o])[:, None]
    W[np.arange(g.n_arcs), inv] -= 1.0
    return W


def arc_matrix(crystal: Crystal, k) -> np.ndarray:
    """Twisted Grover operator: entry (e, f) is ``(2/deg(o(e)) - [f = inv e]) exp(i k.m(f))`` when t(f) = o(e)."""
    return _grover_weights(crystal) * phases(crystal, k)[..., None, :]


def symmetrized_vertex_matrix(crystal: Crystal, k) -> np.ndarray:
    """``D^{-1/2} A_k D^{-1/2}``: Hermitian and similar to the twisted random walk."""
    deg = np.asarray(crystal.graph.degrees, dtype=float)
    s = np.sqrt(deg)
    return vertex_matrix(crystal, k) * s[None, :] / s[:, None]


@dataclass(frozen=True)
class BlochOperator:
    kind: OperatorKind
    k: np.ndarray
    matrix: np.ndarray
    labels: tuple[int, ...]

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def vertex_operator(crystal: Crystal, k) -> BlochOperator:
    k = reduce_k(k)
    return BlochOperator(OperatorKind.VERTEX, k, vertex_matrix(crystal, k), tuple(range(crystal.n_vertices)))


def arc_operator(crystal: Crystal, k) -> BlochOperator:
    k = reduce_k(k)
    return BlochOperator(OperatorKind.ARC, k, arc_matrix(crystal, k), tuple(range(crystal.n_arcs)))


def vertex_eigenvalues(crystal: Crystal, k, descending: bool = True) -> np.ndarray:
    """Real spectrum of the twisted random walk for a batch of wave vectors."""
    try:
        lam = np.linalg.eigvalsh(symmetrized_vertex_matrix(crystal, k))
    except np.linalg.LinAlgError as exc:
        raise SpectrumError(f"Hermitian eigensolver failed near k={np.asarray(k).tolist()!r}") from exc
    return lam[..., ::-1] if descending else lam


def unitary_eigenvalues(U: np.ndarray, snap: float = 1e-10) -> tuple[np.ndarray, float]:
    """Eigenvalues of (a batch of) unitary matrices, sorted by principal argument.

    Values within ``snap`` of the unit circle are projected onto it; the
    largest radial deviation seen before projection is returned alongside.
    """
    try:
        z = np.linalg.eigvals(U)
    except np.linalg.LinAlgError as exc:
        raise SpectrumError("general eigensolver did not converge") from exc
    r = np.abs(z)
    dev = float(np.max(np.abs(r - 1.0), initial=0.0))
    z = np.where(np.abs(r - 1.0) <= snap, z / np.where(r == 0, 1, r), z)
    order = np.argsort(np.angle(z), axis=-1, kind="stable")
    return np.take_along_axis(z, order, axis=-1), dev


def spectrum(op: BlochOperator) -> np.ndarray:
    if op.kind is OperatorKind.VERTEX:
        try:
            # similar to a Hermitian matrix, so the spectrum is real
            lam = np.linalg.eigvals(op.matrix)
        except np.linalg.LinAlgError as exc:
            raise SpectrumError(f"eigensolver failed at k={op.k.tolist()}") from exc
        return np.sort(lam.real)
    try:
        z, _ = unitary_eigenvalues(op.matrix)
    except SpectrumError as exc:
        raise SpectrumError(f"eigensolver failed at k={op.k.tolist()}") from exc
    return z


@dataclass
class SpectralMappingReport:
    k: np.ndarray
    induced_pairs: list[tuple[float, tuple[complex, complex]]]
    residual_eigs: list[complex]
    mult_plus_one: int
    mult_minus_one: int
    max_match_residual: float
    max_radial_deviation: float = 0.0
    max_residual_distance: float = 0.0

    @property
    def residual_count(self) -> int:
        return self.mult_plus_one + self.mult_minus_one


def _match(lam: np.ndarray, z: np.ndarray):
    """Greedy pairing of ``exp(+-i arccos(lam))`` targets with eigenvalues ``z``.

    Pairs are taken in order of increasing distance over the whole
    target-by-eigenvalue table.
    """
    # arccos is ill-conditioned at +-1: 1 - eps would lift to exp(+-i sqrt(2 eps))
    lam = np.where(np.abs(np.abs(lam) - 1.0) < 1e-12, np.sign(lam), lam)
    g = np.arccos(np.clip(lam, -1.0, 1.0))
    targets = np.concatenate([np.exp(1j * g), np.exp(-1j * g)])
    dist = np.abs(targets[:, None] - z[None, :])
    order = np.argsort(dist, axis=None, kind="stable")
    used_t = np.zeros(len(targets), bool)
    used_z = np.zeros(len(z), bool)
    pick = np.full(len(targets), -1)
    for flat in order:
        i, j = divmod(int(flat), len(z))
        if used_t[i] or used_z[j]:
            continue
        used_t[i] = used_z[j] = True
        pick[i] = j
        if used_t.all():
            break
    return targets, pick, ~used_z


def verify_spectral_mapping(crystal: Crystal, k, tol: float = 1e-9) -> SpectralMappingReport:
    """Check that the Grover fiber spectrum is the lifted random-walk spectrum plus +-1.

    Raises :class:`SpectralMappingError` when an unmatched eigenvalue sits
    farther than ``tol`` from both +1 and -1.

    Near wave vectors where a random-walk eigenvalue equals +-1 the lifted
    angle ``arccos(lam)`` is only known to about ``sqrt(eps) ~ 1e-8``, so
    tolerances far below that cannot be met within ~1e-8 of such points.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    k = reduce_k(k)
    lam = vertex_eigenvalues(crystal, k)
    z, radial = unitary_eigenvalues(arc_matrix(crystal, k))
    targets, pick, free = _match(lam, z)
    nV = len(lam)
    pairs = [(float(lam[j]), (complex(z[pick[j]]), complex(z[pick[j + nV]]))) for j in range(nV)]
    match_res = float(np.max(np.abs(targets - z[pick])))
    rest = z[free]
    d_plus, d_minus = np.abs(rest - 1.0), np.abs(rest + 1.0)
    far = np.minimum(d_plus, d_minus)
    report = SpectralMappingReport(
        k=k,
        induced_pairs=pairs,
        residual_eigs=[complex(x) for x in rest],
        mult_plus_one=int(np.sum(d_plus <= d_minus)),
        mult_minus_one=int(np.sum(d_minus < d_plus)),
        max_match_residual=match_res,
        max_radial_deviation=radial,
        max_residual_distance=float(np.max(far, initial=0.0)),
    )
    if report.max_residual_distance > tol:
        raise SpectralMappingError(
            f"eigenvalue {rest[np.argmax(far)]:.6g} at k={k.tolist()} is {far.max():.3g} from +-1"
        )
    if match_res > tol:
        raise SpectralMappingError(f"induced eigenvalue unmatched at k={k.tolist()} (residual {match_res:.3g})")
    return report
