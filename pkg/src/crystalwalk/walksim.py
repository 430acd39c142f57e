"""Real-space Grover walk on an L x L torus of unit cells.

The torus reproduces the infinite crystal exactly as long as the walker has
not reached half-way around (``n < L / 2``).  Amplitudes are stored as
``(n_arcs, L, L)`` arrays; index ``(e, x1, x2)`` is the arc ``e`` leaving
cell ``x``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ._io import csv_header, fmt
from .bloch import arc_matrix
from .crystal import Crystal, LatticeKind, build_crystal
from .dispersion import grid_velocities


class WraparoundError(ValueError):
    """The requested number of steps would let the walk wrap around the torus."""


@dataclass(frozen=True)
class TorusLattice:
    crystal: Crystal
    L: int
    shifts: np.ndarray

    @property
    def n_arcs(self) -> int:
        return self.crystal.n_arcs

    @property
    def n_slots(self) -> int:
        return self.L * self.L * self.n_arcs

    def cell_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Signed cell coordinates in ``[-L/2, L/2)`` laid out like the state arrays."""
        c = np.arange(self.L)
        c = np.where(c >= (self.L + 1) // 2, c - self.L, c)
        return np.meshgrid(c, c, indexing="ij")

    def check_steps(self, n: int) -> None:
        if 2 * n >= self.L:
            raise WraparoundError(f"n={n} steps need L > {2 * n}; torus has L={self.L}")


def build_torus(lattice: "Crystal | LatticeKind | str", L: int) -> TorusLattice:
    if L < 4:
        raise ValueError(f"torus side must be at least 4, got {L}")
    crystal = lattice if isinstance(lattice, Crystal) else build_crystal(lattice)
    shifts = crystal.embedding.integer_shifts()
    shifts.setflags(write=False)
    return TorusLattice(crystal, int(L), shifts)


@dataclass
class WalkState:
    amplitudes: np.ndarray
    n: int = 0

    def norm2(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)


def basis_state(torus: TorusLattice, arc: int, cell: tuple[int, int] = (0, 0)) -> WalkState:
    psi = np.zeros((torus.n_arcs, torus.L, torus.L), complex)
    psi[arc, cell[0] % torus.L, cell[1] % torus.L] = 1.0
    return WalkState(psi, 0)


class _Stepper:
    """Coin-and-shift factorisation of one Grover step."""

    def __init__(self, torus: TorusLattice):
        g = torus.crystal.graph
        self.shifts = [tuple(int(s) for s in m) for m in torus.shifts]
        self.terminals = g.terminals
        self.origins = g.origins
        self.inverse = g.inverses
        self.coef = 2.0 / np.asarray(g.degrees, float)
        self.into = [np.flatnonzero(self.terminals == v) for v in range(g.n_vertices)]

    def __call__(self, psi: np.ndarray) -> np.ndarray:
        # amplitude on arc f arrives at cell x + m(f)
        inc = np.empty_like(psi)
        for f, m in enumerate(self.shifts):
            if m == (0, 0):
                inc[f] = psi[f]
            else:
                inc[f] = np.roll(psi[f], m, axis=(0, 1))
        sums = [inc[idx].sum(axis=0) for idx in self.into]
        out = np.empty_like(psi)
        for e in range(len(out)):
            v = self.origins[e]
            np.multiply(sums[v], self.coef[v], out=out[e])
            out[e] -= inc[self.inverse[e]]
        return out


def step(torus: TorusLattice, state: WalkState) -> WalkState:
    """One application of the Grover walk operator."""
    return WalkState(_Stepper(torus)(state.amplitudes), state.n + 1)


def evolve(torus: TorusLattice, state: WalkState, n: int) -> WalkState:
    stepper = _Stepper(torus)
    psi = state.amplitudes
    for _ in range(n):
        psi = stepper(psi)
    return WalkState(psi, state.n + n)


@dataclass
class Distribution:
    """Probability per torus cell at time ``n``.

    ``marginal="arc"`` puts ``|psi(x; e)|^2`` on the cell the arc leaves;
    ``marginal="vertex"`` puts it on the cell of the arc's terminal vertex.
    """

    prob: np.ndarray
    n: int
    marginal: str = "arc"

    def total(self) -> float:
        return float(self.prob.sum())


def _marginal(torus: TorusLattice, psi: np.ndarray, marginal: str) -> np.ndarray:
    p = np.abs(psi) ** 2
    if marginal == "arc":
        return p.sum(axis=0)
    if marginal == "vertex":
        out = np.zeros((torus.L, torus.L))
        for e, m in enumerate(torus.shifts):
            out += np.roll(p[e], tuple(int(s) for s in m), axis=(0, 1))
        return out
    raise ValueError(f"marginal must be 'arc' or 'vertex', got {marginal!r}")


@dataclass
class EnsembleRun:
    """Mixed-state evolution: one pure run per origin arc."""

    torus: TorusLattice
    members: dict[int, list[Distribution]]
    return_prob: np.ndarray
    max_norm_drift: float

    def mixed(self, n: int) -> Distribution:
        return mix(self.members[n])


def mix(dists: Sequence[Distribution]) -> Distribution:
    prob = np.mean([d.prob for d in dists], axis=0)
    return Distribution(prob, dists[0].n, dists[0].marginal)


def run_ensemble(
    torus: TorusLattice,
    n_max: int,
    snapshots: Iterable[int] = (),
    marginal: str = "arc",
    workers: int = 1,
) -> EnsembleRun:
    """Evolve every origin-cell basis arc for ``n_max`` steps.

    Records the member distributions at each snapshot time and the
    mixed-state probability of the origin cell at every step.
    """
    torus.check_steps(n_max)
    snaps = sorted({int(s) for s in snapshots})
    if snaps and (snaps[0] < 0 or snaps[-1] > n_max):
        raise ValueError(f"snapshot times must lie in 0..{n_max}")

    def member(arc: int):
        stepper = _Stepper(torus)
        psi = basis_state(torus, arc).amplitudes
        ret = np.empty(n_max + 1)
        dists = {}
        drift = 0.0
        for t in range(n_max + 1):
            if t:
                psi = stepper(psi)
            ret[t] = float(np.sum(np.abs(psi[:, 0, 0]) ** 2))
            if t in snaps:
                dists[t] = Distribution(_marginal(torus, psi, marginal), t, marginal)
            if t in snaps or t == n_max:
                drift = max(drift, abs(float(np.vdot(psi, psi).real) - 1.0))
        return dists, ret, drift

    arcs = range(torus.n_arcs)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(member, arcs))
    else:
        results = [member(a) for a in arcs]
    members = {t: [r[0][t] for r in results] for t in snaps}
    ret = np.mean([r[1] for r in results], axis=0)
    return EnsembleRun(torus, members, ret, max(r[2] for r in results))


def evolve_ensemble(torus: TorusLattice, n: int, marginal: str = "arc", workers: int = 1) -> list[Distribution]:
    """Distributions at time ``n`` of the pure runs started on each origin arc."""
    return run_ensemble(torus, n, [n], marginal, workers).members[n]


def characteristic(dists: "Distribution | Sequence[Distribution]", xi, torus: TorusLattice) -> complex:
    """Mixed-state characteristic function ``sum_x mu_n(x) exp(i <xi, x>)``."""
    if isinstance(dists, Distribution):
        dists = [dists]
    x1, x2 = torus.cell_coords()
    xi = np.asarray(xi, float)
    phase = np.exp(1j * (xi[0] * x1 + xi[1] * x2))
    return complex(np.mean([np.sum(d.prob * phase) for d in dists]))


def ballistic_term(lattice, xi, Nq: int = 256) -> float:
    """``(1/|E0|) sum_j mean_k cos(<xi, grad gamma_j(k)>)`` by midpoint quadrature."""
    if Nq < 64:
        raise ValueError("quadrature grid must be at least 64")
    crystal = lattice if isinstance(lattice, Crystal) else build_crystal(lattice)
    _, v, _ = grid_velocities(lattice, Nq)
    xi = np.asarray(xi, float)
    vals = np.cos(v @ xi)
    return float(vals.sum(axis=-1).mean() / crystal.n_edges)


def localization_constant(lattice) -> float:
    """``(2 b1 - 1_B) / (2 |E0|)``, the xi-independent term of the closed-form limit."""
    c = lattice if isinstance(lattice, Crystal) else build_crystal(lattice)
    return (2 * c.b1 - c.bipartite_indicator) / (2 * c.n_edges)


def residual_weight(lattice) -> float:
    """Share of Grover eigenvalues pinned at +-1 per wave vector, ``(|A0| - 2|V0|) / |A0|``."""
    c = lattice if isinstance(lattice, Crystal) else build_crystal(lattice)
    return (c.n_arcs - 2 * c.n_vertices) / c.n_arcs


def limit_characteristic_rhs(lattice, xi, Nq: int = 256) -> float:
    """Ballistic quadrature plus the closed-form localization constant."""
    return ballistic_term(lattice, xi, Nq) + localization_constant(lattice)


def calibrated_limit(lattice, xi, Nq: int = 256) -> float:
    """Ballistic quadrature with the constant fixed by ``chi(0) = 1``."""
    return ballistic_term(lattice, xi, Nq) + 1.0 - ballistic_term(lattice, (0.0, 0.0), Nq)


@dataclass
class ProbeResult:
    n: np.ndarray
    return_prob: np.ndarray
    running_avg: np.ndarray


def localization_probe(torus: TorusLattice, n_max: int, workers: int = 1) -> ProbeResult:
    """Mixed-state probability of the origin cell per step and its running time average."""
    run = run_ensemble(torus, n_max, (), "arc", workers)
    return probe_from_run(run)


def probe_from_run(run: EnsembleRun) -> ProbeResult:
    p = run.return_prob
    n = np.arange(len(p))
    return ProbeResult(n, p, np.cumsum(p) / (n + 1))


def escape_mass(dist: Distribution, n: int, spec, delta: float, torus: TorusLattice) -> float:
    """Mass at cells with ``Q(x / n) > (1 + delta) r``, the origin cell excluded."""
    if n < 1:
        raise ValueError("n must be positive")
    x1, x2 = torus.cell_coords()
    q = spec.q(np.stack([x1 / n, x2 / n], axis=-1))
    mask = q > (1.0 + delta) * spec.r
    mask[0, 0] = False
    return float(dist.prob[mask].sum())


def bloch_reconstruction(torus: TorusLattice, arc: int, n: int) -> np.ndarray:
    """Amplitudes after ``n`` steps from ``arc`` at the origin, via the twisted operator on the dual grid."""
    L = torus.L
    c = 2 * np.pi * np.arange(L) / L
    k = np.stack(np.meshgrid(c, c, indexing="ij"), axis=-1)
    U = arc_matrix(torus.crystal, k)
    vec = np.zeros((L, L, torus.n_arcs), complex)
    vec[..., arc] = 1.0
    for _ in range(n):
        vec = np.einsum("...ef,...f->...e", U, vec)
    psi = np.fft.fft2(vec, axes=(0, 1)) / (L * L)
    return np.moveaxis(psi, -1, 0)


def write_distribution_csv(path, dists: Sequence[Distribution], torus: TorusLattice, label: str) -> None:
    """Nonzero cells of each distribution, in signed cell coordinates."""
    x1, x2 = torus.cell_coords()
    with open(path, "w") as fh:
        fh.write(csv_header("distribution", lattice=label, L=torus.L, marginal=dists[0].marginal if dists else ""))
        fh.write("n,cx,cy,prob\n")
        for d in dists:
            nz = np.nonzero(d.prob)
            for a, b, p in zip(x1[nz], x2[nz], d.prob[nz]):
                fh.write(f"{d.n},{int(a)},{int(b)},{fmt(p)}\n")


def write_probe_csv(path, probe: ProbeResult, label: str, L: int) -> None:
    with open(path, "w") as fh:
        fh.write(csv_header("probe", lattice=label, L=L))
        fh.write("n,return_prob,running_avg\n")
        for n, p, a in zip(probe.n, probe.return_prob, probe.running_avg):
            fh.write(f"{int(n)},{fmt(p)},{fmt(a)}\n")
