import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from crystalwalk.bloch import vertex_eigenvalues
from crystalwalk.crystal import build_crystal
from crystalwalk.dispersion import (
    SINGULAR_POINTS,
    BandTrackingError,
    SingularPointError,
    band_velocities,
    cos_gamma,
    gamma,
    gamma_numeric,
    hessian_det,
    hessian_field,
    hessian_matrix,
    hessian_numeric,
    kagome_factor,
    line_graph_spectrum_map,
    offset_grid,
    ratio_direction,
    rotate,
    torus_delta,
    velocity_closed_form,
    velocity_field,
    velocity_numeric,
    velocity_spectral,
)

CLOSED = ["triangular", "hexagonal", "kagome"]
CRYSTALS = {n: build_crystal(n) for n in CLOSED + ["square"]}
angles = st.floats(0, 2 * np.pi, allow_nan=False)
wave = st.tuples(angles, angles).map(np.array)
DIRAC = (2 * np.pi / 3, -2 * np.pi / 3)


def far_from_singular(name, k, radius=0.05):
    d = torus_delta(np.asarray(k)[None, :], SINGULAR_POINTS[name])
    return np.min(np.max(np.abs(d), axis=-1)) > radius


@pytest.mark.parametrize("name", CLOSED + ["square"])
def test_branch_consistency_grid(name):
    k = offset_grid(64, 0.0)
    lam = vertex_eigenvalues(CRYSTALS[name], k)
    assert np.max(np.abs(cos_gamma(name, k) - lam)) <= 1e-12


def test_gamma_examples():
    assert gamma("triangular", 0, (0, 0)) == pytest.approx(0, abs=1e-12)
    assert gamma("hexagonal", 0, DIRAC) == pytest.approx(np.pi / 2, abs=1e-7)
    for k in [(0.1, 0.2), (2.0, 5.0)]:
        assert gamma("kagome", 2, k) == pytest.approx(2 * np.pi / 3, abs=1e-12)


@given(k=wave)
def test_gamma_closed_vs_numeric(k):
    for name in CLOSED:
        for j in range(CRYSTALS[name].n_vertices):
            assert np.cos(gamma(name, j, k)) == pytest.approx(np.cos(gamma_numeric(CRYSTALS[name], j, k)), abs=1e-12)


def test_line_graph_map():
    assert np.allclose(line_graph_spectrum_map([1, -1], 3), [1, -0.5, -0.5])
    assert np.allclose(line_graph_spectrum_map([0, 0], 3), [0.25, 0.25, -0.5])
    x = np.linspace(-1, 1, 7)
    assert np.allclose(line_graph_spectrum_map(x, 3)[:-1], (3 * x + 1) / 4)
    with pytest.raises(ValueError):
        line_graph_spectrum_map([0.0], 2)


@given(k=wave)
def test_line_graph_map_matches_kagome_operator(k):
    hexl = vertex_eigenvalues(CRYSTALS["hexagonal"], k)
    kag = vertex_eigenvalues(CRYSTALS["kagome"], k)
    mapped = np.sort(line_graph_spectrum_map(hexl, 3))[::-1]
    assert np.allclose(mapped, kag, atol=1e-12)


def test_triangular_example_point():
    p = velocity_closed_form("triangular", 0, (np.pi / 2, np.pi / 2))
    r = 1 / (2 * np.sqrt(2))
    assert np.allclose(p.xy, [r, r], atol=1e-12)
    assert np.allclose(p.uv, [0.5, 0], atol=1e-12)
    x, y = p.xy
    assert x * x - x * y + y * y == pytest.approx(1 / 8)
    assert not p.singular


def test_rotation_conventions():
    xy = np.array([0.3, -0.1])
    s2 = np.sqrt(2)
    assert np.allclose(rotate("triangular", xy), [(0.3 - 0.1) / s2, (-0.3 - 0.1) / s2])
    assert np.allclose(rotate("hexagonal", xy), [(0.3 + 0.1) / s2, (0.3 - 0.1) / s2])
    assert np.allclose(rotate("square", xy), xy)


@pytest.mark.parametrize("r", [-3.0, -1.0, 0.0, 0.5, 2.0, np.inf])
def test_small_k_limits(r):
    d = ratio_direction(r)
    u, v = velocity_closed_form("triangular", 0, (0, 0), direction=d).uv
    assert u * u + 3 * v * v == pytest.approx(1, abs=1e-12)
    for j in (0, 1):
        p = velocity_closed_form("hexagonal", j, (0, 0), direction=d)
        assert p.singular
        assert p.uv[0] ** 2 + 3 * p.uv[1] ** 2 == pytest.approx(1 / 3, abs=1e-12)


@pytest.mark.parametrize("name", CLOSED)
def test_directional_limit_matches_nearby_value(name):
    for p in SINGULAR_POINTS[name]:
        for theta in np.linspace(0, 2 * np.pi, 7, endpoint=False):
            d = np.array([np.cos(theta), np.sin(theta)])
            for j in range(CRYSTALS[name].n_vertices):
                lim = velocity_closed_form(name, j, p, direction=d).xy
                near = velocity_field(name, np.asarray(p) + 1e-5 * d)[0][j]
                assert np.allclose(lim, near, atol=1e-4)


def test_kagome_factor_values():
    assert kagome_factor(1.0) == pytest.approx(np.sqrt(3) / 2, abs=1e-12)
    assert kagome_factor(0.0) == pytest.approx(np.sqrt(3 / 5), abs=1e-12)


@given(k=wave)
def test_kagome_chain_rule(k):
    assume(far_from_singular("kagome", k, 1e-3))
    vh, _ = velocity_field("hexagonal", k)
    vk, _ = velocity_field("kagome", k)
    g = kagome_factor(cos_gamma("hexagonal", k)[0])
    assert np.allclose(vk[0], g * vh[0], atol=1e-10)


def test_singular_without_direction_lists_set():
    with pytest.raises(SingularPointError, match="Known singular set"):
        velocity_closed_form("hexagonal", 0, DIRAC)
    with pytest.raises(IndexError):
        velocity_closed_form("triangular", 1, (1, 1))


@pytest.mark.parametrize("name", CLOSED)
@given(k=wave)
def test_closed_form_vs_finite_differences(name, k):
    assume(far_from_singular(name, k, 0.05))
    c = CRYSTALS[name]
    for j in range(c.n_vertices):
        try:
            fd = velocity_numeric(c, j, k, h=1e-5).xy
        except BandTrackingError:
            continue
        assert np.allclose(velocity_closed_form(name, j, k).xy, fd, atol=1e-7)


def test_numeric_examples():
    cf = velocity_closed_form("triangular", 0, (np.pi / 2, np.pi / 2)).xy
    assert np.allclose(velocity_numeric(CRYSTALS["triangular"], 0, (np.pi / 2, np.pi / 2)).xy, cf, atol=1e-8)
    v = velocity_numeric(CRYSTALS["square"], 0, (np.pi / 2, np.pi / 2)).xy
    assert v @ v <= 0.5 + 1e-9
    a = velocity_numeric(CRYSTALS["hexagonal"], 0, (0.4, 1.3)).xy
    b = velocity_numeric(CRYSTALS["hexagonal"], 0, (1.3, 0.4)).xy
    assert np.allclose(a, b[::-1], atol=1e-8)


def test_band_tracking_error_near_crossing():
    with pytest.raises(BandTrackingError, match="k="):
        velocity_numeric(CRYSTALS["hexagonal"], 0, np.array(DIRAC) + 1e-7)


@pytest.mark.parametrize("name", CLOSED + ["square"])
@given(k=wave)
def test_inversion_antisymmetry(name, k):
    assume(far_from_singular(name, k, 1e-3))
    v, _ = band_velocities(name, k)
    w, _ = band_velocities(name, -k)
    assert np.allclose(v, -w, atol=1e-9)


@given(k=wave)
def test_hellmann_feynman_agrees(k):
    for name in CLOSED:
        assume(far_from_singular(name, k, 1e-3))
        v, _ = velocity_field(name, k)
        w, _ = velocity_spectral(CRYSTALS[name], k)
        assert np.allclose(v, w, atol=1e-9)


def test_flat_band_velocity_zero():
    v, _ = velocity_field("kagome", offset_grid(128))
    assert np.max(np.abs(v[..., 2, :])) <= 1e-10


def test_hessian_examples():
    h = hessian_det("triangular", 0, (np.pi / 2, np.pi / 2))
    f = hessian_det("triangular", 0, (np.pi / 2, np.pi / 2), method="fd")
    assert h.finite and f.finite
    scale = np.sum(hessian_matrix("triangular", (np.pi / 2, np.pi / 2))[0] ** 2)
    assert abs(h.det_H - f.det_H) <= 1e-6 * scale
    assert not hessian_det("triangular", 0, (0, 0)).finite
    assert not hessian_det("hexagonal", 0, DIRAC).finite
    assert not hessian_det("triangular", 0, (1e-3, 0), cell_radius=0.01).finite


@pytest.mark.parametrize("name", CLOSED)
@given(k=wave)
def test_hessian_closed_vs_fd(name, k):
    assume(far_from_singular(name, k, 0.2))
    c = CRYSTALS[name]
    for j in range(c.n_vertices):
        if name == "kagome" and j == 2:
            continue
        try:
            H_fd = hessian_numeric(c, j, k)
        except BandTrackingError:
            continue
        H = hessian_matrix(name, k)[j]
        assert np.allclose(H, H_fd, atol=1e-5 * max(1.0, np.abs(H).max()))


def test_hessian_field_flat_band_finite():
    det, fin = hessian_field("kagome", offset_grid(16, 0.0))
    assert fin[..., 2].all() and np.all(det[..., 2] == 0)
