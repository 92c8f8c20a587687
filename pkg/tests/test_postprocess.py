from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.interpolate import RegularGridInterpolator

from mcsplit.exceptions import ConfigurationError
from mcsplit.geometry import build_hierarchy, default_layers
from mcsplit.media import FieldSpec, continua_by_threshold, generate_field
from mcsplit.postprocess import (
    ErrorSeries,
    downscale,
    full_coarse_field,
    macro_block_averages,
    mix,
    project_back,
    reference_block_averages,
    relative_errors,
)
from mcsplit.upscale import upscale_all

MESH = build_hierarchy(40, 4)


def layered(mesh=MESH, contrast=1e3):
    return generate_field(FieldSpec("stripes", [1.0, contrast, 1.0], {"thickness": [2, 1, 2]}), mesh)


def continua(mesh=MESH):
    return continua_by_threshold(layered(mesh), [10.0], mesh)


def trajectory(times, snaps):
    return SimpleNamespace(at=lambda t: snaps[int(np.argmin(np.abs(np.asarray(times) - t)))])


def test_project_back_identity(rng):
    X = rng.standard_normal((5, 3 * 9))
    assert np.array_equal(project_back(X, np.eye(3)), X)


@given(st.integers(0, 10_000))
def test_mix_then_project_round_trip(seed):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(1, 5))
    v = rng.standard_normal((N, N)) + 3 * np.eye(N)
    v_hat = np.linalg.inv(v.T)  # v_hat^T v = I
    X = rng.standard_normal((4, N * 7))
    back = project_back(mix(X, v), v_hat)
    assert np.abs(back - X).max() <= 1e-10 * max(1.0, np.abs(X).max())


def test_project_back_dense_oracle(rng):
    N, n = 3, 6
    v_hat = rng.standard_normal((N, N)) + 2 * np.eye(N)
    Uh = rng.standard_normal(N * n)
    # U_hat = (v_hat kron I) U
    ref = np.linalg.solve(np.kron(v_hat, np.eye(n)), Uh)
    assert np.allclose(project_back(Uh, v_hat), ref, rtol=1e-12, atol=1e-12)
    with pytest.raises(ConfigurationError):
        project_back(rng.standard_normal(7), v_hat)


def fine_field(mesh, rng):
    u = np.zeros((mesh.fine_n + 1) ** 2)
    nn = mesh.fine_n + 1
    iy, ix = np.divmod(np.arange(nn * nn), nn)
    u[:] = np.sin(np.pi * ix / mesh.fine_n) * np.sin(np.pi * iy / mesh.fine_n) + 0.1 * rng.random(nn * nn)
    return u


def test_zero_reference_undefined_and_nonnegative(rng):
    cont = continua()
    U = rng.standard_normal(cont.N * 9)
    zero = np.zeros((MESH.fine_n + 1) ** 2)
    es = relative_errors([1.0, 2.0], [U, U], trajectory([1.0, 2.0], [zero, fine_field(MESH, rng)]), cont, MESH)
    assert np.all(np.isnan(es.errors[0]))
    assert np.all(es.errors[1] >= 0)


def _errors_from_averages(mac, ref):
    return np.sqrt(np.sum((mac - ref) ** 2, axis=1) / np.sum(ref**2, axis=1))


def test_relative_errors_exact_and_doubled():
    # kappa = 1 with one continuum: reference block average of a bilinear coarse
    # field interpolated to the fine grid equals the coarse Q1 block average
    mesh = build_hierarchy(20, 4)
    f = generate_field(FieldSpec("constant", [1.0]), mesh)
    cont = continua_by_threshold(f, [], mesh)
    rng = np.random.default_rng(3)
    U = rng.standard_normal(9)
    full = full_coarse_field(U, 4)[0]
    g = np.linspace(0, 1, 5)
    interp = RegularGridInterpolator((g, g), full.reshape(5, 5).T)  # coarse node id = j*5+i
    x = np.linspace(0, 1, 21)
    X, Y = np.meshgrid(x, x)
    u = interp(np.column_stack([X.ravel(), Y.ravel()]))
    ref = trajectory([0.5, 1.0], [u, u])
    es = relative_errors([0.5, 1.0], [U, 2 * U], ref, cont, mesh)
    assert np.allclose(es.errors[:, 0], [0.0, 1.0], atol=1e-13)


def test_hand_built_two_block_instance():
    # 2 x 2 blocks, two continua, one interior coarse node
    mesh = build_hierarchy(4, 2)
    f = generate_field(FieldSpec("stripes", [1.0, 10.0], {"thickness": [1, 1]}), mesh)
    cont = continua_by_threshold(f, [5.0], mesh)
    U = np.array([4.0, 8.0])  # centre node value per continuum
    # Q1 block average = centre value / 4 (one nonzero corner in each block)
    mac = macro_block_averages(U, 2)
    assert np.allclose(mac, [[1.0] * 4, [2.0] * 4])
    u = np.ones(25)
    ref_avg = reference_block_averages(u, cont, mesh)
    assert np.allclose(ref_avg, 1.0)
    es = relative_errors([1.0], [U], trajectory([1.0], [u]), cont, mesh)
    # e1 = sqrt(4 * 0^2 / 4) = 0, e2 = sqrt(4 * 1^2 / 4) = 1
    assert np.allclose(es.errors[0], [0.0, 1.0], atol=1e-14)


def test_errors_invariant_under_block_relabeling(rng):
    mac = rng.standard_normal((2, 16))
    ref = rng.standard_normal((2, 16))
    p = rng.permutation(16)
    assert np.allclose(_errors_from_averages(mac, ref), _errors_from_averages(mac[:, p], ref[:, p]), rtol=1e-14)


def test_error_series_csv(tmp_path):
    es = ErrorSeries(np.array([1e-5, 2e-5]), np.array([[0.1, np.nan], [0.2, 0.3]]), ("low", "high"))
    es.to_csv(tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "t,e1,e2"
    assert lines[1].endswith(",0.1,")
    assert np.all(np.diff(es.times) > 0)
    assert np.allclose(es.final(), [0.2, 0.3])


@pytest.fixture(scope="module")
def unit_bases():
    # kappa = 1 with the layered geometry's two characteristic continua
    geo = layered()
    cont = continua_by_threshold(geo, [10.0], MESH)
    unit = generate_field(FieldSpec("constant", [1.0]), MESH)
    res = upscale_all(MESH, unit, cont, default_layers(MESH.H))
    return cont, {b: r[0] for b, r in res.items()}


@pytest.fixture(scope="module")
def layered_bases():
    f = layered()
    cont = continua_by_threshold(f, [10.0], MESH)
    res = upscale_all(MESH, f, cont, default_layers(MESH.H))
    return cont, {b: r[0] for b, r in res.items()}


def test_downscale_constant(unit_bases):
    cont, bases = unit_bases
    U = np.full(cont.N * 9, 2.5)
    u = downscale(U, bases, MESH)
    nn = MESH.fine_n + 1
    iy, ix = np.divmod(np.arange(nn * nn), nn)
    lo, hi = MESH.fine_n // 4, 3 * MESH.fine_n // 4
    inner = (ix > lo) & (ix < hi) & (iy > lo) & (iy < hi)  # nodes of interior blocks only
    assert np.abs(u[inner] - 2.5).max() <= 1e-8


def test_downscale_zero(layered_bases):
    cont, bases = layered_bases
    for ev in ("center", "pointwise"):
        assert np.all(downscale(np.zeros(cont.N * 9), bases, MESH, ev) == 0)
    with pytest.raises(ConfigurationError):
        downscale(np.zeros(cont.N * 9), bases, MESH, "corner")


def test_downscale_smooth_block_averages():
    mesh = build_hierarchy(80, 8)
    f = layered(mesh)
    cont = continua_by_threshold(f, [10.0], mesh)
    bases = {b: r[0] for b, r in upscale_all(mesh, f, cont, default_layers(mesh.H)).items()}
    g = np.arange(1, 8) / 8
    X, Y = np.meshgrid(g, g)
    s = (np.sin(np.pi * X) * np.sin(np.pi * Y)).ravel()
    U = np.concatenate([s, 1.5 * s])
    u = downscale(U, bases, mesh)
    got = reference_block_averages(u, cont, mesh)
    want = macro_block_averages(U, 8)
    rel = np.linalg.norm(got - want, axis=1) / np.linalg.norm(want, axis=1)
    assert np.all(rel <= 0.05)
