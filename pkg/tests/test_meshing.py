import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idr.meshing import (TriangleMesh, chamfer_l1, empty_mesh, marching_cubes, mesh_from_grid, psnr, read_obj,
                         read_ply, sample_grid, sample_mesh_points, write_obj, write_ply)
from idr.synth import Sphere, Torus


def sphere(r):
    return lambda x: np.linalg.norm(x, axis=1) - r


@pytest.fixture(scope="module")
def sphere_mesh():
    return marching_cubes(sphere(0.5), 64)


def test_sphere_vertices_near_surface(sphere_mesh):
    diag = math.sqrt(3) * 2 / 63
    assert np.max(np.abs(np.linalg.norm(sphere_mesh.vertices, axis=1) - 0.5)) < 2 * diag


def test_constant_field_gives_empty_mesh():
    assert marching_cubes(lambda x: np.ones(len(x)), 16).is_empty


def test_sphere_mesh_is_closed(sphere_mesh):
    edges = Counter()
    for a, b, c in sphere_mesh.triangles:
        for e in ((a, b), (b, c), (c, a)):
            edges[tuple(sorted(e))] += 1
    assert set(edges.values()) == {2}


def test_no_degenerate_triangles(sphere_mesh):
    assert np.min(sphere_mesh.areas()) > 1e-12


def test_vertices_lie_on_sign_changing_grid_edges():
    f = lambda x: np.linalg.norm(x - np.array([0.05, -0.1, 0.02]), axis=1) - 0.55  # noqa: E731
    vals, axis = sample_grid(f, 20)
    mesh = mesh_from_grid(vals, axis)
    h = axis[1] - axis[0]
    for v in mesh.vertices:
        k = (v - axis[0]) / h
        frac = np.abs(k - np.round(k))
        on = frac < 1e-5  # vertex positions come back in single precision
        assert on.sum() >= 2
        ax = int(np.argmin(on))
        lo = np.round(k).astype(int)
        lo[ax] = int(np.floor(k[ax]))
        hi = lo.copy()
        hi[ax] += 1
        assert np.sign(vals[tuple(lo)]) != np.sign(vals[tuple(hi)])


def test_grid_resolution_precondition():
    with pytest.raises(ValueError):
        marching_cubes(sphere(0.5), 1)


def test_chamfer_examples():
    a = np.random.default_rng(0).normal(size=(20, 3))
    assert chamfer_l1(a, a) == (0.0, 0.0, 0.0)
    assert chamfer_l1(np.zeros((1, 3)), np.array([[1.0, 0, 0]])) == (1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        chamfer_l1(np.zeros((0, 3)), a)


def test_chamfer_brute_force_oracle(rng):
    a = rng.normal(size=(40, 3))
    b = rng.normal(size=(55, 3))
    d = np.linalg.norm(a[:, None] - b[None], axis=2)
    acc, comp, ch = chamfer_l1(a, b)
    assert acc == pytest.approx(d.min(axis=1).mean(), abs=1e-14)
    assert comp == pytest.approx(d.min(axis=0).mean(), abs=1e-14)
    assert ch == pytest.approx(0.5 * (acc + comp), abs=1e-15)
    acc2, comp2, ch2 = chamfer_l1(b, a)
    assert (acc2, comp2) == (comp, acc) and ch2 == ch


def test_marching_cubes_sphere_chamfer_below_cell_size(sphere_mesh):
    rng = np.random.default_rng(3)
    g = rng.normal(size=(20000, 3))
    ref = 0.5 * g / np.linalg.norm(g, axis=1, keepdims=True)
    _, _, ch = chamfer_l1(sample_mesh_points(sphere_mesh, 20000, seed=1), ref)
    assert ch < 2 / 63


def test_sample_counts_and_determinism(sphere_mesh):
    assert sample_mesh_points(sphere_mesh, 0).shape == (0, 3)
    a = sample_mesh_points(sphere_mesh, 100, seed=4)
    assert np.array_equal(a, sample_mesh_points(sphere_mesh, 100, seed=4))


def test_samples_inside_single_triangle():
    tri = TriangleMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))
    p = sample_mesh_points(tri, 500, seed=0)
    assert np.all(p[:, 0] >= 0) and np.all(p[:, 1] >= 0) and np.all(p.sum(axis=1) <= 1 + 1e-12)
    assert np.all(p[:, 2] == 0)


def test_sphere_samples_at_radius(sphere_mesh):
    p = sample_mesh_points(sphere_mesh, 5000, seed=0)
    assert np.mean(np.linalg.norm(p, axis=1)) == pytest.approx(0.5, rel=0.01)


def test_samples_are_area_weighted():
    # two triangles, the second four times larger
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [10, 0, 0], [12, 0, 0], [10, 2, 0]])
    m = TriangleMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))
    p = sample_mesh_points(m, 20000, seed=2)
    assert np.mean(p[:, 0] > 5) == pytest.approx(0.8, abs=0.02)


def test_mesh_index_validation():
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((2, 3)), np.array([[0, 1, 2]]))


def test_psnr_examples(rng):
    a = rng.uniform(0.2, 0.8, size=(8, 8, 3))
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:6, 1:7] = True
    assert psnr(a, a, mask) == 99.0
    assert psnr(a, a + 0.1, mask) == pytest.approx(20.0, abs=1e-9)
    b = a.copy()
    b[~mask] = 0.0
    assert psnr(a, b, mask) == 99.0
    c = a + 0.1
    c[~mask] = 1.0
    assert psnr(a, c, mask) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ValueError):
        psnr(a, a, np.zeros((8, 8), dtype=bool))


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 0.4), st.floats(1e-3, 0.4))
def test_psnr_decreases_with_error(e1, e2):
    a = np.full((4, 4, 3), 0.5)
    p1, p2 = psnr(a, a + e1), psnr(a, a + e2)
    if e1 < e2:
        assert p1 > p2
    elif e1 > e2:
        assert p1 < p2


@pytest.mark.parametrize("writer,reader,name", [(write_obj, read_obj, "m.obj"), (write_ply, read_ply, "m.ply")])
def test_mesh_export_round_trip(tmp_path, writer, reader, name):
    mesh = marching_cubes(lambda x: Torus(0.5, 0.2).eval(x)[0], 24)
    back = reader(writer(tmp_path / name, mesh))
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.triangles, mesh.triangles)


def test_obj_is_one_based(tmp_path):
    tri = TriangleMesh(np.eye(3), np.array([[0, 1, 2]]))
    text = write_obj(tmp_path / "t.obj", tri).read_text()
    assert "f 1 2 3" in text
    empty = read_obj(write_obj(tmp_path / "e.obj", empty_mesh()))
    assert empty.is_empty


def test_marching_cubes_on_analytic_sphere_class():
    m = marching_cubes(lambda x: Sphere(0.6).eval(x)[0], 32)
    assert not m.is_empty
