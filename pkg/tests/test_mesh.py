import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handface.mesh import (
    DegenerateGeometryError,
    MeshError,
    build_topology,
    dihedral_angle,
    dihedral_angle_gradients,
    dihedral_angles,
    scatter_add,
)
from handface.model import rodrigues
from handface.objio import format_obj, read_obj, write_obj
from handface.proxies import icosphere

from conftest import grid_mesh


def test_single_triangle_topology():
    m = build_topology(np.eye(3), [[0, 1, 2]])
    assert len(m.edges) == 3
    assert len(m.bend_pairs) == 0
    assert not m.is_closed


def test_coplanar_pair_has_straight_rest_angle():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    m = build_topology(v, [[0, 1, 2], [1, 3, 2]])
    assert len(m.bend_pairs) == 1
    assert m.rest_dihedral_angles[0] == pytest.approx(np.pi)


def test_icosahedron_counts():
    v, f = icosphere(0)
    m = build_topology(v, f)
    assert (m.n_vertices, len(m.edges), m.n_triangles) == (12, 30, 20)
    assert m.n_vertices - len(m.edges) + m.n_triangles == 2
    assert len(m.bend_pairs) == 30
    assert m.is_closed


def test_edges_sorted_and_deterministic():
    v, f = grid_mesh(5)
    a = build_topology(v, f)
    b = build_topology(v, f)
    assert np.array_equal(a.edges, b.edges)
    assert np.all(a.edges[:, 0] < a.edges[:, 1])
    order = np.lexsort((a.edges[:, 1], a.edges[:, 0]))
    assert np.array_equal(order, np.arange(len(a.edges)))


def test_invariants_on_sphere(unit_sphere):
    m = unit_sphere
    assert np.all(m.rest_edge_lengths > 0)
    assert np.all((m.rest_dihedral_angles >= 0) & (m.rest_dihedral_angles <= np.pi))
    assert len(m.bend_pairs) == np.count_nonzero(m.edge_face_count == 2)


@pytest.mark.parametrize(
    "tris, msg",
    [([[0, 1, 5]], "outside"), ([[0, 1, 1]], None), ([[0, 1, 2]], None)],
)
def test_rejections(tris, msg):
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)  # collinear: zero area
    with pytest.raises(MeshError) as exc:
        build_topology(v, tris)
    if msg:
        assert msg in str(exc.value)


def test_degenerate_triangle_reports_index():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]], dtype=float)
    with pytest.raises(MeshError, match="1"):
        build_topology(v, [[0, 1, 2], [0, 1, 3]])


def test_dihedral_examples():
    p1, p2 = np.zeros(3), np.array([1.0, 0, 0])
    assert dihedral_angle(p1, p2, [0, 1, 0], [0, -1, 0]) == pytest.approx(np.pi)
    assert dihedral_angle(p1, p2, [0, 1, 0], [0, 1, 0]) == pytest.approx(0.0)
    assert dihedral_angle(p1, p2, [0, 1, 0], [0, 0, 1]) == pytest.approx(np.pi / 2)
    with pytest.raises(DegenerateGeometryError):
        dihedral_angle(p1, p2, [2, 0, 0], [0, 1, 0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_dihedral_rigid_invariance(seed):
    r = np.random.default_rng(seed)
    P = r.normal(size=(4, 3))
    R = rodrigues(r.normal(size=3))
    t = r.normal(size=3)
    Q = P @ R.T + t
    assert dihedral_angle(*Q) == pytest.approx(dihedral_angle(*P), abs=1e-9)


def test_dihedral_gradients_match_finite_differences(rng):
    P = rng.normal(size=(4, 3))
    pairs = np.array([[0, 1, 2, 3]])
    ang, g = dihedral_angle_gradients(P, pairs)
    assert ang[0] == pytest.approx(dihedral_angles(P, pairs)[0][0])
    eps = 1e-6
    fd = np.zeros((4, 3))
    for i in range(4):
        for k in range(3):
            Pp, Pm = P.copy(), P.copy()
            Pp[i, k] += eps
            Pm[i, k] -= eps
            fd[i, k] = (dihedral_angles(Pp, pairs)[0][0] - dihedral_angles(Pm, pairs)[0][0]) / (2 * eps)
    assert np.allclose(g[0], fd, atol=1e-7)


def test_scatter_add_matches_add_at(rng):
    idx = rng.integers(0, 7, 50)
    vals = rng.normal(size=(50, 3))
    a = np.zeros((7, 3))
    np.add.at(a, idx, vals)
    b = scatter_add(np.zeros((7, 3)), idx, vals)
    assert np.allclose(a, b, atol=1e-14)


def test_obj_round_trip(tmp_path, rng):
    v, f = icosphere(1)
    v = v + rng.normal(scale=1e-3, size=v.shape)
    write_obj(tmp_path / "m.obj", v, f)
    v2, f2, c = read_obj(tmp_path / "m.obj")
    assert np.array_equal(f2, f) and c is None
    assert np.allclose(v2, v, atol=1e-9)


def test_obj_colors_and_quads(tmp_path):
    text = format_obj(np.eye(3), [[0, 1, 2]], colors=np.full((3, 3), 0.5))
    (tmp_path / "c.obj").write_text(text)
    _, _, c = read_obj(tmp_path / "c.obj")
    assert np.allclose(c, 0.5)
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(MeshError, match="triangles"):
        read_obj(tmp_path / "q.obj")


def test_obj_negative_indices(tmp_path):
    (tmp_path / "n.obj").write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n")
    _, f, _ = read_obj(tmp_path / "n.obj")
    assert f.tolist() == [[0, 1, 2]]
