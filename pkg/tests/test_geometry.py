import numpy as np
import pytest

from shapecorr.geometry import (
    GeometryError,
    InvalidTopology,
    Mesh,
    NearestNeighborIndex,
    ParseError,
    PointCloud,
    bounding_box_center,
    build_nn_index,
    load_mesh,
    load_mesh_with_colors,
    normalize_shape,
    rotate_y,
    rotate_y_points,
    sample_surface,
    save_mesh,
)

TETRA_OBJ = """\
v 0 0 0
v 1 0 0
v 0 1 0
v 0 0 1
f 1 3 2
f 1 2 4
f 1 4 3
f 2 3 4
"""


def test_load_obj_tetrahedron(tmp_path):
    p = tmp_path / "t.obj"
    p.write_text(TETRA_OBJ)
    mesh = load_mesh(p)
    assert len(mesh.vertices) == 4
    assert len(mesh.faces) == 4
    assert len(mesh.edges) == 6


def test_obj_zero_index_rejected(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n")
    with pytest.raises(ParseError):
        load_mesh(p)


def test_obj_out_of_range_index(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
    with pytest.raises(InvalidTopology):
        load_mesh(p)


def test_degenerate_face_rejected():
    with pytest.raises(InvalidTopology):
        Mesh(np.eye(3), np.array([[0, 1, 1]]))


def test_zero_area_face_rejected(tmp_path):
    p = tmp_path / "flat.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n")
    with pytest.raises(InvalidTopology):
        load_mesh(p)


@pytest.mark.parametrize("fmt", ["obj", "ply"])
def test_save_load_round_trip(tmp_path, fmt, tetrahedron):
    rng = np.random.default_rng(0)
    verts = tetrahedron.vertices + rng.uniform(-0.3, 0.3, (4, 3))
    mesh = Mesh(verts, tetrahedron.faces)
    p = tmp_path / f"m.{fmt}"
    save_mesh(mesh, p)
    back = load_mesh(p)
    np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-6)
    np.testing.assert_array_equal(back.faces, mesh.faces)


def test_ply_color_round_trip(tmp_path, tetrahedron):
    colors = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [0.5, 0.5, 0.5]], float)
    p = tmp_path / "c.ply"
    save_mesh(tetrahedron, p, vertex_colors=colors)
    text = p.read_text()
    assert "property uchar red" in text
    back, got = load_mesh_with_colors(p)
    np.testing.assert_array_equal(back.faces, tetrahedron.faces)
    np.testing.assert_allclose(got / 255.0, colors, atol=1 / 255.0)


def test_color_count_mismatch(tmp_path, tetrahedron):
    with pytest.raises(GeometryError):
        save_mesh(tetrahedron, tmp_path / "x.ply", vertex_colors=np.zeros((3, 3)))


def test_sample_surface_right_triangle_centroid():
    mesh = Mesh(
        np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]),
        np.array([[0, 1, 2]]),
    )
    s = sample_surface(mesh, 100_000, "uniform_area", seed=1)
    assert np.abs(s.points.mean(axis=0) - [1 / 3, 1 / 3, 0]).max() < 0.01
    # every sample lies inside the triangle
    assert (s.barycentric >= -1e-12).all()
    assert np.abs(s.barycentric.sum(axis=1) - 1).max() < 1e-12


def test_sample_surface_area_weighting():
    # two coplanar triangles with areas 0.5 and 1.5
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 3, 0.0]])
    mesh = Mesh(verts, np.array([[0, 1, 2], [1, 3, 2]]))
    s = sample_surface(mesh, 100_000, "uniform_area", seed=2)
    frac = (s.face_indices == 1).mean()
    assert abs(frac - 0.75) < 0.01


def test_sample_surface_vertex_only(tetrahedron):
    s = sample_surface(tetrahedron, 4, "vertex_only")
    np.testing.assert_array_equal(s.points, tetrahedron.vertices)
    s6 = sample_surface(tetrahedron, 6, "vertex_only")
    np.testing.assert_array_equal(s6.points[4:], tetrahedron.vertices[:2])
    # provenance: each sample is a corner of its reported face
    for k in range(4):
        face = tetrahedron.faces[s.face_indices[k]]
        corner = int(np.argmax(s.barycentric[k]))
        assert face[corner] == k


def test_normalize_shape():
    cloud = PointCloud(np.array([[1.0, 1, 1], [3, 3, 3]]))
    out, t = normalize_shape(cloud)
    np.testing.assert_array_equal(out.points, [[-1, -1, -1], [1, 1, 1]])
    np.testing.assert_array_equal(t, [-2, -2, -2])


def test_normalize_centered_is_identity():
    cloud = PointCloud(np.array([[-1.0, 0, 2], [1, 0, -2]]))
    out, t = normalize_shape(cloud)
    np.testing.assert_array_equal(t, [0, 0, 0])
    np.testing.assert_array_equal(out.points, cloud.points)


def test_normalize_idempotent():
    rng = np.random.default_rng(4)
    cloud = PointCloud(rng.uniform(-5, 5, (50, 3)))
    once, _ = normalize_shape(cloud)
    twice, t2 = normalize_shape(once)
    assert np.linalg.norm(t2) < 1e-7
    assert np.linalg.norm(bounding_box_center(once.points)) < 1e-7


def test_rotate_y_convention():
    out = rotate_y(PointCloud(np.array([[1.0, 0, 0]])), np.pi / 2)
    np.testing.assert_allclose(out.points, [[0, 0, -1]], atol=1e-9)


def test_rotate_y_zero_identity():
    pts = np.random.default_rng(1).uniform(-1, 1, (10, 3))
    np.testing.assert_array_equal(rotate_y_points(pts, 0.0), pts)


def test_rotate_y_group_closure():
    pts = np.random.default_rng(2).uniform(-1, 1, (20, 3))
    out = pts
    for _ in range(50):
        out = rotate_y_points(out, 2 * np.pi / 50)
    np.testing.assert_allclose(out, pts, atol=1e-6)


def test_rotate_y_preserves_distances():
    pts = np.random.default_rng(3).uniform(-1, 1, (15, 3))
    rot = rotate_y_points(pts, 0.7)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    d1 = np.linalg.norm(rot[:, None] - rot[None], axis=2)
    assert np.abs(d0 - d1).max() < 1e-9 * max(1.0, d0.max())


def test_nn_index_simple():
    idx = build_nn_index(np.array([[0, 0, 0], [1, 0, 0.0]]))
    i, d2 = idx.query([0.4, 0, 0])
    assert i == 0
    assert abs(d2 - 0.16) < 1e-12


def test_nn_index_exact_point():
    pts = np.random.default_rng(5).uniform(-1, 1, (100, 3))
    idx = NearestNeighborIndex(pts)
    i, d2 = idx.query(pts[37])
    assert i == 37 and d2 == 0.0


def test_nn_index_matches_brute_force():
    rng = np.random.default_rng(6)
    pts = rng.uniform(-1, 1, (1000, 3))
    queries = rng.uniform(-1, 1, (100, 3))
    idx = NearestNeighborIndex(pts)
    for q in queries:
        d2 = ((pts - q) ** 2).sum(axis=1)
        want = int(np.argmin(d2))
        got, gd2 = idx.query(q)
        assert got == want
        assert abs(gd2 - d2[want]) < 1e-12


def test_nn_query_many_matches_query():
    rng = np.random.default_rng(7)
    pts = rng.uniform(-1, 1, (300, 3))
    queries = rng.uniform(-1, 1, (80, 3))
    idx = NearestNeighborIndex(pts)
    many_i, many_d = idx.query_many(queries)
    for k, q in enumerate(queries):
        i, d2 = idx.query(q)
        assert many_i[k] == i
        assert abs(many_d[k] - d2) < 1e-12


def test_nn_tie_breaks_lowest_index():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
    idx = NearestNeighborIndex(pts)
    i, _ = idx.query([0.0, 0.0, 0.0])
    assert i == 0


def test_empty_cloud_rejected():
    with pytest.raises(GeometryError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(GeometryError):
        NearestNeighborIndex(np.zeros((0, 3)))


def test_nonfinite_cloud_rejected():
    with pytest.raises(GeometryError):
        PointCloud(np.array([[np.nan, 0, 0]]))


# ----------------------------------------------------------------------
# property tests
# ----------------------------------------------------------------------

from hypothesis import given, settings
from hypothesis import strategies as st


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1), st.integers(min_value=1, max_value=200))
def test_nn_index_brute_force_property(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, (n, 3))
    q = rng.uniform(-1.5, 1.5, 3)
    idx = NearestNeighborIndex(pts)
    got_i, got_d2 = idx.query(q)
    d2 = ((pts - q) ** 2).sum(axis=1)
    best = d2.min()
    assert abs(got_d2 - best) < 1e-12
    # lowest index among all points at the minimum distance
    assert got_i == int(np.flatnonzero(np.abs(d2 - best) < 1e-15)[0])


@settings(max_examples=30, deadline=None)
@given(
    st.integers(min_value=0, max_value=2**31 - 1),
    st.floats(min_value=-10, max_value=10, allow_nan=False),
)
def test_rotate_y_norm_preserving_property(seed, angle):
    pts = np.random.default_rng(seed).uniform(-2, 2, (10, 3))
    rot = rotate_y_points(pts, angle)
    np.testing.assert_allclose(
        np.linalg.norm(rot, axis=1), np.linalg.norm(pts, axis=1), atol=1e-9
    )
    np.testing.assert_array_equal(rot[:, 1], pts[:, 1])
