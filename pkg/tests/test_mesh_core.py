import json

import numpy as np
import pytest

from helpers import random_mesh
from mesh_core import (
    JacobianField,
    MeshError,
    TriMesh,
    build_operators,
    compute_jacobians,
    cotan_weights,
    grid_mesh,
    jacobians_adjoint,
    load_mesh,
    save_mesh,
)


def test_rest_jacobians_are_identity(grid):
    ops = build_operators(grid)
    J = compute_jacobians(ops, grid.vertices).per_face
    assert np.allclose(J, np.eye(2), atol=1e-12)


def test_linear_map_is_recovered_exactly(rng):
    mesh = random_mesh(rng, 40)
    ops = build_operators(mesh)
    A = np.array([[1.3, -0.4], [0.2, 0.8]])
    J = compute_jacobians(ops, mesh.vertices @ A.T + [0.3, -0.1]).per_face
    assert np.allclose(J, A, atol=1e-10)


def test_laplacian_is_symmetric_psd_with_zero_row_sums(rng):
    mesh = random_mesh(rng, 30)
    ops = build_operators(mesh)
    L = ops.laplacian.toarray()
    assert np.allclose(L, L.T)
    assert np.abs(L.sum(axis=1)).max() < 1e-10
    assert np.linalg.eigvalsh(L).min() > -1e-10


def test_laplacian_equals_weighted_gradient_product(rng):
    mesh = random_mesh(rng, 25)
    ops = build_operators(mesh)
    G = ops.gradient.toarray()
    expected = G.T @ np.diag(np.repeat(ops.areas, 2)) @ G
    assert np.allclose(ops.laplacian.toarray(), expected, atol=1e-10)


def test_cotan_weights_of_right_isoceles_triangle():
    mesh = TriMesh([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [[0, 1, 2]], ())
    assert np.allclose(cotan_weights(mesh), [[0.0, 1.0, 1.0]])


def test_jacobians_adjoint_is_the_transpose(rng, grid):
    ops = build_operators(grid)
    V = rng.standard_normal(grid.vertices.shape)
    g = rng.standard_normal((grid.face_count, 2, 2))
    lhs = np.sum(compute_jacobians(ops, V).per_face * g)
    rhs = np.sum(V * jacobians_adjoint(ops, g))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_jacobian_field_arithmetic():
    a = JacobianField.identity(3)
    b = JacobianField.zeros(3) + a * 2.0
    assert np.array_equal((b - a).per_face, a.per_face)
    assert len(b) == 3


def test_grid_mesh_counts():
    mesh = grid_mesh(4, 3, keypoints=(0,))
    assert mesh.vertex_count == 12
    assert mesh.face_count == 2 * 3 * 2


@pytest.mark.parametrize("faces, message", [
    ([[0, 1, 5]], "out of range"),
    ([[0, 2, 1]], "counter-clockwise"),
    ([[0, 1, 1]], "degenerate"),
])
def test_invalid_faces_are_rejected(faces, message):
    with pytest.raises(MeshError, match=message):
        TriMesh([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], faces, ())


def test_duplicate_keypoint_rejected():
    with pytest.raises(MeshError, match="duplicate keypoint"):
        TriMesh([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [[0, 1, 2]], (1, 1))


def test_load_mesh_reports_missing_file(tmp_path):
    with pytest.raises(MeshError) as info:
        load_mesh(tmp_path / "nope.json")
    assert "nope.json" in str(info.value)
    assert info.value.exit_code == 2


def test_load_mesh_rejects_nan(tmp_path):
    path = tmp_path / "nan.json"
    path.write_text('{"vertices": [[0, 0], [1, 0], [NaN, 1]], "faces": [[0, 1, 2]], "keypoints": [0]}')
    with pytest.raises(MeshError, match="malformed JSON"):
        load_mesh(path)


def test_load_mesh_reports_missing_keys(tmp_path):
    path = tmp_path / "partial.json"
    path.write_text(json.dumps({"vertices": [[0, 0]]}))
    with pytest.raises(MeshError, match="faces, keypoints"):
        load_mesh(path)


def test_save_then_load(tmp_path, grid):
    path = tmp_path / "grid.json"
    save_mesh(grid, path)
    assert load_mesh(path) == grid


def test_jacobians_are_linear_in_positions(rng):
    mesh = random_mesh(rng, 40)
    ops = build_operators(mesh)
    V1, V2 = rng.standard_normal((2,) + mesh.vertices.shape)
    a, b = 0.7, -2.3
    lhs = compute_jacobians(ops, a * V1 + b * V2).per_face
    rhs = a * compute_jacobians(ops, V1).per_face + b * compute_jacobians(ops, V2).per_face
    assert np.abs(lhs - rhs).max() <= 1e-12 * max(1.0, np.abs(rhs).max())
