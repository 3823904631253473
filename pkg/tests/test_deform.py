import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spherereg.deform import (
    EulerField,
    RotationTensor,
    encode_vertices,
    euler_to_rotation,
    positional_encode,
    rotation_matrices,
    rotation_to_euler,
    upsample_euler,
    warp,
)
from spherereg.interp import resample_values
from spherereg.mesh import build_icosphere
from spherereg.synth import smooth_euler_field

angle = st.floats(-0.3, 0.3)
triples = arrays(np.float64, (3,), elements=angle)


def printed_matrix(a, b, g):
    """Entry-by-entry transcription used as an independent oracle."""
    ca, sa, cb, sb, cg, sg = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(g), np.sin(g)
    return np.array(
        [
            [ca * cb, ca * sb * sg - cg * sa, sa * sg + ca * cg * sb],
            [cb * sa, ca * cg + sa * sb * sg, cg * sa * sb - ca * sg],
            [-sb, cb * sg, cb * cg],
        ]
    )


def test_positional_encoding_examples():
    pe = positional_encode(np.array([0.0]), np.array([1.0]))
    assert pe.shape == (1, 18)
    assert np.allclose(pe[0, :9], [0, 1, 0, 1, 0, 1, 0, 1, 0], atol=1e-12)
    assert np.allclose(pe[0, 9:], [0, -1, 0, 1, 0, 1, 0, 1, 1], atol=1e-12)
    with pytest.raises(ValueError):
        positional_encode(np.array([1.2]), np.array([0.5]))
    assert encode_vertices(build_icosphere(2).mesh.vertices).shape == (162, 18)


def test_positional_encoding_injective_on_grid():
    g = np.arange(0, 1, 1e-3)
    rho, theta = np.meshgrid(g, g[:50])
    pe = positional_encode(rho.ravel(), theta.ravel())
    assert len(np.unique(pe.round(12), axis=0)) == pe.shape[0]


def test_rotation_examples():
    assert np.array_equal(rotation_matrices(np.zeros(3)), np.eye(3))
    R = rotation_matrices(np.array([np.pi / 2, 0, 0]))
    assert np.allclose(R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
    m = build_icosphere(0).mesh
    moved = warp(m, RotationTensor(R[None]))
    assert np.allclose(R @ np.array([1.0, 0, 0]), [0, 1, 0], atol=1e-15)
    assert np.allclose(moved.vertices, m.vertices @ R.T)


@given(triples)
def test_rotation_group_membership(a):
    R = rotation_matrices(a)
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-12
    assert abs(np.linalg.det(R) - 1) < 1e-12
    assert np.allclose(R, printed_matrix(*a), atol=1e-15)
    assert np.allclose(rotation_to_euler(R), a, atol=1e-12)


def test_torch_and_numpy_agree():
    a = np.random.default_rng(0).uniform(-0.3, 0.3, size=(20, 3))
    assert np.allclose(rotation_matrices(torch.from_numpy(a)).numpy(), rotation_matrices(a), atol=0)


@given(arrays(np.float64, (3,), elements=st.floats(-0.0099, 0.0099)))
def test_small_angle_bound(a):
    assert np.abs(rotation_matrices(a) - np.eye(3)).max() < 0.015


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_warp_preserves_norm(seed):
    m = build_icosphere(3).mesh
    a = np.random.default_rng(seed).uniform(-3.0, 3.0, size=(m.n_vertices, 3))
    moved = warp(m, euler_to_rotation(EulerField(a)))
    assert np.abs(np.linalg.norm(moved.vertices, axis=1) - 1).max() < 1e-12
    assert np.array_equal(moved.faces, m.faces)


def test_warp_rejects_wrong_count():
    m = build_icosphere(2).mesh
    with pytest.raises(ValueError):
        warp(m, RotationTensor(np.broadcast_to(np.eye(3), (5, 3, 3))))


def test_euler_field_validation():
    with pytest.raises(ValueError):
        EulerField(np.array([[0.0, 4.0, 0.0]]))
    with pytest.raises(ValueError):
        EulerField(np.array([[0.0, np.nan, 0.0]]))
    with pytest.raises(ValueError):
        EulerField(np.zeros((4, 2)))
    assert EulerField(np.zeros(3)).is_global


def test_upsample_examples():
    c, f = build_icosphere(3), build_icosphere(4)
    zero = upsample_euler(EulerField.zeros(c.mesh), f)
    assert np.array_equal(zero.angles, np.zeros((f.mesh.n_vertices, 3)))
    const = upsample_euler(EulerField(np.tile([0.1, -0.2, 0.05], (c.mesh.n_vertices, 1)), c.mesh.key), f)
    assert np.allclose(const.angles, [0.1, -0.2, 0.05], atol=1e-15)
    a = smooth_euler_field(c.mesh.vertices, np.random.default_rng(0), 0.2)
    up = upsample_euler(EulerField(a, c.mesh.key), f)
    n0 = c.mesh.n_vertices
    assert np.array_equal(up.angles[:n0], a)
    # new vertices lie on a coarse edge: the blend of its two parents
    pairs = np.asarray(f.parent_vertex_pairs)
    oracle = resample_values(c.mesh, a, f.mesh.vertices[n0:])
    assert np.abs(up.angles[n0:] - oracle).max() < 1e-9
    two_parent = 0.5 * (a[pairs[:, 0]] + a[pairs[:, 1]])
    assert np.abs(up.angles[n0:] - two_parent).max() < 1e-9
    with pytest.raises(ValueError):
        upsample_euler(EulerField(a, c.mesh.key), build_icosphere(5))
