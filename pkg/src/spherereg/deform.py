"""Positional encoding, Euler-angle rotation layer, warping and deformation upsampling."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from .interp import build_locator, locate_many
from .mesh import IcoSphere, SurfaceMesh, build_icosphere, cart_to_sph


def positional_encode(rho, theta, L: int = 4) -> np.ndarray:
    """Sinusoidal encoding of both normalised spherical coordinates.

    Each coordinate ``pos`` maps to ``(sin(2^0 pi pos), cos(2^0 pi pos), ...,
    sin(2^(L-1) pi pos), cos(2^(L-1) pi pos), pos)``; the two encodings are
    concatenated, so the trailing axis has length ``2 * (2L + 1)``.
    """
    rho = np.asarray(rho, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if np.any((rho < 0) | (rho > 1)) or np.any((theta < 0) | (theta > 1)):
        raise ValueError("spherical coordinates must be normalised to [0, 1]")
    if L < 0:
        raise ValueError("L must be >= 0")
    return np.concatenate([_eta(rho, L), _eta(theta, L)], axis=-1)


def _eta(pos: np.ndarray, L: int) -> np.ndarray:
    cols = []
    for k in range(L):
        arg = (2.0**k) * np.pi * pos
        cols += [np.sin(arg), np.cos(arg)]
    cols.append(pos)
    return np.stack(cols, axis=-1)


def encode_vertices(vertices, L: int = 4) -> np.ndarray:
    """(N, 2(2L+1)) positional features of unit vectors."""
    rho, theta = cart_to_sph(vertices)
    return positional_encode(rho, theta, L)


@dataclass(frozen=True, eq=False)
class EulerField:
    """Per-vertex (N, 3) or global (1, 3) rotation angles in radians."""

    angles: np.ndarray
    mesh_ref: str = ""

    def __post_init__(self):
        a = np.array(self.angles, dtype=np.float64)
        if a.ndim == 1:
            a = a[None, :]
        if a.ndim != 2 or a.shape[1] != 3:
            raise ValueError(f"Euler angles must be (N, 3), got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("Euler angles must be finite")
        if np.any(np.abs(a) >= np.pi):
            raise ValueError("Euler angles must satisfy |angle| < pi")
        a.setflags(write=False)
        object.__setattr__(self, "angles", a)

    @property
    def is_global(self) -> bool:
        return len(self.angles) == 1

    @classmethod
    def zeros(cls, mesh: SurfaceMesh) -> "EulerField":
        return cls(np.zeros((mesh.n_vertices, 3)), mesh.key)


@dataclass(frozen=True, eq=False)
class RotationTensor:
    matrices: np.ndarray  # (N, 3, 3) or (1, 3, 3)


def rotation_matrices(angles):
    """Rotation matrices for (..., 3) Euler angles (alpha, beta, gamma).

    Entries follow the printed Z-Y'-X'' matrix exactly; numpy or torch input.
    """
    if isinstance(angles, np.ndarray):
        sin, cos, stack = np.sin, np.cos, np.stack
    else:
        sin, cos, stack = torch.sin, torch.cos, torch.stack
    a, b, g = angles[..., 0], angles[..., 1], angles[..., 2]
    sa, ca, sb, cb, sg, cg = sin(a), cos(a), sin(b), cos(b), sin(g), cos(g)
    rows = [
        ca * cb, ca * sb * sg - cg * sa, sa * sg + ca * cg * sb,
        cb * sa, ca * cg + sa * sb * sg, cg * sa * sb - ca * sg,
        -sb, cb * sg, cb * cg,
    ]
    m = stack(rows, -1)
    return m.reshape(tuple(m.shape[:-1]) + (3, 3))


def rotation_to_euler(R):
    """Inverse of :func:`rotation_matrices` for |beta| < pi/2."""
    if isinstance(R, np.ndarray):
        atan2, asin, stack, clip = np.arctan2, np.arcsin, np.stack, np.clip
    else:
        atan2, asin, stack, clip = torch.atan2, torch.asin, torch.stack, torch.clamp
    alpha = atan2(R[..., 1, 0], R[..., 0, 0])
    beta = -asin(clip(R[..., 2, 0], -1.0, 1.0))
    gamma = atan2(R[..., 2, 1], R[..., 2, 2])
    return stack([alpha, beta, gamma], -1)


def euler_to_rotation(field: EulerField) -> RotationTensor:
    return RotationTensor(rotation_matrices(field.angles))


def warp_vertices(vertices, R):
    """Apply per-vertex (N, 3, 3) or global (1, 3, 3) rotations to (N, 3) points."""
    if isinstance(vertices, np.ndarray):
        return np.einsum("nij,nj->ni", np.broadcast_to(R, (len(vertices), 3, 3)), vertices)
    return torch.einsum("nij,nj->ni", R.expand(vertices.shape[0], 3, 3), vertices)


def warp(mesh: SurfaceMesh, rot: RotationTensor) -> SurfaceMesh:
    """Move vertex i to ``Phi_i v_i``; connectivity unchanged."""
    R = np.asarray(rot.matrices, dtype=np.float64)
    if R.ndim != 3 or R.shape[1:] != (3, 3):
        raise ValueError(f"rotation tensor must be (N, 3, 3), got {R.shape}")
    if len(R) not in (1, mesh.n_vertices):
        raise ValueError(f"{len(R)} rotations for a mesh of {mesh.n_vertices} vertices")
    return mesh.with_vertices(warp_vertices(mesh.vertices, R))


def upsample_euler(field: EulerField, target: IcoSphere) -> EulerField:
    """Barycentric upsampling of a per-vertex field from ico_(l-1) to ``target``.

    Euler components are interpolated independently. Coarse vertices are nested
    in the fine mesh and keep their angles exactly.
    """
    if target.level < 1:
        raise ValueError("target level must be >= 1")
    coarse = build_icosphere(target.level - 1).mesh
    if field.mesh_ref != coarse.key or len(field.angles) != coarse.n_vertices:
        raise ValueError(f"field does not live on ico_{target.level - 1}")
    fine = target.mesh
    out = np.empty((fine.n_vertices, 3))
    n0 = coarse.n_vertices
    out[:n0] = field.angles
    tri, w = _upsample_stencil(target.level)
    out[n0:] = (np.asarray(field.angles)[tri] * w[..., None]).sum(1)
    return EulerField(out, fine.key)


@lru_cache(maxsize=None)
def _upsample_stencil(level: int):
    """Coarse corners and barycentric weights of the vertices ico_level adds to ico_(level-1)."""
    coarse = build_icosphere(level - 1).mesh
    fine = build_icosphere(level).mesh
    faces, w, _ = locate_many(build_locator(coarse), fine.vertices[coarse.n_vertices:])
    tri = coarse.faces[faces]
    tri.setflags(write=False)
    w.setflags(write=False)
    return tri, w
