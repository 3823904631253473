"""Containing-face search and barycentric interpolation on sphere meshes.

Candidate faces for a query direction are the faces incident to its ``kappa``
nearest mesh vertices (exact KNN). Each candidate is tested by intersecting the
query ray with the face plane and checking the three edge-side products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import FeatureMap, SurfaceMesh, _cross, _norm

CONTAIN_TOL = 1e-12
PARALLEL_TOL = 1e-12
INTERIOR_MARGIN = 1e-9
SNAP_TOL = 1e-14
_CHUNK = 2048


@dataclass(frozen=True, eq=False)
class FaceLocator:
    mesh: SurfaceMesh
    knn_index: cKDTree
    vertex_faces: np.ndarray
    normals: np.ndarray
    kappa: int = 8
    # per-face inverse of the corner matrix [v1 v2 v3]; None if some face plane meets the origin
    corner_inverse: np.ndarray | None = None
    # n . v1 per face, so that n . q = offset * sum(corner_inverse @ q)
    plane_offset: np.ndarray | None = None

    @property
    def mesh_ref(self) -> str:
        return self.mesh.key


@dataclass(frozen=True)
class BarycentricHit:
    face: int
    weights: np.ndarray
    intersect: np.ndarray
    corners: tuple[int, int, int]
    mesh_ref: str


def face_normals(vertices, faces):
    """Unit normals from the winding, ``(v2 - v1) x (v3 - v1)`` normalised."""
    v1, v2, v3 = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    n = _cross(v2 - v1, v3 - v1)
    return n / _norm(n)[..., None]


def build_locator(mesh: SurfaceMesh, kappa: int = 8) -> FaceLocator:
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    vf = mesh.vertex_faces
    if np.any(vf[:, 0] < 0):
        raise ValueError("mesh has isolated vertices")
    kappa = min(int(kappa), mesh.n_vertices)
    C = np.transpose(mesh.vertices[mesh.faces], (0, 2, 1))
    inverse = np.linalg.inv(C) if np.abs(np.linalg.det(C)).min() > 1e-12 else None
    normals = face_normals(mesh.vertices, mesh.faces)
    offset = (normals * mesh.vertices[mesh.faces[:, 0]]).sum(-1)
    return FaceLocator(mesh, cKDTree(mesh.vertices), vf, normals, kappa, inverse, offset)


def plane_weights(q, v1, v2, v3, n):
    """Intersect rays ``q`` with face planes and return barycentric weights.

    Returns ``(weights, intersect, denom)``. Weights are the edge-side products
    ``<v_ij x v_i,p , v_ij x v_ik>`` divided by ``|v_ij x v_ik|^2``, which makes
    them the barycentric coordinates of the intersection point. Works on numpy
    arrays and torch tensors.
    """
    denom = (q * n).sum(-1)
    scale = (v1 * n).sum(-1) / denom
    p = scale[..., None] * q
    e12, e23, e31 = v2 - v1, v3 - v2, v1 - v3
    c_full = _cross(e12, v3 - v1)
    area2 = (c_full * c_full).sum(-1)
    # omega at vertex 1 measures the side of edge 12 -> weight of vertex 3, etc.
    om1 = (_cross(e12, p - v1) * c_full).sum(-1)
    om2 = (_cross(e23, p - v2) * _cross(e23, v1 - v2)).sum(-1)
    om3 = (_cross(e31, p - v3) * _cross(e31, v2 - v3)).sum(-1)
    w1, w2, w3 = om2 / area2, om3 / area2, om1 / area2
    if isinstance(q, np.ndarray):
        w = np.stack([w1, w2, w3], axis=-1)
    else:
        import torch

        w = torch.stack([w1, w2, w3], dim=-1)
    return w, p, denom


def candidate_faces(loc: FaceLocator, queries: np.ndarray, nn: np.ndarray | None = None) -> np.ndarray:
    """(Q, kappa * max_incident) candidate face ids, ascending, -1 padded."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if nn is None:
        _, nn = loc.knn_index.query(q, k=loc.kappa)
    nn = np.asarray(nn).reshape(len(q), -1)
    cand = loc.vertex_faces[nn].reshape(len(q), -1)
    return np.sort(cand, axis=1)


def _test_faces(loc: FaceLocator, q: np.ndarray, cand: np.ndarray):
    """First accepted candidate per query; each ``cand`` row must list faces in ascending order."""
    keep = cand >= 0
    f = np.where(keep, cand, 0)
    V = loc.mesh.vertices
    if loc.corner_inverse is not None:
        # barycentric coordinates of the ray hit are the corner-basis coordinates of q, normalised
        raw = np.einsum("qkij,qj->qki", loc.corner_inverse[f], q)
        total = raw.sum(-1)
        ok = keep & (total * loc.plane_offset[f] > PARALLEL_TOL)
        with np.errstate(invalid="ignore", divide="ignore"):
            ok &= np.all(raw / total[..., None] >= -CONTAIN_TOL, axis=-1)
    else:
        denom = np.einsum("qkj,qj->qk", loc.normals[f], q)
        ok = keep & (denom > PARALLEL_TOL)
        tri = loc.mesh.faces[f]
        w, _, _ = plane_weights(q[:, None, :], V[tri[..., 0]], V[tri[..., 1]], V[tri[..., 2]], loc.normals[f])
        with np.errstate(invalid="ignore"):
            ok &= np.all(w >= -CONTAIN_TOL, axis=-1)
    found = ok.any(axis=1)
    pick = f[np.arange(len(q)), np.argmax(ok, axis=1)]
    faces = np.where(found, pick, -1)
    tri = loc.mesh.faces[pick]
    w, p, _ = plane_weights(q, V[tri[:, 0]], V[tri[:, 1]], V[tri[:, 2]], loc.normals[pick])
    weights = np.where(found[:, None], w, 0.0)
    pts = np.where(found[:, None], p, 0.0)
    return found, faces, weights, pts


def _exhaustive(loc: FaceLocator, q: np.ndarray):
    allf = np.arange(loc.mesh.n_faces)
    faces = np.full(len(q), -1, dtype=np.int64)
    weights = np.zeros((len(q), 3))
    pts = np.zeros((len(q), 3))
    step = max(1, 200_000 // max(loc.mesh.n_faces, 1))
    for s in range(0, len(q), step):
        sl = slice(s, s + step)
        cand = np.broadcast_to(allf, (len(q[sl]), len(allf)))
        found, f, w, p = _test_faces(loc, q[sl], cand)
        faces[sl], weights[sl], pts[sl] = f, w, p
    return faces, weights, pts


def _locate_chunk(loc: FaceLocator, q: np.ndarray):
    _, nearest = loc.knn_index.query(q, k=1)
    # A query strictly inside a face of a valid mesh has no other containing
    # face, so the nearest vertex's faces settle it; the rest see all candidates.
    found, faces, weights, pts = _test_faces(loc, q, loc.vertex_faces[np.asarray(nearest).reshape(-1)])
    rest = ~(found & (weights.min(axis=1) > INTERIOR_MARGIN))
    if np.any(rest):
        _, f, w, p = _test_faces(loc, q[rest], candidate_faces(loc, q[rest]))
        faces[rest], weights[rest], pts[rest] = f, w, p
    return faces, weights, pts


def locate_many(loc: FaceLocator, queries, exhaustive: bool = False):
    """Containing face, barycentric weights and plane intersection per query.

    Returns ``(faces (Q,), weights (Q, 3), intersect (Q, 3))``. Queries no
    candidate accepts are retried against every face; if that fails too the
    mesh does not cover the sphere and ``LookupError`` is raised.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if exhaustive:
        faces, weights, pts = _exhaustive(loc, q)
    else:
        faces = np.full(len(q), -1, dtype=np.int64)
        weights = np.zeros((len(q), 3))
        pts = np.zeros((len(q), 3))
        for s in range(0, len(q), _CHUNK):
            sl = slice(s, s + _CHUNK)
            f, w, p = _locate_chunk(loc, q[sl])
            faces[sl], weights[sl], pts[sl] = f, w, p
        miss = faces < 0
        if np.any(miss):
            faces[miss], weights[miss], pts[miss] = _exhaustive(loc, q[miss])
    if np.any(faces < 0):
        raise LookupError(f"{int(np.sum(faces < 0))} queries not covered by any face")
    return faces, weights, pts


def locate(loc: FaceLocator, v_interp) -> BarycentricHit:
    f, w, p = locate_many(loc, np.asarray(v_interp, dtype=np.float64)[None, :])
    corners = tuple(int(i) for i in loc.mesh.faces[f[0]])
    return BarycentricHit(int(f[0]), w[0], p[0], corners, loc.mesh_ref)


def interpolate_values(mesh: SurfaceMesh, values, faces, weights):
    """Per-query weighted sum of the face corners' values; values is (N, C)."""
    tri = mesh.faces[faces]
    return (values[tri] * weights[..., None]).sum(-2)


def interpolate(features: FeatureMap, hit: BarycentricHit) -> np.ndarray:
    """Per-channel value of ``features`` at ``hit``."""
    if features.mesh_ref != hit.mesh_ref:
        raise ValueError("features do not belong to the located mesh")
    return hit.weights @ features.values[list(hit.corners)]


def resample(src_mesh: SurfaceMesh, src_features: FeatureMap, dst_mesh: SurfaceMesh,
             loc: FaceLocator | None = None) -> FeatureMap:
    """Barycentric resampling of ``src_features`` onto ``dst_mesh`` vertices."""
    if src_features.mesh_ref != src_mesh.key:
        raise ValueError("features do not belong to the source mesh")
    values = resample_values(src_mesh, src_features.values, dst_mesh.vertices, loc)
    return FeatureMap(dst_mesh.key, src_features.channels, values, False)


def resample_values(src_mesh: SurfaceMesh, values, points, loc: FaceLocator | None = None) -> np.ndarray:
    loc = loc or build_locator(src_mesh)
    pts = np.asarray(points, dtype=np.float64)
    pts = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    faces, weights, _ = locate_many(loc, pts)
    vals = np.asarray(values, dtype=np.float64)
    squeeze = vals.ndim == 1
    if squeeze:
        vals = vals[:, None]
    out = interpolate_values(src_mesh, vals, faces, weights)
    # queries sitting on a source vertex (up to normalisation rounding) copy its value
    dist, nearest = loc.knn_index.query(pts, k=1)
    exact = dist <= SNAP_TOL
    out[exact] = vals[nearest[exact]]
    return out[:, 0] if squeeze else out
