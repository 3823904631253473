"""Triangulated unit spheres: icosphere hierarchy, adjacency and per-vertex data."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Sequence

import numpy as np

MAX_LEVEL = 7


def _cross(a, b):
    # works for numpy arrays and torch tensors alike
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    out = (ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx)
    if isinstance(a, np.ndarray):
        return np.stack(out, axis=-1)
    import torch

    return torch.stack(out, dim=-1)


def _norm(a):
    if isinstance(a, np.ndarray):
        return np.sqrt((a * a).sum(-1))
    return (a * a).sum(-1).sqrt()


def normalize(v: np.ndarray) -> np.ndarray:
    """Project rows of ``v`` onto the unit sphere."""
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """Closed genus-0 triangle mesh with vertices on (or near) the unit sphere.

    Faces are wound counter-clockwise seen from outside. Derived topology
    (edges, cyclic 1-rings, vertex-face incidence) is computed lazily and
    cached; the arrays themselves are never mutated.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be (N, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must be (T, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("degenerate face (repeated vertex index)")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def key(self) -> str:
        h = hashlib.sha1(self.vertices.tobytes())
        h.update(self.faces.tobytes())
        return h.hexdigest()[:16]

    @cached_property
    def edges(self) -> np.ndarray:
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e = np.unique(np.sort(e, axis=1), axis=0)
        e.setflags(write=False)
        return e

    @cached_property
    def _rings(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.n_vertices
        f = self.faces
        # (center, next, next-next) for every corner; CCW order around center
        c = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
        j = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
        k = np.concatenate([f[:, 2], f[:, 0], f[:, 1]])
        order = np.lexsort((j, c))
        c, j, k = c[order], j[order], k[order]
        counts = np.bincount(c, minlength=n)
        if np.any(counts == 0):
            raise ValueError("mesh has isolated vertices")
        keys = c * n + j
        if np.any(np.diff(keys) == 0):
            raise ValueError("non-manifold mesh: repeated directed edge")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        maxv = int(counts.max())
        ring = np.full((n, maxv), -1, dtype=np.int64)
        cur = starts.copy()
        for s in range(maxv):
            active = s < counts
            ring[active, s] = j[cur[active]]
            want = c[cur[active]] * n + k[cur[active]]
            pos = np.searchsorted(keys, want)
            pos = np.minimum(pos, len(keys) - 1)
            if np.any(keys[pos] != want):
                raise ValueError("mesh is not closed: 1-ring cannot be chained")
            cur[active] = pos
        # after a full cycle we must be back at the start slot
        if np.any(cur != starts):
            raise ValueError("mesh is not closed: 1-ring does not cycle")
        ring.setflags(write=False)
        counts.setflags(write=False)
        return ring, counts

    @property
    def ring_index(self) -> np.ndarray:
        """(N, max_valence) cyclically ordered neighbours, padded with -1."""
        return self._rings[0]

    @property
    def valence(self) -> np.ndarray:
        return self._rings[1]

    @cached_property
    def one_ring(self) -> tuple[np.ndarray, ...]:
        ring, counts = self._rings
        return tuple(ring[i, : counts[i]] for i in range(self.n_vertices))

    @cached_property
    def vertex_faces(self) -> np.ndarray:
        """(N, max_incident) incident face indices, ascending, padded with -1."""
        n = self.n_vertices
        fid = np.repeat(np.arange(self.n_faces), 3)
        vid = self.faces.reshape(-1)
        order = np.lexsort((fid, vid))
        vid, fid = vid[order], fid[order]
        counts = np.bincount(vid, minlength=n)
        width = max(int(counts.max()), 1)
        out = np.full((n, width), -1, dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        slot = np.arange(len(vid)) - starts[vid]
        out[vid, slot] = fid
        out.setflags(write=False)
        return out

    def with_vertices(self, vertices) -> "SurfaceMesh":
        """Same connectivity, new vertex positions."""
        return SurfaceMesh(np.asarray(vertices, dtype=np.float64), self.faces)

    def oriented_areas(self) -> np.ndarray:
        return oriented_areas(self.vertices, self.faces)


@dataclass(frozen=True, eq=False)
class IcoSphere:
    level: int
    mesh: SurfaceMesh
    parent_vertex_pairs: np.ndarray  # (V_l - V_{l-1}, 2); empty at level 0

    @property
    def n_coarse(self) -> int:
        """Number of vertices inherited from the previous level."""
        return self.mesh.n_vertices - len(self.parent_vertex_pairs)


def _base_icosahedron() -> tuple[np.ndarray, np.ndarray]:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    pts = []
    for a in (-1.0, 1.0):
        for b in (-phi, phi):
            pts += [(0.0, a, b), (a, b, 0.0), (b, 0.0, a)]
    pts = np.array(pts)
    pts = pts[np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))]
    verts = normalize(pts)
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    adj = np.isclose(d, 2.0)
    faces = []
    for i in range(12):
        for j in range(i + 1, 12):
            if not adj[i, j]:
                continue
            for k in range(j + 1, 12):
                if adj[i, k] and adj[j, k]:
                    tri = [i, j, k]
                    nrm = np.cross(verts[j] - verts[i], verts[k] - verts[i])
                    if nrm @ verts[[i, j, k]].sum(0) < 0:
                        tri = [i, k, j]
                    faces.append(tri)
    return verts, np.array(faces, dtype=np.int64)


def _subdivide(verts: np.ndarray, faces: np.ndarray):
    nv, nf = len(verts), len(faces)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    uniq, inv = np.unique(np.sort(e, axis=1), axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    mids = normalize(verts[uniq[:, 0]] + verts[uniq[:, 1]])
    new = nv + inv
    ab, bc, ca = new[:nf], new[nf : 2 * nf], new[2 * nf :]
    a, b, c = faces.T
    new_faces = np.concatenate(
        [
            np.stack([a, ab, ca], 1),
            np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1),
            np.stack([ab, bc, ca], 1),
        ]
    )
    return np.concatenate([verts, mids]), new_faces, uniq


@lru_cache(maxsize=None)
def build_icosphere(level: int) -> IcoSphere:
    """Regular icosahedron refined ``level`` times by edge-midpoint subdivision.

    Vertex ordering is nested: the first ``10 * 4**(level-1) + 2`` vertices are
    exactly those of the previous level.
    """
    if isinstance(level, bool) or not isinstance(level, (int, np.integer)):
        raise TypeError(f"level must be an integer, got {level!r}")
    if not 0 <= level <= MAX_LEVEL:
        raise ValueError(f"icosphere level must be in 0..{MAX_LEVEL}, got {level}")
    level = int(level)
    if level == 0:
        verts, faces = _base_icosahedron()
        parents = np.zeros((0, 2), dtype=np.int64)
    else:
        prev = build_icosphere(level - 1)
        verts, faces, parents = _subdivide(prev.mesh.vertices, prev.mesh.faces)
    parents.setflags(write=False)
    return IcoSphere(level, SurfaceMesh(verts, faces), parents)


def icosphere_counts(level: int) -> tuple[int, int, int]:
    """(vertices, edges, faces) of an icosphere at ``level``."""
    f = 20 * 4**level
    v = 10 * 4**level + 2
    return v, v + f - 2, f


def level_of(mesh: SurfaceMesh) -> int | None:
    """Icosphere level whose canonical mesh equals ``mesh``, else None."""
    for lvl in range(MAX_LEVEL + 1):
        v, _, f = icosphere_counts(lvl)
        if mesh.n_vertices == v and mesh.n_faces == f:
            ico = build_icosphere(lvl).mesh
            if ico is mesh or (
                np.array_equal(ico.faces, mesh.faces) and np.array_equal(ico.vertices, mesh.vertices)
            ):
                return lvl
            return None
    return None


def cart_to_sph(v) -> tuple[np.ndarray, np.ndarray]:
    """Normalised azimuth and polar angle, both in [0, 1].

    Works on a single 3-vector or on an (..., 3) array.
    """
    v = np.asarray(v, dtype=np.float64)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    rho = np.arctan2(y, x) / (2.0 * np.pi) + 0.5
    theta = np.arctan2(np.hypot(x, y), z) / np.pi
    return rho, theta


def sph_to_cart(rho, theta) -> np.ndarray:
    az = (np.asarray(rho, dtype=np.float64) - 0.5) * 2.0 * np.pi
    pol = np.asarray(theta, dtype=np.float64) * np.pi
    return np.stack([np.sin(pol) * np.cos(az), np.sin(pol) * np.sin(az), np.cos(pol)], axis=-1)


def oriented_areas(vertices, faces):
    """Signed face areas measured against the outward radial direction.

    ``(e_ij x e_ik) . n / 2`` with ``n`` the unit vector through the face
    centroid. Accepts numpy arrays or torch tensors for ``vertices``.
    """
    vi, vj, vk = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    cr = _cross(vj - vi, vk - vi)
    c = vi + vj + vk
    n = c / _norm(c)[..., None]
    return 0.5 * (cr * n).sum(-1)


def oriented_area(mesh: SurfaceMesh, t: int) -> float:
    return float(oriented_areas(mesh.vertices, mesh.faces[t : t + 1])[0])


def face_areas(vertices, faces):
    """Unsigned flat-triangle areas."""
    vi, vj, vk = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    return 0.5 * _norm(_cross(vj - vi, vk - vi))


def one_ring(mesh: SurfaceMesh, i: int) -> np.ndarray:
    return mesh.one_ring[i]


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Per-vertex feature channels attached to a mesh (by ``mesh_ref``)."""

    mesh_ref: str
    channels: tuple[str, ...]
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2:
            raise ValueError(f"feature values must be (N, C), got {vals.shape}")
        chans = tuple(self.channels)
        if len(chans) != vals.shape[1]:
            raise ValueError(f"{len(chans)} channel names for {vals.shape[1]} columns")
        if not np.all(np.isfinite(vals)):
            raise ValueError("feature values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "channels", chans)

    @classmethod
    def on(cls, mesh: SurfaceMesh, values, channels: Sequence[str] | None = None, normalized=False):
        vals = np.asarray(values, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[:, None]
        if len(vals) != mesh.n_vertices:
            raise ValueError(f"{len(vals)} feature rows for {mesh.n_vertices} vertices")
        if channels is None:
            channels = tuple(f"c{i}" for i in range(vals.shape[1]))
        return cls(mesh.key, tuple(channels), vals, normalized)

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def zscore(self) -> "FeatureMap":
        """Per-channel zero mean / unit standard deviation."""
        v = self.values
        sd = v.std(axis=0)
        if np.any(sd == 0):
            raise ValueError("cannot z-score a constant channel")
        z = (v - v.mean(axis=0)) / sd
        return FeatureMap(self.mesh_ref, self.channels, z, True)

    def attach(self, mesh: SurfaceMesh) -> "FeatureMap":
        """Same values re-attached to ``mesh`` (e.g. after a warp)."""
        if mesh.n_vertices != len(self.values):
            raise ValueError("vertex count mismatch")
        return FeatureMap(mesh.key, self.channels, self.values, self.normalized)


@dataclass(frozen=True, eq=False)
class ParcellationMap:
    """Hard labels (N,) or soft per-vertex probabilities (N, P)."""

    parcel_count: int
    labels: np.ndarray | None = None
    probs: np.ndarray | None = None

    def __post_init__(self):
        if (self.labels is None) == (self.probs is None):
            raise ValueError("give exactly one of labels / probs")
        if self.labels is not None:
            lab = np.array(self.labels, dtype=np.int64)
            if lab.ndim != 1:
                raise ValueError("labels must be 1-D")
            if lab.size and (lab.min() < 0 or lab.max() >= self.parcel_count):
                raise ValueError("label out of range")
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)
        else:
            p = np.array(self.probs, dtype=np.float64)
            if p.ndim != 2 or p.shape[1] != self.parcel_count:
                raise ValueError(f"probs must be (N, {self.parcel_count})")
            if np.any(p < -1e-12) or np.any(np.abs(p.sum(1) - 1.0) > 1e-6):
                raise ValueError("soft parcellation rows must be nonnegative and sum to 1")
            p.setflags(write=False)
            object.__setattr__(self, "probs", p)

    @property
    def n_vertices(self) -> int:
        return len(self.labels if self.labels is not None else self.probs)

    @property
    def is_soft(self) -> bool:
        return self.probs is not None

    def soft(self) -> np.ndarray:
        if self.probs is not None:
            return self.probs
        out = np.zeros((len(self.labels), self.parcel_count))
        out[np.arange(len(self.labels)), self.labels] = 1.0
        return out

    def hard(self) -> np.ndarray:
        if self.labels is not None:
            return self.labels
        return np.argmax(self.probs, axis=1)

    def to_soft(self) -> "ParcellationMap":
        return ParcellationMap(self.parcel_count, probs=self.soft())


def mean_edge_length(mesh: SurfaceMesh) -> float:
    e = mesh.edges
    return float(np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1).mean())
