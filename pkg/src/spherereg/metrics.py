"""Post-hoc evaluation: per-face distortion, folds and alignment accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import FeatureMap, ParcellationMap, SurfaceMesh, oriented_areas


@dataclass(frozen=True)
class FaceDeformation:
    matrix: np.ndarray  # (2, 2)
    singulars: tuple[float, float]

    @property
    def J(self) -> float:
        return self.singulars[0] * self.singulars[1]

    @property
    def R(self) -> float:
        return self.singulars[0] / self.singulars[1]


def _local_edges(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """(T, 2, 2) edge vectors e1, e2 (as columns) in an orthonormal frame of each face plane."""
    v0 = vertices[faces[:, 0]]
    e1 = vertices[faces[:, 1]] - v0
    e2 = vertices[faces[:, 2]] - v0
    n = np.cross(e1, e2)
    nn = np.linalg.norm(n, axis=1)
    l1 = np.linalg.norm(e1, axis=1)
    if np.any(nn < 1e-300) or np.any(l1 < 1e-300):
        raise ValueError("degenerate face")
    u1 = e1 / l1[:, None]
    u2 = np.cross(n / nn[:, None], u1)
    E = np.empty((len(faces), 2, 2))
    E[:, 0, 0] = l1
    E[:, 1, 0] = 0.0
    E[:, 0, 1] = (e2 * u1).sum(1)
    E[:, 1, 1] = (e2 * u2).sum(1)
    return E


def deformation_matrices(mesh0: SurfaceMesh, mesh1) -> np.ndarray:
    """(T, 2, 2) maps D with ``D @ E0 = E1`` per face."""
    V1 = mesh1.vertices if isinstance(mesh1, SurfaceMesh) else np.asarray(mesh1, dtype=np.float64)
    E0 = _local_edges(mesh0.vertices, mesh0.faces)
    E1 = _local_edges(V1, mesh0.faces)
    return E1 @ np.linalg.inv(E0)


def face_deformation(mesh0: SurfaceMesh, mesh1, t: int) -> FaceDeformation:
    V1 = mesh1.vertices if isinstance(mesh1, SurfaceMesh) else np.asarray(mesh1, dtype=np.float64)
    sub = SurfaceMesh(mesh0.vertices, mesh0.faces[t : t + 1])
    D = deformation_matrices(sub, V1)[0]
    s = np.linalg.svd(D, compute_uv=False)
    return FaceDeformation(D, (float(s[0]), float(s[1])))


@dataclass
class DistortionReport:
    areal: np.ndarray  # per face |log2 J|
    shape: np.ndarray  # per face log2 R
    edge: np.ndarray  # per edge |log2 L2/L1|
    fold_count: int
    vertex_areal: np.ndarray
    vertex_shape: np.ndarray

    @property
    def areal_mean(self) -> float:
        return float(self.areal.mean())

    @property
    def shape_mean(self) -> float:
        return float(self.shape.mean())

    @property
    def edge_mean(self) -> float:
        return float(self.edge.mean())

    def summary(self) -> dict[str, float]:
        return {
            "areal_distortion": self.areal_mean,
            "shape_distortion": self.shape_mean,
            "edge_distortion": self.edge_mean,
            "fold_count": self.fold_count,
        }


def fold_count(mesh0: SurfaceMesh, mesh1) -> int:
    """Faces whose oriented area is non-positive after deformation."""
    V1 = mesh1.vertices if isinstance(mesh1, SurfaceMesh) else np.asarray(mesh1, dtype=np.float64)
    return int(np.sum(oriented_areas(V1, mesh0.faces) <= 0))


def _per_vertex(mesh: SurfaceMesh, face_vals: np.ndarray) -> np.ndarray:
    acc = np.zeros(mesh.n_vertices)
    np.add.at(acc, mesh.faces.reshape(-1), np.repeat(face_vals, 3))
    cnt = np.bincount(mesh.faces.reshape(-1), minlength=mesh.n_vertices)
    return acc / np.maximum(cnt, 1)


def distortion_report(mesh0: SurfaceMesh, mesh1) -> DistortionReport:
    V1 = mesh1.vertices if isinstance(mesh1, SurfaceMesh) else np.asarray(mesh1, dtype=np.float64)
    if V1.shape != mesh0.vertices.shape:
        raise ValueError("meshes must share connectivity")
    s = np.linalg.svd(deformation_matrices(mesh0, V1), compute_uv=False)
    areal = np.abs(np.log2(s[:, 0] * s[:, 1]))
    shape = np.log2(s[:, 0] / s[:, 1])
    e = mesh0.edges
    L1 = np.linalg.norm(mesh0.vertices[e[:, 0]] - mesh0.vertices[e[:, 1]], axis=1)
    L2 = np.linalg.norm(V1[e[:, 0]] - V1[e[:, 1]], axis=1)
    edge = np.abs(np.log2(L2 / L1))
    return DistortionReport(
        areal=areal,
        shape=shape,
        edge=edge,
        fold_count=fold_count(mesh0, V1),
        vertex_areal=_per_vertex(mesh0, areal),
        vertex_shape=_per_vertex(mesh0, shape),
    )


def _channel(a, channel: int = 0) -> np.ndarray:
    if isinstance(a, FeatureMap):
        return a.values[:, channel]
    a = np.asarray(a, dtype=np.float64)
    return a[:, channel] if a.ndim == 2 else a


def ncc(a, b, channel: int = 0) -> float:
    """Pearson correlation over vertices."""
    x, y = _channel(a, channel), _channel(b, channel)
    if x.shape != y.shape:
        raise ValueError("maps must have the same length")
    x = x - x.mean()
    y = y - y.mean()
    sx, sy = np.sqrt((x * x).sum()), np.sqrt((y * y).sum())
    if sx == 0 or sy == 0:
        raise ValueError("correlation undefined for a zero-variance map")
    return float(np.clip((x * y).sum() / (sx * sy), -1.0, 1.0))


def mae(a, b, channel: int = 0) -> float:
    x, y = _channel(a, channel), _channel(b, channel)
    if x.shape != y.shape:
        raise ValueError("maps must have the same length")
    return float(np.abs(x - y).mean())


def dice_hard(a, b) -> tuple[np.ndarray, float]:
    """Set-form Dice per parcel, plus the mean over parcels present in either map.

    Parcels absent from both maps are reported as NaN.
    """
    la = a.hard() if isinstance(a, ParcellationMap) else np.asarray(a)
    lb = b.hard() if isinstance(b, ParcellationMap) else np.asarray(b)
    if la.shape != lb.shape:
        raise ValueError("parcellations must have the same length")
    P = max(
        a.parcel_count if isinstance(a, ParcellationMap) else int(la.max()) + 1,
        b.parcel_count if isinstance(b, ParcellationMap) else int(lb.max()) + 1,
    )
    inter = np.bincount(la[la == lb], minlength=P).astype(np.float64)
    size = np.bincount(la, minlength=P) + np.bincount(lb, minlength=P)
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(size > 0, 2.0 * inter / size, np.nan)
    return d, float(np.nanmean(d))


def icc(sessions, channel: int = 0) -> np.ndarray:
    """Vertex-wise one-way random-effects ICC(1,1).

    ``sessions[s][k]`` is subject ``s``'s session ``k`` (FeatureMap or array);
    every subject needs the same number of sessions.
    """
    if len(sessions) < 2:
        raise ValueError("ICC needs at least 2 subjects")
    k = len(sessions[0])
    if k < 2 or any(len(s) != k for s in sessions):
        raise ValueError("ICC needs at least 2 sessions per subject, equal across subjects")
    X = np.stack([np.stack([_channel(m, channel) for m in subj]) for subj in sessions])  # (n, k, V)
    n = X.shape[0]
    subj_mean = X.mean(axis=1)
    grand = subj_mean.mean(axis=0)
    ms_between = k * ((subj_mean - grand) ** 2).sum(axis=0) / (n - 1)
    ms_within = ((X - subj_mean[:, None, :]) ** 2).sum(axis=(0, 1)) / (n * (k - 1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return (ms_between - ms_within) / (ms_between + (k - 1) * ms_within)
