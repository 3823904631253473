"""Registration objectives: similarity, distortion, fold and parcellation terms.

All terms are differentiable torch expressions in float64 so gradients with
respect to Euler angles (or network parameters) come from autograd. Face
assignment of interpolation queries is located outside the graph and held
fixed during differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from functools import cached_property
import numpy as np
import torch

from .deform import EulerField, rotation_matrices, warp_vertices
from .interp import FaceLocator, locate_many, plane_weights
from .mesh import FeatureMap, ParcellationMap, SurfaceMesh, _cross, _norm, face_areas, oriented_areas

DTYPE = torch.float64
LEVELS = (3, 4, 5, 6)
COMPONENTS = ("sim", "areal", "angle", "dist", "fold", "parc")


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.from_numpy(np.array(x, dtype=np.float64))


def _idx(x) -> torch.Tensor:
    return torch.from_numpy(np.array(x, dtype=np.int64))


def _verts(m) -> torch.Tensor:
    return _t(m.vertices if isinstance(m, SurfaceMesh) else m)


@dataclass(frozen=True)
class LossWeights:
    """Per-level loss weights for ico_3 .. ico_6."""

    sim: tuple[float, ...] = (1.0, 1.0, 1.0, 1.5)
    areal: tuple[float, ...] = (1.5, 1.5, 1.5, 1.5)
    angle: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    dist: tuple[float, ...] = (2.0, 2.0, 2.0, 2.0)
    fold: tuple[float, ...] = (30.0, 30.0, 35.0, 35.0)
    parc: tuple[float, ...] = (4.0, 4.0, 4.0, 4.0)
    levels: tuple[int, ...] = LEVELS

    def __post_init__(self):
        for name in COMPONENTS:
            vals = tuple(float(x) for x in getattr(self, name))
            if len(vals) != len(self.levels):
                raise ValueError(f"lambda_{name} needs one weight per level {self.levels}")
            if any(v < 0 or not np.isfinite(v) for v in vals):
                raise ValueError(f"lambda_{name} must be finite and >= 0")
            object.__setattr__(self, name, vals)
        object.__setattr__(self, "levels", tuple(int(x) for x in self.levels))

    def at(self, level: int) -> dict[str, float]:
        if level not in self.levels:
            raise KeyError(f"no weights for ico_{level}")
        i = self.levels.index(level)
        return {name: getattr(self, name)[i] for name in COMPONENTS}

    def fold_has_priority(self) -> bool:
        """True when the fold weight exceeds every other weight at every level."""
        return all(
            self.fold[i] > max(getattr(self, n)[i] for n in COMPONENTS if n != "fold")
            for i in range(len(self.levels))
        )

    def replace(self, **kw) -> "LossWeights":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        for k, v in kw.items():
            vals[k] = tuple(v) if np.ndim(v) else (float(v),) * len(self.levels)
        return LossWeights(**vals)


@dataclass
class LossBreakdown:
    sim: float = 0.0
    areal: float = 0.0
    angle: float = 0.0
    dist: float = 0.0
    fold: float = 0.0
    parc: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# geometry helpers


def corner_angles(vertices, faces) -> torch.Tensor:
    """(T, 3) interior angles of flat triangles, corner order as in ``faces``."""
    V = _t(vertices)
    f = _idx(faces)
    out = []
    for a, b, c in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        u = V[f[:, b]] - V[f[:, a]]
        w = V[f[:, c]] - V[f[:, a]]
        out.append(torch.atan2(_norm(_cross(u, w)), (u * w).sum(-1)))
    return torch.stack(out, -1)


def ring_offsets(vertices, ring: np.ndarray, valence: np.ndarray) -> torch.Tensor:
    """Distance from each vertex to the arithmetic mean of its 1-ring."""
    V = _t(vertices)
    idx = _idx(np.where(ring >= 0, ring, 0))
    mask = _t(ring >= 0)
    bary = (V[idx] * mask[..., None]).sum(1) / _t(valence)[:, None]
    return _norm(V - bary)


class Reference:
    """Undeformed-mesh quantities shared by every distortion evaluation."""

    def __init__(self, mesh0: SurfaceMesh):
        self.mesh = mesh0
        self.faces = _idx(mesh0.faces)
        V0 = _t(mesh0.vertices)
        self.area0 = face_areas(V0, self.faces)
        self.angle0 = corner_angles(V0, mesh0.faces)
        self.delta0 = oriented_areas(V0, self.faces)

    # ring quantities need a closed mesh; only the distance term asks for them
    @cached_property
    def ring(self) -> np.ndarray:
        return self.mesh.ring_index

    @cached_property
    def valence(self) -> np.ndarray:
        return self.mesh.valence

    @cached_property
    def d0(self) -> torch.Tensor:
        return ring_offsets(self.mesh.vertices, self.ring, self.valence)

    @cached_property
    def eps(self) -> float:
        e = self.mesh.edges
        return float(np.linalg.norm(self.mesh.vertices[e[:, 0]] - self.mesh.vertices[e[:, 1]], axis=1).mean())

    def check_areas(self):
        if torch.any(self.area0 < 1e-15):
            raise ValueError("degenerate face in reference mesh (area < 1e-15)")

    def check_angles(self):
        if torch.any(self.angle0 < 1e-12):
            raise ValueError("degenerate corner in reference mesh (angle < 1e-12)")

    def check_orientation(self):
        if torch.any(self.delta0 <= 0):
            raise ValueError("reference mesh has non-positive oriented area")


def _ref(mesh0) -> Reference:
    return mesh0 if isinstance(mesh0, Reference) else Reference(mesh0)


def _areal(ref: Reference, V1) -> torch.Tensor:
    return torch.abs(1.0 - face_areas(V1, ref.faces) / ref.area0).mean()


def _angle(ref: Reference, V1) -> torch.Tensor:
    return torch.abs(1.0 - corner_angles(V1, ref.mesh.faces) / ref.angle0).mean()


def _dist_terms(ref: Reference, V1) -> torch.Tensor:
    return torch.abs(ring_offsets(V1, ref.ring, ref.valence) - ref.d0) / ref.eps


def _fold(ref: Reference, V1) -> torch.Tensor:
    delta = oriented_areas(V1, ref.faces)
    folded = torch.where(delta <= 0, delta, ref.delta0)
    return torch.abs(folded - ref.delta0).mean()


def areal_loss(mesh0, mesh1) -> torch.Tensor:
    """Mean over faces of ``|1 - A_t / A_t^0|`` (unsigned flat areas)."""
    ref = _ref(mesh0)
    ref.check_areas()
    return _areal(ref, _verts(mesh1))


def angular_loss(mesh0, mesh1) -> torch.Tensor:
    """Mean over all 3T corners of ``|1 - angle / angle^0|``."""
    ref = _ref(mesh0)
    ref.check_angles()
    return _angle(ref, _verts(mesh1))


def distance_terms(mesh0, mesh1) -> torch.Tensor:
    """Per-vertex change of the vertex-to-ring-mean distance, over the mean edge length."""
    return _dist_terms(_ref(mesh0), _verts(mesh1))


def distance_loss(mesh0, mesh1) -> torch.Tensor:
    return distance_terms(mesh0, mesh1).mean()


def fold_loss(mesh0, mesh1) -> torch.Tensor:
    """Mean over faces of ``|Delta_t - Delta_t^0|``, counting only faces with Delta_t <= 0."""
    ref = _ref(mesh0)
    ref.check_orientation()
    return _fold(ref, _verts(mesh1))


# ---------------------------------------------------------------------------
# similarity and parcellation


def _values(x) -> torch.Tensor:
    v = x.values if isinstance(x, FeatureMap) else x
    v = _t(v)
    return v[:, None] if v.ndim == 1 else v


def locate_faces(loc: FaceLocator, points) -> np.ndarray:
    """Containing faces for (detached) points; the frozen assignment for autograd."""
    p = points.detach().cpu().numpy() if isinstance(points, torch.Tensor) else np.asarray(points)
    faces, _, _ = locate_many(loc, p)
    return faces


def sample_at(loc: FaceLocator, values, points, faces: np.ndarray | None = None) -> torch.Tensor:
    """Differentiable barycentric sample of per-vertex ``values`` at ``points``.

    The containing faces are located once (or taken from ``faces``) and held
    fixed; the weights are then a smooth function of the points.
    """
    P = _t(points)
    if faces is None:
        faces = locate_faces(loc, P)
    tri = _idx(loc.mesh.faces[faces])
    V = _t(loc.mesh.vertices)
    n = _t(loc.normals[faces])
    w, _, _ = plane_weights(P, V[tri[:, 0]], V[tri[:, 1]], V[tri[:, 2]], n)
    vals = _values(values)
    return (vals[tri] * w[..., None]).sum(-2)


def sim_loss(moved_mesh, moving_features, fixed_locator: FaceLocator, fixed_features,
             faces: np.ndarray | None = None) -> torch.Tensor:
    """MSE between moving features and fixed features sampled at the moved vertices."""
    if isinstance(moving_features, FeatureMap) and isinstance(fixed_features, FeatureMap):
        if moving_features.channels != fixed_features.channels:
            raise ValueError(f"channel mismatch: {moving_features.channels} vs {fixed_features.channels}")
    mv = _values(moving_features)
    fx = _values(fixed_features)
    if mv.shape[1] != fx.shape[1]:
        raise ValueError("channel count mismatch")
    V1 = _verts(moved_mesh)
    if len(mv) != len(V1):
        raise ValueError("moving features do not match the moved mesh")
    sampled = sample_at(fixed_locator, fx, V1, faces)
    return ((mv - sampled) ** 2).mean()


def _soft(p) -> torch.Tensor:
    if isinstance(p, ParcellationMap):
        return _t(p.soft())
    return _t(p)


def soft_dice(a, b) -> torch.Tensor:
    """Per-parcel ``2 sum(ab) / (sum(a) + sum(b))``; parcels absent from both score 1."""
    a, b = _soft(a), _soft(b)
    if a.shape != b.shape:
        raise ValueError(f"parcellation shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    num = 2.0 * (a * b).sum(0)
    den = a.sum(0) + b.sum(0)
    safe = torch.where(den > 0, den, torch.ones_like(den))
    return torch.where(den > 0, num / safe, torch.ones_like(den))


def parc_dice(moved_parc, fixed_parc, p: int) -> float:
    a = _soft(moved_parc)
    if not 0 <= p < a.shape[1]:
        raise IndexError(f"parcel {p} out of range 0..{a.shape[1] - 1}")
    return float(soft_dice(a, fixed_parc)[p])


def parc_loss(moved_parc, fixed_parc) -> torch.Tensor:
    return (1.0 - soft_dice(moved_parc, fixed_parc)).mean()


# ---------------------------------------------------------------------------
# combination


def total_loss(stage: str, weights: LossWeights, level: int, sim, areal=0.0, angle=0.0,
               dist=0.0, fold=0.0, parc=None) -> LossBreakdown:
    """Rigid stage: similarity only. Non-rigid: level-weighted sum of all terms."""
    parts = combine(stage, weights.at(level), sim=sim, areal=areal, angle=angle, dist=dist, fold=fold, parc=parc)
    return LossBreakdown(**{k: float(v) for k, v in parts.items()})


def combine(stage: str, lam: dict[str, float], **terms) -> dict:
    parts = {k: (terms.get(k) if terms.get(k) is not None else 0.0) for k in COMPONENTS}
    if stage == "rigid":
        total = parts["sim"]
    elif stage == "non-rigid":
        total = 0.0
        for k in COMPONENTS:
            if k == "parc" and terms.get("parc") is None:
                continue
            if lam[k] != 0.0:
                total = total + lam[k] * parts[k]
    else:
        raise ValueError(f"unknown stage {stage!r}")
    parts["total"] = total
    return parts


@dataclass
class Objective:
    """Everything needed to score a deformation of ``mesh0`` against a fixed sphere.

    ``moving`` holds per-vertex features of ``mesh0``; the fixed side is any
    sphere mesh with a locator. Parcellations are optional (soft probabilities).
    """

    mesh0: SurfaceMesh
    moving: np.ndarray
    fixed_locator: FaceLocator
    fixed: np.ndarray
    lam: dict[str, float]
    stage: str = "non-rigid"
    moving_parc: np.ndarray | None = None
    fixed_parc: np.ndarray | None = None
    # mesh0 may hold this many equal-size disjoint copies of one mesh (a batch);
    # every term is then the mean over copies, Dice being taken per copy
    groups: int = 1
    ref: Reference = field(init=False, repr=False)

    def __post_init__(self):
        self.ref = Reference(self.mesh0)
        self.ref.check_orientation()
        self._mv = _values(self.moving)
        self._fx = _values(self.fixed)
        self._mp = None if self.moving_parc is None else _t(self.moving_parc)
        self._fp = None if self.fixed_parc is None else _t(self.fixed_parc)
        self._V0 = _t(self.mesh0.vertices)

    @property
    def has_parc(self) -> bool:
        return self._mp is not None and self._fp is not None

    def moved(self, angles) -> torch.Tensor:
        return warp_vertices(self._V0, rotation_matrices(_t(angles)))

    def locate(self, V1) -> np.ndarray:
        return locate_faces(self.fixed_locator, V1)

    def terms(self, V1: torch.Tensor, faces: np.ndarray | None = None) -> dict:
        if faces is None:
            faces = self.locate(V1)
        out = {"sim": None, "parc": None}
        need_fixed = self.has_parc and (self.stage == "non-rigid" and self.lam["parc"] != 0.0)
        fx = torch.cat([self._fx, self._fp], 1) if need_fixed else self._fx
        sampled = sample_at(self.fixed_locator, fx, V1, faces)
        c = self._fx.shape[1]
        out["sim"] = ((self._mv - sampled[:, :c]) ** 2).mean()
        if self.stage == "rigid":
            return out
        lam = self.lam
        ref = self.ref
        out["areal"] = _areal(ref, V1) if lam["areal"] else torch.zeros((), dtype=DTYPE)
        out["angle"] = _angle(ref, V1) if lam["angle"] else torch.zeros((), dtype=DTYPE)
        out["dist"] = _dist_terms(ref, V1).mean() if lam["dist"] else torch.zeros((), dtype=DTYPE)
        out["fold"] = _fold(ref, V1) if lam["fold"] else torch.zeros((), dtype=DTYPE)
        if need_fixed:
            mp = self._mp.reshape(self.groups, -1, self._mp.shape[1])
            sp = sampled[:, c:].reshape(self.groups, -1, self._mp.shape[1])
            out["parc"] = torch.stack([(1.0 - soft_dice(a, b)).mean() for a, b in zip(mp, sp)]).mean()
        return out

    def evaluate_vertices(self, V1, faces=None) -> dict:
        t = self.terms(V1, faces)
        return combine(self.stage, self.lam, **t)

    def evaluate(self, angles, faces=None) -> dict:
        """Loss parts (tensors) for per-vertex or global Euler angles."""
        return self.evaluate_vertices(self.moved(angles), faces)

    def breakdown(self, angles) -> LossBreakdown:
        with torch.no_grad():
            parts = self.evaluate(angles)
        return LossBreakdown(**{k: float(v) for k, v in parts.items()})

    def value_and_grad(self, angles, faces=None) -> tuple[float, np.ndarray]:
        a = _t(np.asarray(angles, dtype=np.float64)).clone().requires_grad_(True)
        total = self.evaluate(a, faces)["total"]
        (g,) = torch.autograd.grad(total, a)
        return float(total.detach()), g.numpy()

    def branch_signature(self, angles) -> np.ndarray:
        """Which smooth piece the loss is on at ``angles``.

        Concatenates located faces and the signs of every absolute-value or
        fold branch. Two configurations with equal signatures lie on the same
        smooth piece, which is where finite differences are meaningful.
        """
        with torch.no_grad():
            V1 = self.moved(_t(np.asarray(angles, dtype=np.float64)))
            parts = [self.locate(V1).astype(np.float64)]
            if self.stage == "non-rigid":
                ref = self.ref
                parts.append(np.sign((1.0 - face_areas(V1, ref.faces) / ref.area0).numpy()))
                parts.append(np.sign((1.0 - corner_angles(V1, ref.mesh.faces) / ref.angle0).numpy()).ravel())
                parts.append(np.sign((ring_offsets(V1, ref.ring, ref.valence) - ref.d0).numpy()))
                parts.append((oriented_areas(V1, ref.faces) <= 0).numpy().astype(np.float64))
        return np.concatenate(parts)


def loss_gradient(objective: Objective, field: EulerField | np.ndarray) -> np.ndarray:
    """Gradient of the objective's total loss with respect to every Euler angle."""
    angles = field.angles if isinstance(field, EulerField) else np.asarray(field, dtype=np.float64)
    return objective.value_and_grad(angles)[1]
