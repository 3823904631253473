"""Synthetic spherical-harmonic subjects standing in for cortical feature maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import sph_harm_y

from .deform import rotation_matrices, warp_vertices
from .mesh import FeatureMap, ParcellationMap, SurfaceMesh, build_icosphere


def real_harmonics(vertices, lmax: int) -> np.ndarray:
    """(N, (lmax+1)^2) orthonormal real spherical harmonics, ordered by (l, m)."""
    v = np.asarray(vertices, dtype=np.float64)
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    polar = np.arccos(np.clip(v[:, 2], -1.0, 1.0))
    azim = np.arctan2(v[:, 1], v[:, 0])
    cols = []
    for l in range(lmax + 1):
        for m in range(-l, l + 1):
            y = sph_harm_y(l, abs(m), polar, azim)
            if m < 0:
                cols.append(np.sqrt(2.0) * (-1) ** m * y.imag)
            elif m == 0:
                cols.append(y.real)
            else:
                cols.append(np.sqrt(2.0) * (-1) ** m * y.real)
    return np.stack(cols, axis=1)


def harmonic_field(vertices, coef: np.ndarray) -> np.ndarray:
    """Evaluate ``sum_k coef[k] Y_k`` at unit vectors; coef may be (K,) or (K, C)."""
    lmax = int(round(np.sqrt(len(coef)))) - 1
    return real_harmonics(vertices, lmax) @ coef


def random_coefficients(rng: np.random.Generator, lmin: int, lmax: int, decay: float = 1.0, channels=None):
    """Gaussian coefficients on degrees lmin..lmax with std ``l^-decay``; lower degrees zero."""
    if lmin > lmax:
        raise ValueError(f"lmin {lmin} exceeds lmax {lmax}")
    size = (lmax + 1) ** 2
    shape = (size,) if channels is None else (size, channels)
    coef = np.zeros(shape)
    for l in range(max(lmin, 0), lmax + 1):
        sl = slice(l * l, (l + 1) ** 2)
        coef[sl] = rng.normal(size=coef[sl].shape) * float(max(l, 1)) ** -decay
    return coef


def smooth_euler_field(vertices, rng: np.random.Generator, amplitude: float, lmax: int = 2) -> np.ndarray:
    """(N, 3) smooth Euler angles with max |angle| = amplitude."""
    a = harmonic_field(vertices, random_coefficients(rng, 1, lmax, decay=0.5, channels=3))
    peak = np.abs(a).max()
    return a * (amplitude / peak) if peak > 0 else a


def smooth_warp(vertices, field: np.ndarray, global_angles=None) -> np.ndarray:
    """Per-vertex rotation by ``field`` followed by an optional global rotation."""
    out = warp_vertices(np.asarray(vertices, dtype=np.float64), rotation_matrices(field))
    if global_angles is not None:
        out = warp_vertices(out, rotation_matrices(np.asarray(global_angles, dtype=np.float64)[None]))
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def zscore(x: np.ndarray) -> np.ndarray:
    return (x - x.mean(0)) / x.std(0)


@dataclass
class Subject:
    name: str
    mesh: SurfaceMesh
    features: FeatureMap
    parc: ParcellationMap | None = None

    def rotated(self, R: np.ndarray) -> "Subject":
        """Same subject with every vertex moved by one rotation matrix."""
        mesh = self.mesh.with_vertices(self.mesh.vertices @ np.asarray(R).T)
        feats = self.features.attach(mesh)
        return Subject(self.name, mesh, feats, self.parc)


@dataclass(frozen=True)
class CorpusSettings:
    template_lmax: int = 6
    warp_amplitude: float = 0.15
    warp_lmax: int = 3
    rotation_amplitude: float = 0.05
    perturb_lmax: int = 5
    perturb_scale: float = 0.35
    noise: float = 0.05
    parcel_jitter: float = 0.05


def voronoi_labels(points: np.ndarray, seeds: np.ndarray) -> np.ndarray:
    """Index of the geodesically nearest seed (largest dot product) per point."""
    return np.argmax(points @ seeds.T, axis=1)


def synth_corpus(seed: int, n_subjects: int, level: int, parcel_count: int = 34,
                 settings: CorpusSettings | None = None) -> list[Subject]:
    """Subjects on ico_level sharing a warped population template.

    feature_s(v) = z( template(T_s v) + perturbation_s(v) + noise ), where T_s is
    a smooth per-vertex rotation field composed with a small global rotation.
    Parcels are Voronoi cells of per-subject jittered seed vertices, pulled back
    through the same warp.
    """
    if n_subjects < 1:
        raise ValueError("need at least one subject")
    st = settings or CorpusSettings()
    rng = np.random.default_rng(seed)
    mesh = build_icosphere(level).mesh
    V = mesh.vertices
    template = random_coefficients(rng, 1, st.template_lmax, decay=0.5)
    centres = rng.normal(size=(parcel_count, 3))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    seed_vertices = V[np.argmax(centres @ V.T, axis=1)]
    subjects = []
    for s in range(n_subjects):
        field = smooth_euler_field(V, rng, st.warp_amplitude, st.warp_lmax)
        rot = rng.uniform(-st.rotation_amplitude, st.rotation_amplitude, size=3)
        X = smooth_warp(V, field, rot)
        f = harmonic_field(X, template)
        f = f + st.perturb_scale * harmonic_field(V, random_coefficients(rng, 1, st.perturb_lmax, 0.5))
        f = f + st.noise * rng.normal(size=len(V))
        jit = rotation_matrices(rng.uniform(-st.parcel_jitter, st.parcel_jitter, size=(parcel_count, 3)))
        seeds_s = np.einsum("pij,pj->pi", jit, seed_vertices)
        labels = voronoi_labels(X, seeds_s)
        subjects.append(
            Subject(
                f"sub-{s:03d}",
                mesh,
                FeatureMap.on(mesh, zscore(f)[:, None], ("feature",), normalized=True),
                ParcellationMap(parcel_count, labels=labels),
            )
        )
    return subjects


@dataclass
class SyntheticPair:
    moving: Subject
    fixed: Subject
    field: np.ndarray  # ground-truth per-vertex Euler field of the warp
    rotation: np.ndarray  # ground-truth global angles


def synthetic_suite(seed: int = 0, n_pairs: int = 10, level: int = 4, lmin: int = 6, lmax: int = 14,
                    warp_amplitude: float = 0.1, warp_lmax: int = 2,
                    rotation_amplitude: float = 0.15) -> list[SyntheticPair]:
    """Pairs where moving(v) = fixed(T(v)) for a known smooth warp T.

    T applies a smooth per-vertex rotation and then a global rotation, so an
    exact registration exists inside the deformation model.
    """
    rng = np.random.default_rng(seed)
    mesh = build_icosphere(level).mesh
    V = mesh.vertices
    pairs = []
    for k in range(n_pairs):
        coef = random_coefficients(rng, lmin, lmax, decay=0.0)
        fixed_vals = harmonic_field(V, coef)
        mu, sd = fixed_vals.mean(), fixed_vals.std()
        field = smooth_euler_field(V, rng, warp_amplitude, warp_lmax)
        rot = rng.uniform(-rotation_amplitude, rotation_amplitude, size=3)
        moving_vals = (harmonic_field(smooth_warp(V, field, rot), coef) - mu) / sd
        fixed_vals = (fixed_vals - mu) / sd
        fixed = Subject(f"pair{k:02d}-fixed", mesh, FeatureMap.on(mesh, fixed_vals[:, None], ("feature",), True))
        moving = Subject(f"pair{k:02d}-moving", mesh, FeatureMap.on(mesh, moving_vals[:, None], ("feature",), True))
        pairs.append(SyntheticPair(moving, fixed, field, rot))
    return pairs
