"""Rigid then non-rigid registration pipelines, training and evaluation."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import torch

from .deform import EulerField, rotation_matrices, rotation_to_euler, upsample_euler, warp_vertices
from .interp import build_locator, locate_many, resample_values
from .loss import LossBreakdown, LossWeights, Objective, sample_at
from .mesh import FeatureMap, SurfaceMesh, build_icosphere
from .metrics import DistortionReport, dice_hard, distortion_report, mae, ncc
from .net import SGAT, ModelBundle, SgatConfig, build_inputs, graph_edges, positional_features
from .synth import Subject, SyntheticPair, synth_corpus, synthetic_suite  # noqa: F401

DEFAULT_STEPS = {3: 100, 4: 100, 5: 60, 6: 40}
DEFAULT_STEP_SIZE = {3: 0.01, 4: 0.005, 5: 0.0025, 6: 0.00125}
DEFAULT_SMOOTHING = {3: 4, 4: 16, 5: 64, 6: 128}


class DivergenceError(RuntimeError):
    """A loss evaluation returned a non-finite value."""


@dataclass(frozen=True)
class RegistrationConfig:
    levels: tuple[int, ...] = (3, 4, 5, 6)
    mode: str = "direct"  # or "learned"
    weights: LossWeights = field(default_factory=LossWeights)
    steps: tuple[int, ...] | None = None
    step_size: tuple[float, ...] | None = None  # initial normalised step per level (rad)
    max_step: float | None = 0.05  # cap on step growth; None lets it grow freely
    max_halvings: int = 20
    smoothing: tuple[int, ...] | None = None  # ring-averaging passes on the direct-mode gradient
    rigid_steps: int = 300
    rigid_step_size: float = 0.05
    rigid_grid: float = 0.3
    rigid_restarts: int = 3
    use_parc: bool = True
    seed: int = 0

    def __post_init__(self):
        lv = tuple(int(x) for x in self.levels)
        if not lv or any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError(f"levels must be strictly increasing, got {lv}")
        missing = [l for l in lv if l not in self.weights.levels]
        if missing:
            raise ValueError(f"no loss weights for levels {missing}")
        if self.mode not in ("direct", "learned"):
            raise ValueError(f"unknown mode {self.mode!r}")
        steps = tuple(DEFAULT_STEPS.get(l, 40) for l in lv) if self.steps is None else tuple(int(s) for s in self.steps)
        size = (
            tuple(DEFAULT_STEP_SIZE.get(l, 0.001) for l in lv)
            if self.step_size is None
            else tuple(float(s) for s in self.step_size)
        )
        smooth = (
            tuple(DEFAULT_SMOOTHING.get(l, 128) for l in lv)
            if self.smoothing is None
            else tuple(int(s) for s in self.smoothing)
        )
        if len(steps) != len(lv) or len(size) != len(lv) or len(smooth) != len(lv):
            raise ValueError("steps, step_size and smoothing need one entry per level")
        if any(k < 0 or k % 2 for k in smooth):
            raise ValueError("smoothing pass counts must be even and >= 0")
        object.__setattr__(self, "levels", lv)
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "step_size", size)
        object.__setattr__(self, "smoothing", smooth)

    def aggressive(self) -> "RegistrationConfig":
        """Large, uncapped steps: the preset used for the fold ablation."""
        return replace(self, step_size=tuple(0.2 for _ in self.levels), max_step=None)


@dataclass
class LevelTrace:
    level: int
    before: LossBreakdown
    after: LossBreakdown
    totals: list[float] = field(default_factory=list)


@dataclass
class RegistrationResult:
    rigid_angles: np.ndarray  # (1, 3)
    rigid_mesh: SurfaceMesh  # moving mesh after the rigid stage; the non-rigid input
    fields: dict[int, EulerField]
    moved_mesh: SurfaceMesh  # finest-level icosphere warped by the final field
    moved_features: FeatureMap  # moving features carried by moved_mesh
    traces: list[LevelTrace]
    distortion: DistortionReport
    post_rigid_sim: float
    final_sim: float
    timings: dict[str, float]
    stages: list[str]
    success: bool

    @property
    def fold_count(self) -> int:
        return self.distortion.fold_count

    @property
    def final_field(self) -> EulerField:
        return self.fields[max(self.fields)]


# ---------------------------------------------------------------------------
# optimiser


def descend(fun, x0: np.ndarray, steps: int, step: float, max_step: float | None = None,
            max_halvings: int = 20, bound: float = np.pi - 1e-6, precondition=None,
            armijo: float = 1e-4):
    """Monotone normalised gradient descent with backtracking.

    The search direction is ``-P(g)`` scaled to unit max-norm, where ``P`` is
    ``precondition`` (identity when None), so ``step`` is the largest angle
    change in radians. A trial is accepted when it lowers ``fun`` by at least
    ``armijo * trial * |<g, d>|``; failures halve the step (at most
    ``max_halvings`` times) and successes double it.
    If a preconditioned direction fails outright the raw gradient is tried
    before stopping. Returns ``(x, f, history)``.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    if not np.isfinite(f):
        raise DivergenceError(f"non-finite initial loss {f}")
    hist = [f]
    for _ in range(steps):
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")
        if not np.any(g):
            break
        accepted = False
        directions = [precondition, None] if precondition is not None else [None]
        for pre in directions:
            d = -(g if pre is None else pre(g))
            scale = np.abs(d).max()
            if scale == 0:
                continue
            d = d / scale
            slope = float(np.sum(g * d))
            trial = step
            for _ in range(max_halvings + 1):
                xn = x + trial * d
                if np.abs(xn).max() < bound:
                    fn, gn = fun(xn)
                    if not np.isfinite(fn):
                        raise DivergenceError(f"non-finite loss {fn}")
                    if fn < f and fn <= f + armijo * trial * slope:
                        accepted = True
                        break
                trial *= 0.5
            if accepted:
                step = trial
                break
        if not accepted:
            break
        x, f, g = xn, fn, gn
        hist.append(f)
        step *= 2.0
        if max_step is not None:
            step = min(step, max_step)
    return x, f, hist


@lru_cache(maxsize=None)
def _ring_operator(level: int) -> sp.csr_matrix:
    src, dst = graph_edges(level)
    n = int(dst.max()) + 1
    A = sp.csr_matrix((np.ones(len(src)), (dst.numpy(), src.numpy())), shape=(n, n))
    d = np.asarray(A.sum(1)).ravel() ** -0.5
    return (sp.diags(d) @ A @ sp.diags(d)).tocsr()


def ring_smoother(level: int, passes: int):
    """Symmetric-normalised closed-ring averaging applied ``passes`` times.

    With an even pass count the operator is positive semi-definite, so the
    smoothed negative gradient stays a descent direction of the smooth part.
    """
    S = _ring_operator(level)

    def apply(g):
        for _ in range(passes):
            g = S @ g
        return g

    return apply


# ---------------------------------------------------------------------------
# helpers


def _check_pair(moving: Subject, fixed: Subject):
    if moving.features.n_channels != fixed.features.n_channels:
        raise ValueError("moving and fixed feature channel counts differ")
    if moving.features.mesh_ref != moving.mesh.key or fixed.features.mesh_ref != fixed.mesh.key:
        raise ValueError("features are not attached to their meshes")
    for s in (moving, fixed):
        r = np.linalg.norm(s.mesh.vertices, axis=1)
        if np.abs(r - 1.0).max() > 1e-6:
            raise ValueError(f"{s.name}: mesh is not a unit sphere")


def _on_grid(subject: Subject, grid: SurfaceMesh, loc=None):
    """Features (and soft parcels, if any) of ``subject`` resampled to grid vertices."""
    if subject.mesh.key == grid.key:
        vals = np.array(subject.features.values)
        parc = None if subject.parc is None else subject.parc.soft()
        return vals, parc
    loc = loc or build_locator(subject.mesh)
    faces, w, _ = locate_many(loc, grid.vertices)
    tri = subject.mesh.faces[faces]
    vals = (subject.features.values[tri] * w[..., None]).sum(1)
    parc = None
    if subject.parc is not None:
        parc = (subject.parc.soft()[tri] * w[..., None]).sum(1)
        parc = np.clip(parc, 0.0, None)
        parc /= parc.sum(1, keepdims=True)
    return vals, parc


def _rotated_subject(subject: Subject, angles) -> Subject:
    R = rotation_matrices(np.asarray(angles, dtype=np.float64).reshape(1, 3))[0]
    return subject.rotated(R)


# ---------------------------------------------------------------------------
# rigid stage


def rigid_objective(moving: Subject, fixed: Subject, weights: LossWeights | None = None) -> Objective:
    weights = weights or LossWeights()
    return Objective(
        moving.mesh,
        np.array(moving.features.values),
        build_locator(fixed.mesh),
        np.array(fixed.features.values),
        weights.at(weights.levels[0]),
        stage="rigid",
    )


def rigid_register(moving: Subject, fixed: Subject, config: RegistrationConfig | None = None,
                   model: ModelBundle | None = None):
    """Global rotation aligning ``moving`` to ``fixed``.

    Returns ``(angles (1, 3), rotated moving Subject, history)``.
    """
    config = config or RegistrationConfig()
    _check_pair(moving, fixed)
    if config.mode == "learned":
        if model is None or model.rigid is None:
            raise ValueError("learned rigid registration needs a model with a rigid net")
        angles = learned_rigid_angles(model.rigid, moving, fixed)
        return angles, _rotated_subject(moving, angles), []
    obj = rigid_objective(moving, fixed, config.weights)

    def fun(x):
        return obj.value_and_grad(x.reshape(1, 3))

    g = config.rigid_grid
    grid = np.array(list(itertools.product((0.0, -g, g), repeat=3)))
    with torch.no_grad():
        scores = np.array([float(obj.evaluate(a[None])["total"]) for a in grid])
    if not np.all(np.isfinite(scores)):
        raise DivergenceError("non-finite rigid loss on the restart grid")
    best = None
    for k in np.argsort(scores, kind="stable")[: config.rigid_restarts]:
        x, f, hist = descend(fun, grid[k], config.rigid_steps, config.rigid_step_size, None, config.max_halvings)
        if best is None or f < best[1]:
            best = (x, f, hist)
    angles = best[0].reshape(1, 3)
    return angles, _rotated_subject(moving, angles), best[2]


def learned_rigid_angles(net: SGAT, moving: Subject, fixed: Subject) -> np.ndarray:
    grid = build_icosphere(net.config.level).mesh
    mv, _ = _on_grid(moving, grid)
    fx, _ = _on_grid(fixed, grid)
    with torch.no_grad():
        out = net(build_inputs(mv, fx, positional_features(grid_level(grid), net.config.pe_L)))
    return out.numpy().reshape(1, 3)


def grid_level(grid: SurfaceMesh) -> int:
    for l in range(8):
        if build_icosphere(l).mesh.n_vertices == grid.n_vertices:
            return l
    raise ValueError("not an icosphere grid")


# ---------------------------------------------------------------------------
# non-rigid stage


@dataclass
class LevelProblem:
    """Moving and fixed data standardised onto ico_level."""

    level: int
    grid: SurfaceMesh
    moving: np.ndarray
    fixed: np.ndarray
    fixed_locator: object
    moving_parc: np.ndarray | None
    fixed_parc: np.ndarray | None

    def objective(self, lam: dict) -> Objective:
        return Objective(self.grid, self.moving, self.fixed_locator, self.fixed, lam, "non-rigid",
                         self.moving_parc, self.fixed_parc)


def level_problem(moving: Subject, fixed: Subject, level: int, use_parc: bool = True,
                  moving_loc=None, fixed_loc=None) -> LevelProblem:
    grid = build_icosphere(level).mesh
    mv, mp = _on_grid(moving, grid, moving_loc)
    fx, fp = _on_grid(fixed, grid, fixed_loc)
    if not use_parc or mp is None or fp is None:
        mp = fp = None
    return LevelProblem(level, grid, mv, fx, build_locator(grid), mp, fp)


def _carry(prev: EulerField | None, prev_level: int | None, level: int) -> np.ndarray:
    if prev is None:
        return np.zeros((build_icosphere(level).mesh.n_vertices, 3))
    f = prev
    for l in range(prev_level + 1, level + 1):
        f = upsample_euler(f, build_icosphere(l))
    return np.array(f.angles)


def nonrigid_register(moving: Subject, fixed: Subject, config: RegistrationConfig | None = None,
                      model: ModelBundle | None = None):
    """Coarse-to-fine Euler fields deforming the (rigidly aligned) moving sphere.

    Returns ``(fields, traces, problems)`` keyed by level.
    """
    config = config or RegistrationConfig()
    _check_pair(moving, fixed)
    if config.mode == "learned":
        if model is None:
            raise ValueError("learned mode needs a model")
        absent = [l for l in config.levels if model.level_net(l) is None]
        if absent:
            raise ValueError(f"model has no net for levels {absent}")
    mloc, floc = build_locator(moving.mesh), build_locator(fixed.mesh)
    fields: dict[int, EulerField] = {}
    traces: list[LevelTrace] = []
    problems: dict[int, LevelProblem] = {}
    prev, prev_level = None, None
    for k, level in enumerate(config.levels):
        prob = level_problem(moving, fixed, level, config.use_parc, mloc, floc)
        obj = prob.objective(config.weights.at(level))
        phi = _carry(prev, prev_level, level)
        before = obj.breakdown(phi)
        if not np.isfinite(before.total):
            raise DivergenceError(f"non-finite loss entering ico_{level}")
        if config.mode == "direct":
            pre = ring_smoother(level, config.smoothing[k]) if config.smoothing[k] else None
            phi, _, hist = descend(
                obj.value_and_grad, phi, config.steps[k], config.step_size[k], config.max_step,
                config.max_halvings, precondition=pre,
            )
        else:
            phi = learned_level_angles(model.level_net(level), prob, phi)
        after = obj.breakdown(phi)
        if not np.isfinite(after.total):
            raise DivergenceError(f"non-finite loss leaving ico_{level}")
        if config.mode != "direct":
            hist = [before.total, after.total]
        fields[level] = EulerField(phi, prob.grid.key)
        traces.append(LevelTrace(level, before, after, hist))
        problems[level] = prob
        prev, prev_level = fields[level], level
    return fields, traces, problems


def register(moving: Subject, fixed: Subject, config: RegistrationConfig | None = None,
             model: ModelBundle | None = None) -> RegistrationResult:
    """Rigid stage, then coarse-to-fine non-rigid stage on the rigid output."""
    config = config or RegistrationConfig()
    t0 = time.perf_counter()
    angles, rigid_moving, _ = rigid_register(moving, fixed, config, model)
    t1 = time.perf_counter()
    fields, traces, problems = nonrigid_register(rigid_moving, fixed, config, model)
    t2 = time.perf_counter()
    top = config.levels[-1]
    prob = problems[top]
    phi = fields[top]
    moved_v = warp_vertices(prob.grid.vertices, rotation_matrices(phi.angles))
    moved_v /= np.linalg.norm(moved_v, axis=1, keepdims=True)
    moved = prob.grid.with_vertices(moved_v)
    report = distortion_report(prob.grid, moved)
    sim_obj = prob.objective(config.weights.at(top))
    post_rigid = sim_obj.breakdown(np.zeros_like(phi.angles)).sim
    t3 = time.perf_counter()
    return RegistrationResult(
        rigid_angles=angles,
        rigid_mesh=rigid_moving.mesh,
        fields=fields,
        moved_mesh=moved,
        moved_features=FeatureMap.on(moved, prob.moving, moving.features.channels, moving.features.normalized),
        traces=traces,
        distortion=report,
        post_rigid_sim=post_rigid,
        final_sim=traces[-1].after.sim,
        timings={"rigid": t1 - t0, "nonrigid": t2 - t1, "evaluate": t3 - t2, "total": t3 - t0},
        stages=["rigid"] + [f"non-rigid:ico{l}" for l in config.levels],
        success=report.fold_count == 0,
    )


# ---------------------------------------------------------------------------
# learned mode


def _fixed_at(prob: LevelProblem, X: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        return sample_at(prob.fixed_locator, prob.fixed, X).numpy()


def level_inputs(net: SGAT, prob: LevelProblem, R_prev: np.ndarray) -> torch.Tensor:
    """Net input in the moving frame: moving values with fixed values at the current positions.

    ``R_prev`` is (N, 3, 3), or (B, N, 3, 3) for a batch of inputs (B, N, C).
    """
    R = np.asarray(R_prev)
    pe = positional_features(prob.level, net.config.pe_L)
    if R.ndim == 3:
        return build_inputs(prob.moving, _fixed_at(prob, warp_vertices(prob.grid.vertices, R)), pe)
    n = prob.grid.n_vertices
    X = np.einsum("bnij,nj->bni", R, prob.grid.vertices).reshape(-1, 3)
    fx = _fixed_at(prob, X).reshape(len(R), n, -1)
    return torch.stack([build_inputs(prob.moving, f, pe) for f in fx])


@lru_cache(maxsize=None)
def batch_mesh(level: int, copies: int) -> SurfaceMesh:
    """``copies`` disjoint copies of ico_level in one mesh, for batched loss evaluation."""
    m = build_icosphere(level).mesh
    V = np.tile(m.vertices, (copies, 1))
    F = np.concatenate([m.faces + k * m.n_vertices for k in range(copies)])
    return SurfaceMesh(V, F)


def compose(delta, R_prev):
    """Rotation matrices for an increment applied after the current rotation."""
    return torch.einsum("...ij,...jk->...ik", rotation_matrices(delta), R_prev)


def learned_level_angles(net: SGAT, prob: LevelProblem, phi_prev: np.ndarray) -> np.ndarray:
    if net.config.level != prob.level or net.config.output_mode != "vertex":
        raise ValueError(f"net is not a per-vertex model for ico_{prob.level}")
    R_prev = rotation_matrices(phi_prev)
    with torch.no_grad():
        delta = net(level_inputs(net, prob, R_prev))
        R = compose(delta, torch.from_numpy(R_prev))
    return rotation_to_euler(R).numpy()


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 3e-4
    weight_decay: float = 0.01
    max_rotation: float = 0.01
    n_augment: int = 3
    randomized_target: bool = True
    train_rigid: bool = True
    rigid_epochs: int | None = None
    widths: tuple[int, ...] = (64, 128)
    heads: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.max_rotation > 0:
            raise ValueError("max rotation angle must be > 0")
        if self.n_augment < 0:
            raise ValueError("n_augment must be >= 0")


def sample_rotations(rng: np.random.Generator, n: int, max_angle: float) -> np.ndarray:
    """(n, 3) angles drawn uniformly with every |angle| strictly below ``max_angle``."""
    a = rng.uniform(-max_angle, max_angle, size=(n, 3))
    return np.where(np.abs(a) < max_angle, a, 0.0)


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)

    def add(self, **kw):
        self.records.append(kw)

    def epoch_means(self, net: str, key: str = "sim") -> list[float]:
        rows = [r for r in self.records if r["net"] == net]
        epochs = sorted({r["epoch"] for r in rows})
        return [float(np.mean([r[key] for r in rows if r["epoch"] == e])) for e in epochs]


def _draw_target(rng, i: int, n: int, randomized: bool) -> int:
    if not randomized:
        return (i + 1) % n
    j = int(rng.integers(n - 1))
    return j + (j >= i)


def init_model(rc: RegistrationConfig, tc: TrainConfig, channels: int) -> ModelBundle:
    """Freshly initialised rigid net (if enabled) plus one net per level, seeded from ``tc.seed``."""
    nets = {}
    base = rc.levels[0]
    if tc.train_rigid:
        nets["rigid"] = SGAT(
            SgatConfig(base, channels, widths=tc.widths[: min(len(tc.widths), base)], heads=tc.heads,
                       output_mode="global"),
            seed=tc.seed,
        )
    for k, level in enumerate(rc.levels):
        nets[f"ico{level}"] = SGAT(
            SgatConfig(level, channels, widths=tc.widths[: min(len(tc.widths), level)], heads=tc.heads),
            seed=tc.seed + k + 1,
        )
    return ModelBundle(nets, {"levels": list(rc.levels), "seed": tc.seed})


def train(corpus: list[Subject], train_config: TrainConfig | None = None,
          registration_config: RegistrationConfig | None = None,
          model: ModelBundle | None = None, log=None) -> tuple[ModelBundle, TrainHistory]:
    """Train a rigid global net, then one per-vertex net per level, coarse to fine."""
    tc = train_config or TrainConfig()
    rc = registration_config or RegistrationConfig(levels=(3, 4), mode="learned")
    if len(corpus) < 2:
        raise ValueError("training needs at least 2 subjects")
    rng = np.random.default_rng(tc.seed)
    if model is None:
        model = init_model(rc, tc, corpus[0].features.n_channels)
    history = TrainHistory()
    n = len(corpus)
    # per-subject data on every level grid, computed once
    grids = {l: build_icosphere(l).mesh for l in rc.levels}
    locs = {l: build_locator(g) for l, g in grids.items()}
    cache = {}
    for s in range(n):
        sub = corpus[s]
        for l, g in grids.items():
            cache[s, l] = _on_grid(sub, g)
    if model.rigid is not None:
        _train_rigid(model.rigid, corpus, cache, grids, locs, tc, rc, rng, history, log)
    for k, level in enumerate(rc.levels):
        _train_level(model, k, corpus, cache, grids, locs, tc, rc, rng, history, log)
    return model, history


def _problem_from_cache(cache, grids, locs, i, j, level, use_parc, R_rigid=None):
    """LevelProblem with subject i (optionally rigidly rotated) as moving and j as fixed."""
    grid = grids[level]
    mv, mp = cache[i, level]
    fx, fp = cache[j, level]
    if R_rigid is not None:
        # moving rotated by R: its value at grid vertex v is the original value at R^T v
        pts = grid.vertices @ R_rigid
        faces, w, _ = locate_many(locs[level], pts)
        tri = grid.faces[faces]
        mv = (mv[tri] * w[..., None]).sum(1)
        if mp is not None:
            mp = (mp[tri] * w[..., None]).sum(1)
    if not use_parc or mp is None or fp is None:
        mp = fp = None
    return LevelProblem(level, grid, mv, fx, locs[level], mp, fp)


def _train_rigid(net, corpus, cache, grids, locs, tc, rc, rng, history, log):
    level = net.config.level
    opt = torch.optim.AdamW(net.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    lam = rc.weights.at(rc.levels[0])
    n = len(corpus)
    pe = positional_features(level, net.config.pe_L)
    for epoch in range(tc.rigid_epochs or tc.epochs):
        for i in rng.permutation(n):
            j = _draw_target(rng, i, n, tc.randomized_target)
            prob = _problem_from_cache(cache, grids, locs, i, j, level, False)
            obj = Objective(prob.grid, prob.moving, prob.fixed_locator, prob.fixed, lam, "rigid")
            angles = net(build_inputs(prob.moving, prob.fixed, pe))
            parts = obj.evaluate(angles)
            _step(opt, parts["total"], epoch, "rigid")
            history.add(net="rigid", epoch=epoch, **{k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in parts.items()})
        if log:
            log(f"rigid epoch {epoch}: sim {history.epoch_means('rigid')[-1]:.5f}")


def _cached_rigid_angles(net: SGAT, cache, i: int, j: int) -> np.ndarray:
    """``learned_rigid_angles`` on the precomputed grid data of subjects i and j."""
    level = net.config.level
    with torch.no_grad():
        out = net(build_inputs(cache[i, level][0], cache[j, level][0], positional_features(level, net.config.pe_L)))
    return out.numpy().reshape(1, 3)


def _step(opt, total, epoch, name):
    if not torch.isfinite(total):
        raise DivergenceError(f"non-finite training loss in {name} at epoch {epoch}")
    opt.zero_grad()
    total.backward()
    opt.step()


def _prior_rotations(model: ModelBundle, rc: RegistrationConfig, k: int, cache, grids, locs, i, j, R_rigid):
    """Rotation matrices of the coarser trained levels, upsampled to level k."""
    level = rc.levels[k]
    phi, prev_level = None, None
    for kk in range(k):
        lv = rc.levels[kk]
        prob = _problem_from_cache(cache, grids, locs, i, j, lv, False, R_rigid)
        start = _carry(phi, prev_level, lv)
        phi = EulerField(learned_level_angles(model.level_net(lv), prob, start), grids[lv].key)
        prev_level = lv
    return rotation_matrices(_carry(phi, prev_level, level))


def _train_level(model, k, corpus, cache, grids, locs, tc, rc, rng, history, log):
    level = rc.levels[k]
    net = model.level_net(level)
    name = f"ico{level}"
    opt = torch.optim.AdamW(net.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    lam = rc.weights.at(level)
    n = len(corpus)
    for epoch in range(tc.epochs):
        for i in rng.permutation(n):
            j = _draw_target(rng, i, n, tc.randomized_target)
            R_rigid = None
            if model.rigid is not None:
                a = _cached_rigid_angles(model.rigid, cache, i, j)
                R_rigid = rotation_matrices(a)[0]
            prob = _problem_from_cache(cache, grids, locs, i, j, level, rc.use_parc, R_rigid)
            R_prev = _prior_rotations(model, rc, k, cache, grids, locs, i, j, R_rigid)
            aug = rotation_matrices(sample_rotations(rng, tc.n_augment, tc.max_rotation))
            R_batch = np.concatenate([R_prev[None], np.einsum("bij,njk->bnik", aug, R_prev)])
            B = len(R_batch)
            # the B variants are scored as one mesh of B disjoint copies: each term
            # is then the mean over variants
            obj = Objective(batch_mesh(level, B), np.tile(prob.moving, (B, 1)), prob.fixed_locator, prob.fixed,
                            lam, "non-rigid", None if prob.moving_parc is None else np.tile(prob.moving_parc, (B, 1)),
                            prob.fixed_parc, groups=B)
            delta = net(level_inputs(net, prob, R_batch))
            V = torch.from_numpy(np.array(prob.grid.vertices))
            V1 = torch.einsum("bnij,nj->bni", compose(delta, torch.from_numpy(R_batch)), V).reshape(-1, 3)
            parts = obj.evaluate_vertices(V1)
            _step(opt, parts["total"], epoch, name)
            history.add(net=name, epoch=epoch, **{c: float(v.detach()) if torch.is_tensor(v) else float(v)
                                                  for c, v in parts.items()})
        if log:
            log(f"{name} epoch {epoch}: sim {history.epoch_means(name)[-1]:.5f}")


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class PairMetrics:
    ncc: float
    mae: float
    dice: float | None
    areal: float
    shape: float
    edge: float
    fold_count: int
    post_rigid_sim: float
    final_sim: float


def pair_metrics(result: RegistrationResult, fixed: Subject, moving: Subject | None = None) -> PairMetrics:
    """Accuracy of the moved sphere against ``fixed`` plus the result's distortion."""
    grid_fixed = build_locator(fixed.mesh)
    moved = result.moved_mesh
    fx_at = resample_values(fixed.mesh, fixed.features.values, moved.vertices, grid_fixed)
    mv = result.moved_features.values
    dice = None
    if moving is not None and moving.parc is not None and fixed.parc is not None:
        # labels carried to the moved grid, against fixed labels at the same points
        grid = build_icosphere(grid_level(moved)).mesh
        rm = _rotated_subject(moving, result.rigid_angles)
        mp = _on_grid(rm, grid)[1].argmax(1)
        fp = resample_values(fixed.mesh, fixed.parc.soft(), moved.vertices, grid_fixed).argmax(1)
        dice = dice_hard(mp, fp)[1]
    d = result.distortion
    return PairMetrics(
        ncc=ncc(mv, fx_at),
        mae=mae(mv, fx_at),
        dice=dice,
        areal=d.areal_mean,
        shape=d.shape_mean,
        edge=d.edge_mean,
        fold_count=d.fold_count,
        post_rigid_sim=result.post_rigid_sim,
        final_sim=result.final_sim,
    )


def mean_ci(values) -> tuple[float, float, float]:
    """Mean with a normal-approximation 95% interval (mean +- 1.96 SE)."""
    x = np.asarray(values, dtype=np.float64)
    m = float(x.mean())
    if len(x) < 2:
        return m, m, m
    se = float(x.std(ddof=1) / np.sqrt(len(x)))
    return m, m - 1.96 * se, m + 1.96 * se


def evaluate(pairs, results) -> dict:
    """Per-pair metrics plus mean and 95% CI of each across pairs.

    ``pairs`` holds (moving, fixed) subjects or SyntheticPair objects aligned
    with ``results``.
    """
    rows = []
    for pair, res in zip(pairs, results, strict=True):
        moving, fixed = (pair.moving, pair.fixed) if isinstance(pair, SyntheticPair) else pair
        rows.append(pair_metrics(res, fixed, moving))
    agg = {}
    for key in ("ncc", "mae", "dice", "areal", "shape", "edge", "fold_count", "post_rigid_sim", "final_sim"):
        vals = [getattr(r, key) for r in rows if getattr(r, key) is not None]
        if vals:
            agg[key] = mean_ci(vals)
    return {"pairs": rows, "aggregate": agg}


__all__ = [
    "DivergenceError", "RegistrationConfig", "RegistrationResult", "TrainConfig", "TrainHistory",
    "descend", "init_model", "rigid_register", "nonrigid_register", "register", "train", "evaluate", "mean_ci",
    "synth_corpus", "synthetic_suite", "sample_rotations", "pair_metrics",
]
