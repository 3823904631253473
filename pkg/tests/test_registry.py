import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spherereg.deform import rotation_matrices
from spherereg.loss import LossWeights
from spherereg.metrics import ncc
from spherereg.registry import (
    RegistrationConfig,
    TrainConfig,
    descend,
    evaluate,
    mean_ci,
    register,
    rigid_register,
    ring_smoother,
    sample_rotations,
    train,
)
from spherereg.synth import synth_corpus, synthetic_suite

TRUE_ANGLES = (0.1, -0.05, 0.2)


@pytest.fixture(scope="module")
def subject():
    return synth_corpus(3, 1, 4)[0]


def test_descend_is_monotone_on_a_quadratic():
    A = np.diag([1.0, 10.0, 100.0])

    def fun(x):
        return float(x @ A @ x), 2 * A @ x

    x, f, hist = descend(fun, np.array([1.0, 1.0, 1.0]), 200, 0.5)
    assert np.all(np.diff(hist) < 0)
    assert f < 1e-6


def test_ring_smoother_is_psd_and_keeps_constants():
    S = ring_smoother(2, 4)
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = rng.normal(size=(162, 3))
        assert np.sum(g * S(g)) >= 0
    # the symmetric-normalised operator fixes sqrt(degree) weighted constants
    from spherereg.net import graph_edges

    deg = np.bincount(graph_edges(2)[1].numpy()).astype(float)
    v = np.sqrt(deg)[:, None]
    assert np.allclose(S(v), v)


def test_config_validation():
    with pytest.raises(ValueError):
        RegistrationConfig(levels=(4, 3))
    with pytest.raises(ValueError):
        RegistrationConfig(levels=(3, 7))
    with pytest.raises(ValueError):
        RegistrationConfig(levels=(3,), steps=(1, 2))
    with pytest.raises(ValueError):
        RegistrationConfig(levels=(3,), smoothing=(3,))
    with pytest.raises(ValueError):
        RegistrationConfig(mode="neural")
    cfg = RegistrationConfig(levels=(3, 4))
    assert cfg.steps == (100, 100)
    assert cfg.aggressive().levels == (3, 4)


def test_rigid_recovers_known_rotation(subject):
    R = rotation_matrices(np.array(TRUE_ANGLES))
    fixed = subject.rotated(R)
    angles, moved, _ = rigid_register(subject, fixed, RegistrationConfig(levels=(3,)))
    assert np.abs(angles[0] - TRUE_ANGLES).max() < 1e-3
    from spherereg.registry import rigid_objective

    assert float(rigid_objective(subject, fixed).evaluate(angles)["sim"]) < 1e-6
    # rigid by construction: pairwise distances preserved
    V0, V1 = subject.mesh.vertices[:200], moved.mesh.vertices[:200]
    d0 = np.linalg.norm(V0[:, None] - V0[None], axis=-1)
    d1 = np.linalg.norm(V1[:, None] - V1[None], axis=-1)
    assert np.abs(d0 - d1).max() < 1e-9


def test_identity_pair(subject):
    res = register(subject, subject, RegistrationConfig(levels=(3, 4)))
    assert np.abs(res.rigid_angles).max() < 1e-6
    assert np.linalg.norm(res.final_field.angles, axis=1).max() < 1e-4
    d = res.distortion
    assert max(d.areal_mean, d.shape_mean, d.edge_mean) < 1e-3
    assert res.success and res.fold_count == 0
    rows = evaluate([(subject, subject)], [res])["pairs"]
    assert rows[0].ncc == pytest.approx(1.0, abs=1e-9)
    assert rows[0].mae < 1e-6


def test_pipeline_order_and_result_invariants():
    pair = synthetic_suite(n_pairs=1)[0]
    res = register(pair.moving, pair.fixed, RegistrationConfig(levels=(3, 4)))
    assert res.stages == ["rigid", "non-rigid:ico3", "non-rigid:ico4"]
    R = rotation_matrices(res.rigid_angles)[0]
    assert np.allclose(res.rigid_mesh.vertices, pair.moving.mesh.vertices @ R.T, atol=1e-15)
    assert np.abs(np.linalg.norm(res.moved_mesh.vertices, axis=1) - 1).max() < 1e-12
    assert res.success == (res.fold_count == 0)
    for tr in res.traces:
        assert tr.after.total <= tr.before.total
        assert all(b <= a for a, b in zip(tr.totals, tr.totals[1:]))
    assert res.final_sim <= 0.5 * res.post_rigid_sim


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 50))
def test_sample_rotations_bound(seed, n):
    a = sample_rotations(np.random.default_rng(seed), n, 0.01)
    assert a.shape == (n, 3) and np.abs(a).max() < 0.01


def test_train_rejects_tiny_corpus():
    with pytest.raises(ValueError):
        train(synth_corpus(0, 1, 3), TrainConfig(epochs=1))


def test_train_history_deterministic():
    corpus = synth_corpus(0, 3, 3)
    tc = TrainConfig(epochs=2, widths=(4, 8), heads=1, seed=4)
    rc = RegistrationConfig(levels=(3,), mode="learned")
    (_, h1), (_, h2) = train(corpus, tc, rc), train(corpus, tc, rc)
    assert h1.records == h2.records
    assert {r["net"] for r in h1.records} == {"rigid", "ico3"}


def test_mean_ci_matches_bootstrap():
    rng = np.random.default_rng(0)
    x = rng.gamma(2.0, 0.1, size=30)
    m, lo, hi = mean_ci(x)
    assert m == pytest.approx(x.mean())
    boots = np.array([rng.choice(x, size=30).mean() for _ in range(20000)])
    blo, bhi = np.percentile(boots, [2.5, 97.5])
    assert abs((hi - lo) - (bhi - blo)) / (bhi - blo) < 0.10
    assert abs(lo - blo) < 0.1 * (bhi - blo) and abs(hi - bhi) < 0.1 * (bhi - blo)


def test_aggregate_is_arithmetic_mean(subject):
    pairs = synthetic_suite(n_pairs=2, level=3)
    cfg = RegistrationConfig(levels=(3,))
    results = [register(p.moving, p.fixed, cfg) for p in pairs]
    out = evaluate(pairs, results)
    for key in ("ncc", "final_sim", "areal"):
        vals = [getattr(r, key) for r in out["pairs"]]
        assert out["aggregate"][key][0] == pytest.approx(np.mean(vals), abs=1e-15)


def test_weights_ablation_reaches_the_objective():
    pair = synthetic_suite(n_pairs=1, level=3)[0]
    base = RegistrationConfig(levels=(3,))
    free = RegistrationConfig(levels=(3,), weights=LossWeights().replace(areal=0.0, angle=0.0, dist=0.0))
    a, b = register(pair.moving, pair.fixed, base), register(pair.moving, pair.fixed, free)
    assert b.final_sim < a.final_sim
    assert b.distortion.areal_mean > a.distortion.areal_mean
