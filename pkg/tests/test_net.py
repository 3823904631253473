import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import FD_TOL, fd_check_params, tiny_model_problem
from spherereg.mesh import build_icosphere
from spherereg.net import (
    SGAT,
    GATLayer,
    ModelBundle,
    SgatConfig,
    adjacency_edges,
    attention_coefficients,
    dumps,
    gat_layer_forward,
    graph_edges,
    loads,
    param_gradients,
    pool,
    sgat_forward,
    unpool,
)

PATH = [[1], [0, 2], [1]]


def layer_with(W, a, heads=1, concat=True, slope=0.2):
    W = torch.as_tensor(W, dtype=torch.float64)
    a = torch.as_tensor(a, dtype=torch.float64)
    in_dim = W.shape[-1] // 2
    layer = GATLayer(in_dim, W.shape[-2] * (heads if concat else 1), heads, concat, slope)
    with torch.no_grad():
        layer.W.copy_(W.reshape(layer.W.shape))
        layer.a.copy_(a.reshape(layer.a.shape))
    return layer


def hand_path(W, a, h, slope=0.2):
    """Scores, softmax and messages written out for the 3-vertex path graph, F = F' = 1."""
    lrelu = lambda z: z if z >= 0 else slope * z  # noqa: E731
    alphas, outs = {}, []
    for i, nb in enumerate(PATH):
        js = [i, *nb]
        e = [a * lrelu(W[0] * h[i] + W[1] * h[j]) for j in js]
        z = sum(math.exp(x) for x in e)
        outs.append(sum(math.exp(x) / z * W[1] * h[j] for x, j in zip(e, js)))
        alphas.update({(j, i): math.exp(x) / z for x, j in zip(e, js)})
    return alphas, outs


@pytest.mark.parametrize("W,a", [((1.0, 0.0), 1.0), ((0.5, -1.0), 2.0), ((-0.3, 0.8), -1.5)])
def test_path_graph_hand_case(W, a):
    src, dst = adjacency_edges(PATH)
    h = torch.tensor([[0.0], [1.0], [2.0]], dtype=torch.float64)
    layer = layer_with([[W]], [[a]])
    alpha = attention_coefficients(layer, h, src, dst)[:, 0].detach()
    out = gat_layer_forward(layer, h, src, dst)[:, 0].detach()
    hand_alpha, hand_out = hand_path(W, a, [0.0, 1.0, 2.0])
    for e, (s, d) in enumerate(zip(src.tolist(), dst.tolist())):
        assert float(alpha[e]) == pytest.approx(hand_alpha[(s, d)], abs=1e-15)
    assert out.numpy() == pytest.approx(hand_out, abs=1e-15)


def test_first_hand_case_is_uniform():
    src, dst = adjacency_edges(PATH)
    h = torch.tensor([[0.0], [1.0], [2.0]], dtype=torch.float64)
    alpha = attention_coefficients(layer_with([[[1.0, 0.0]]], [[1.0]]), h, src, dst)[:, 0].detach()
    # scores depend only on the centre, so every neighbourhood is uniform
    expect = [1 / (len(PATH[d]) + 1) for d in dst.tolist()]
    assert alpha.numpy() == pytest.approx(expect, abs=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3))
def test_softmax_normalised(seed, heads):
    src, dst = graph_edges(2)
    layer = GATLayer(5, 4 * heads, heads, True)
    layer.reset(torch.Generator().manual_seed(seed))
    h = torch.from_numpy(np.random.default_rng(seed).normal(size=(162, 5)) * 3)
    alpha = attention_coefficients(layer, h, src, dst)
    sums = torch.zeros(162, heads, dtype=torch.float64).index_add_(0, dst, alpha)
    assert torch.abs(sums - 1).max() < 1e-9


def test_zero_attention_vector_is_uniform_and_averages():
    src, dst = graph_edges(2)
    layer = GATLayer(3, 2, 1, True)
    layer.reset(torch.Generator().manual_seed(0))
    with torch.no_grad():
        layer.a.zero_()
    h = torch.from_numpy(np.random.default_rng(0).normal(size=(162, 3)))
    alpha = attention_coefficients(layer, h, src, dst)[:, 0]
    deg = torch.bincount(dst).to(torch.float64)
    assert torch.abs(alpha - 1 / deg[dst]).max() < 1e-15
    c = torch.tensor([0.7, -1.2, 2.0], dtype=torch.float64)
    out = gat_layer_forward(layer, c.expand(162, 3), src, dst)
    expect = layer.W[0, :, 3:] @ c
    assert torch.abs(out - expect).max() < 1e-12


def test_permutation_equivariance():
    src, dst = graph_edges(2)
    layer = GATLayer(3, 6, 2, True)
    layer.reset(torch.Generator().manual_seed(1))
    h = torch.from_numpy(np.random.default_rng(1).normal(size=(162, 3)))
    perm = torch.from_numpy(np.random.default_rng(2).permutation(162))
    inv = torch.argsort(perm)
    out = gat_layer_forward(layer, h, src, dst)
    out_p = gat_layer_forward(layer, h[perm], inv[src], inv[dst])
    assert torch.abs(out_p - out[perm]).max() < 1e-12


def test_shape_mismatch_rejected():
    src, dst = graph_edges(1)
    layer = GATLayer(3, 4, 2, True)
    with pytest.raises(ValueError):
        gat_layer_forward(layer, torch.zeros(42, 2), src, dst)
    with pytest.raises(ValueError):
        gat_layer_forward(layer, torch.zeros(12, 3), src, dst)
    with pytest.raises(ValueError):
        GATLayer(3, 5, 2, True)


def test_pool_examples():
    c = torch.full((2562, 2), 1.5, dtype=torch.float64)
    assert torch.equal(pool(c, 4), torch.full((642, 2), 1.5, dtype=torch.float64))
    assert torch.allclose(unpool(pool(c, 4), 4), c, atol=0)
    fine = build_icosphere(4).mesh
    x = torch.from_numpy(fine.vertices[:, :1].copy())
    pooled = pool(x, 4)[:, 0].numpy()
    for i in range(642):
        ring = fine.one_ring[i]
        oracle = (fine.vertices[i, 0] + fine.vertices[ring, 0].sum()) / (len(ring) + 1)
        assert pooled[i] == pytest.approx(oracle, abs=1e-15)


def test_unpool_examples():
    ico = build_icosphere(3)
    c = torch.full((162, 1), -0.25, dtype=torch.float64)
    assert torch.equal(unpool(c, 3), torch.full((642, 1), -0.25, dtype=torch.float64))
    a, b = ico.parent_vertex_pairs[0]
    h = torch.zeros(162, 1, dtype=torch.float64)
    h[a], h[b] = 0.0, 2.0
    assert float(unpool(h, 3)[162, 0]) == 1.0
    assert float(unpool(h, 3)[a, 0]) == 0.0 and float(unpool(h, 3)[b, 0]) == 2.0


def test_sgat_output_shapes_and_zero_head():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2562, 1))
    m = SGAT(SgatConfig(4, widths=(8, 16), heads=2))
    f = sgat_forward(m, x, x)
    assert f.angles.shape == (2562, 3)
    assert np.all(f.angles == 0)
    g = SGAT(SgatConfig(4, widths=(8, 16), heads=2, output_mode="global"))
    assert sgat_forward(g, x, x).angles.shape == (1, 3)
    with pytest.raises(ValueError):
        sgat_forward(m, x[:100], x[:100])


def test_config_validation():
    assert SgatConfig(3, feature_channels=2).input_channels == 2 * (2 + 18)
    with pytest.raises(ValueError):
        SgatConfig(1, widths=(4, 8, 16))
    with pytest.raises(ValueError):
        SgatConfig(3, output_mode="both")


def test_independent_parameter_has_zero_gradient():
    m = SGAT(SgatConfig(2, widths=(4, 8), heads=1))
    g = param_gradients(m, lambda net: (net.head.bias**2).sum() + 1.0)
    assert all(np.all(v == 0) for k, v in g.items() if k != "head.bias")


@pytest.mark.parametrize("seed", range(3))
def test_parameter_gradients_match_finite_differences(seed):
    model, loss_fn, signature = tiny_model_problem(seed)
    worst, checked = fd_check_params(model, loss_fn, np.random.default_rng(seed), 4, signature)
    assert checked >= 10
    assert worst < FD_TOL


def test_gradients_deterministic():
    runs = []
    for _ in range(2):
        model, loss_fn, _ = tiny_model_problem(5)
        runs.append(param_gradients(model, loss_fn))
    for k in runs[0]:
        assert np.array_equal(runs[0][k], runs[1][k])


def test_checkpoint_round_trip():
    nets = {"rigid": SGAT(SgatConfig(3, widths=(4, 8), heads=2, output_mode="global"), seed=1),
            "ico3": SGAT(SgatConfig(3, widths=(4, 8), heads=2), seed=2)}
    with torch.no_grad():
        for net in nets.values():
            net.head.weight.normal_(generator=torch.Generator().manual_seed(3))
    blob = dumps(ModelBundle(nets, {"levels": [3]}))
    back = loads(blob)
    assert dumps(back) == blob
    x = np.random.default_rng(0).normal(size=(642, 1))
    for k in nets:
        assert np.array_equal(sgat_forward(nets[k], x, x).angles, sgat_forward(back.nets[k], x, x).angles)
    with pytest.raises(ValueError):
        loads(b"NOPE\n" + blob)
    with pytest.raises(ValueError):
        loads(blob[:-8])
