"""Independent oracles shared by the unit and acceptance suites."""

import numpy as np

from spherereg.interp import build_locator
from spherereg.loss import Objective, LossWeights
from spherereg.mesh import build_icosphere
from spherereg.synth import harmonic_field, random_coefficients, smooth_euler_field

FD_STEP = 1e-5
FD_TOL = 1e-3
FD_FLOOR = 1e-8


def angle_objective(seed: int, level: int = 3, weights: LossWeights | None = None) -> tuple[Objective, np.ndarray]:
    """Random non-rigid objective on ico_level and a random smooth field near identity."""
    rng = np.random.default_rng(seed)
    m = build_icosphere(level).mesh
    coef_f = random_coefficients(rng, 1, 6)
    fixed = harmonic_field(m.vertices, coef_f)
    moving = fixed + 0.3 * harmonic_field(m.vertices, random_coefficients(rng, 1, 4))
    weights = weights or LossWeights()
    obj = Objective(m, moving, build_locator(m), fixed, weights.at(level))
    field = smooth_euler_field(m.vertices, rng, 0.05) + 0.002 * rng.normal(size=(m.n_vertices, 3))
    return obj, field


def fd_check_angles(obj: Objective, x: np.ndarray, rng, n_components: int = 24):
    """Central differences on random components that stay on one smooth piece.

    Located faces are frozen at ``x`` (they are piecewise constant), and a
    component is skipped when either probe crosses an absolute-value or fold
    branch. Returns ``(max_rel_err, n_checked)``.
    """
    faces = obj.locate(obj.moved(x).detach())
    _, g = obj.value_and_grad(x, faces)
    sig0 = obj.branch_signature(x)
    flat = x.reshape(-1)
    worst, checked = 0.0, 0
    for k in rng.choice(flat.size, size=min(n_components, flat.size), replace=False):
        if abs(g.flat[k]) < FD_FLOOR:
            continue
        xp, xm = flat.copy(), flat.copy()
        xp[k] += FD_STEP
        xm[k] -= FD_STEP
        xp, xm = xp.reshape(x.shape), xm.reshape(x.shape)
        if not (np.array_equal(obj.branch_signature(xp), sig0) and np.array_equal(obj.branch_signature(xm), sig0)):
            continue
        fp = float(obj.evaluate(xp, faces)["total"])
        fm = float(obj.evaluate(xm, faces)["total"])
        fd = (fp - fm) / (2 * FD_STEP)
        worst = max(worst, abs(fd - g.flat[k]) / max(abs(fd), abs(g.flat[k])))
        checked += 1
    return worst, checked


def fd_check_params(model, loss_fn, rng, n_components: int = 6, signature=None):
    """Central differences on random entries of every parameter tensor.

    ``signature(model)`` (optional) names the smooth piece; probes that change
    it are skipped like in ``fd_check_angles``.
    """
    import torch

    from spherereg.net import param_gradients

    grads = param_gradients(model, loss_fn)
    sig0 = None if signature is None else signature(model)
    worst, checked = 0.0, 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            for k in rng.choice(flat.numel(), size=min(n_components, flat.numel()), replace=False):
                a = float(grads[name].reshape(-1)[k])
                if abs(a) < FD_FLOOR:
                    continue
                old = float(flat[k])
                flat[k] = old + FD_STEP
                fp = float(loss_fn(model))
                same = sig0 is None or np.array_equal(signature(model), sig0)
                flat[k] = old - FD_STEP
                fm = float(loss_fn(model))
                same = same and (sig0 is None or np.array_equal(signature(model), sig0))
                flat[k] = old
                if not same:
                    continue
                fd = (fp - fm) / (2 * FD_STEP)
                worst = max(worst, abs(fd - a) / max(abs(fd), abs(a)))
                checked += 1
    return worst, checked


def icc_anova(X: np.ndarray) -> float:
    """ICC(1,1) for one vertex from an explicit one-way ANOVA table; X is (subjects, sessions)."""
    n, k = X.shape
    grand = sum(sum(row) for row in X) / (n * k)
    ss_between = sum(k * (sum(row) / k - grand) ** 2 for row in X)
    ss_within = sum(sum((x - sum(row) / k) ** 2 for x in row) for row in X)
    msb = ss_between / (n - 1)
    msw = ss_within / (n * (k - 1))
    return (msb - msw) / (msb + (k - 1) * msw)


def tiny_model_problem(seed: int, level: int = 2, channels: int = 2):
    """Tiny S-GAT with a random (non-zero) head plus a loss of its predicted field.

    Returns ``(model, loss_fn, signature)``; the loss freezes the located faces
    of the initial prediction so it is smooth piecewise like the angle case.
    """
    import torch

    from spherereg.net import SGAT, SgatConfig, build_inputs, positional_features

    rng = np.random.default_rng(seed)
    m = build_icosphere(level).mesh
    fixed = np.stack([harmonic_field(m.vertices, random_coefficients(rng, 1, 3)) for _ in range(channels)], 1)
    moving = fixed + 0.3 * rng.normal(size=fixed.shape)
    model = SGAT(SgatConfig(level, feature_channels=channels, widths=(4, 8), heads=1), seed=seed)
    with torch.no_grad():
        model.head.weight.copy_(torch.from_numpy(0.05 * rng.normal(size=(3, model.head.in_features))))
        model.head.bias.copy_(torch.from_numpy(0.01 * rng.normal(size=3)))
    x = build_inputs(moving, fixed, positional_features(level))
    obj = Objective(m, moving, build_locator(m), fixed, LossWeights().at(3))
    with torch.no_grad():
        faces = obj.locate(obj.moved(model(x)))

    def loss_fn(net):
        return obj.evaluate(net(x), faces)["total"]

    def signature(net):
        # loss branches plus the sign of every LeakyReLU input inside the network
        trace = []
        with torch.no_grad():
            out = net(x, trace=trace)
        inner = [np.sign(t.numpy()).ravel() for t in trace]
        return np.concatenate([obj.branch_signature(out.numpy()), *inner])

    return model, loss_fn, signature
