"""Registered finite-difference checks for every differentiable piece.

Used by the `gradcheck` CLI command and the acceptance suite. Each check
builds a scalar-valued function of one or more tensors and compares the
engine's gradients against central differences.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses
from .model import FdaConfig, FdaModel


def _t(rng, shape, lo=-1.0, hi=1.0):
    return ad.tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def primitive_checks(seed: int = 0, n_samples: int = 64, tol: float = 1e-3):
    """Yields (name, grad_check report) for every engine primitive."""
    rng = np.random.default_rng(seed)

    x = _t(rng, (1, 2, 4, 4, 4))
    w = _t(rng, (3, 2, 3, 3, 3))
    b = _t(rng, (3,))
    yield "conv3d", ad.grad_check(
        lambda: ad.sum_all(ad.tanh(ad.conv3d(x, w, b, padding=1))),
        {"x": x, "w": w, "b": b}, n_samples, tol=tol, seed=seed)

    xb = _t(rng, (2, 2, 4, 4, 4))
    yield "conv3d_batched", ad.grad_check(
        lambda: ad.sum_all(ad.tanh(ad.conv3d(xb, w, b, stride=2, padding=1))),
        {"x": xb, "w": w, "b": b}, n_samples, tol=tol, seed=seed)

    x = _t(rng, (2, 3, 4, 4, 4))
    gam = _t(rng, (3,), 0.5, 1.5)
    bet = _t(rng, (3,))
    yield "instance_norm", ad.grad_check(
        lambda: ad.sum_all(ad.tanh(ad.instance_norm(x, gam, bet))),
        {"x": x, "gamma": gam, "beta": bet}, n_samples, tol=tol, seed=seed)

    x = _t(rng, (2, 3, 4, 4, 4))
    a = _t(rng, (3,), 0.1, 0.4)
    yield "prelu", ad.grad_check(
        lambda: ad.sum_all(ad.square(ad.prelu(x, a))),
        {"x": x, "a": a}, n_samples, tol=tol, seed=seed)

    for name, op in (("relu", ad.relu), ("sigmoid", ad.sigmoid), ("tanh", ad.tanh)):
        x = _t(rng, (2, 2, 3, 3, 3))
        yield name, ad.grad_check(
            lambda op=op, x=x: ad.sum_all(ad.square(op(x))),
            {"x": x}, n_samples, tol=tol, seed=seed)

    x = _t(rng, (2, 3, 4, 4, 4))
    yield "global_avg_pool", ad.grad_check(
        lambda: ad.sum_all(ad.square(ad.global_avg_pool(x))),
        {"x": x}, n_samples, tol=tol, seed=seed)

    x2 = _t(rng, (4, 6))
    lw = _t(rng, (3, 6))
    lb = _t(rng, (3,))
    yield "linear", ad.grad_check(
        lambda: ad.sum_all(ad.tanh(ad.linear(x2, lw, lb))),
        {"x": x2, "w": lw, "b": lb}, n_samples, tol=tol, seed=seed)

    u = _t(rng, (2, 4, 3, 3, 3))
    w1 = _t(rng, (2, 4))
    w2 = _t(rng, (4, 2))
    yield "cse_block", ad.grad_check(
        lambda: ad.sum_all(ad.square(ad.cse_block(u, w1, w2))),
        {"u": u, "w1": w1, "w2": w2}, n_samples, tol=tol, seed=seed)

    x = _t(rng, (2, 2, 4, 4, 4))
    yield "maxpool3d", ad.grad_check(
        lambda: ad.sum_all(ad.square(ad.maxpool3d(x))),
        {"x": x}, n_samples, tol=tol, seed=seed)

    x = _t(rng, (2, 2, 3, 3, 3))
    yield "upsample_nearest", ad.grad_check(
        lambda: ad.sum_all(ad.square(ad.upsample_nearest(x))),
        {"x": x}, n_samples, tol=tol, seed=seed)

    x = _t(rng, (2, 2, 3, 3, 3))
    y = _t(rng, (2, 2, 3, 3, 3))
    yield "add", ad.grad_check(
        lambda: ad.sum_all(ad.square(ad.add(x, y))),
        {"x": x, "y": y}, n_samples, tol=tol, seed=seed)
    yield "mul", ad.grad_check(
        lambda: ad.sum_all(ad.tanh(ad.mul(x, y))),
        {"x": x, "y": y}, n_samples, tol=tol, seed=seed)
    yield "concat_channels", ad.grad_check(
        lambda: ad.sum_all(ad.square(ad.concat_channels(x, y))),
        {"x": x, "y": y}, n_samples, tol=tol, seed=seed)

    x = _t(rng, (2, 3, 4, 4, 4))
    s = _t(rng, (2, 3, 1, 1, 1), 0.2, 1.5)
    yield "scale_broadcast", ad.grad_check(
        lambda: ad.sum_all(ad.square(ad.scale_broadcast(x, s))),
        {"x": x, "s": s}, n_samples, tol=tol, seed=seed)

    f = _t(rng, (1, 1, 4, 4, 4), -0.9, 0.9)
    y = _t(rng, (1, 1, 4, 4, 4), -0.9, 0.9)
    for red in ("mean", "sum"):
        yield f"l_reg[{red}]", ad.grad_check(
            lambda red=red: losses.l_reg(f, y, losses.LossConfig(reduction=red)),
            {"f": f, "y": y}, n_samples, tol=tol, seed=seed)

    p = _t(rng, (1, 1, 4, 4, 4), 0.05, 0.95)
    g = ad.tensor((rng.random((1, 1, 4, 4, 4)) < 0.4).astype(np.float32))
    for two_sided in (True, False):
        cfg = losses.LossConfig(focal_two_sided=two_sided)
        yield f"l_seg[two_sided={two_sided}]", ad.grad_check(
            lambda cfg=cfg: losses.l_seg(p, g, cfg),
            {"p": p}, n_samples, tol=tol, seed=seed)


def composed_checks(seed: int = 0, n_samples: int = 64, tol: float = 1e-3):
    """End-to-end checks through both forward passes on a tiny input."""
    rng = np.random.default_rng(seed)
    cfg = FdaConfig.toy()
    model = FdaModel(cfg, init_seed=seed)
    x = ad.tensor(rng.uniform(0.0, 1.0, size=(1, 1, 8, 8, 8)).astype(np.float32),
                  requires_grad=True)
    s = model.store

    wrt_clean = {
        "x": x,
        "enc_clean.L0.conv1.w": s["enc_clean.L0.conv1.w"],
        "cse.L3.w2": s["cse.L3.w2"],
        "dec_clean.U0.block.conv2.w": s["dec_clean.U0.block.conv2.w"],
        "dec_clean.head.w": s["dec_clean.head.w"],
    }
    yield "forward_clean", ad.grad_check(
        lambda: ad.sum_all(model.forward_clean(x)),
        wrt_clean, n_samples, tol=tol, seed=seed)

    wrt_noisy = {
        "x": x,
        "enc_clean.L1.conv2.w": s["enc_clean.L1.conv2.w"],
        "enc_noisy.L0.conv1.w": s["enc_noisy.L0.conv1.w"],
        "proj.L2.noisy.w": s["proj.L2.noisy.w"],
        "dec_mix.head.w": s["dec_mix.head.w"],
    }
    yield "forward_noisy", ad.grad_check(
        lambda: ad.sum_all(model.forward_noisy(x)),
        wrt_noisy, n_samples, tol=tol, seed=seed)


def run_all(seed: int = 0, n_samples: int = 64, tol: float = 1e-3):
    """Full suite; returns (list of (name, report), all_passed)."""
    results = list(primitive_checks(seed, n_samples, tol))
    results.extend(composed_checks(seed, n_samples, tol))
    return results, all(rep["passed"] for _, rep in results)
