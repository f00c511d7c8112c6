"""Minimal reverse-mode tensor engine for 5-axis (N, C, D, H, W) volumes.

Each operation builds a node holding the forward value and a closure that
maps the output gradient to per-parent gradients; backward() walks the
resulting DAG in reverse topological order and accumulates into leaf
gradients (sum over paths). Nodes whose inputs need no gradient drop
their closures, so inference graphs carry no tape overhead.

Compute is f32 by default. Ops take their dtype from the inputs, which
lets the finite-difference checker promote a single tensor to f64 and get
tight difference quotients without touching the rest of the graph.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_MAGIC = b"FDACKPT1"


class Tensor:
    """An ndarray plus an optional gradient buffer and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad of every reachable requires_grad tensor with d(loss)/d(t)."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y)
    return _node(x.data + y.data, (x, y), lambda g: (g, g))


def sub(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y)
    return _node(x.data - y.data, (x, y), lambda g: (g, -g))


def mul(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y)
    xd, yd = x.data, y.data
    return _node(xd * yd, (x, y), lambda g: (g * yd, g * xd))


def smul(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,))


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _node(xd * xd, (x,), lambda g: (g * (2.0 * xd),))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = ((xd >= lo) & (xd <= hi)).astype(xd.dtype)
    return _node(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    pos = xd > 0
    return _node(np.where(pos, xd, 0), (x,), lambda g: (g * pos,))


def prelu(x: Tensor, a: Tensor) -> Tensor:
    """Per-channel parametric ReLU; a has shape (C,)."""
    xd = x.data
    av = a.data.reshape(1, -1, 1, 1, 1)
    pos = xd > 0
    out = np.where(pos, xd, av * xd)

    def bwd(g):
        gx = g * np.where(pos, np.ones((), xd.dtype), av)
        ga = np.sum(g * xd * ~pos, axis=(0, 2, 3, 4))
        return gx, ga

    return _node(out, (x, a), bwd)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    s[~pos] = e / (1.0 + e)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),))


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def concat_channels(x: Tensor, y: Tensor) -> Tensor:
    if x.data.shape[0] != y.data.shape[0] or x.data.shape[2:] != y.data.shape[2:]:
        raise ValueError("concat_channels needs matching batch and spatial dims")
    cx = x.data.shape[1]
    out = np.concatenate([x.data, y.data], axis=1)
    return _node(out, (x, y), lambda g: (g[:, :cx], g[:, cx:]))


def scale_broadcast(x: Tensor, s: Tensor) -> Tensor:
    """Multiply (N, C, D, H, W) by per-(n, c) scales of shape (N, C, 1, 1, 1)."""
    xd, sd = x.data, s.data
    if sd.shape != (xd.shape[0], xd.shape[1], 1, 1, 1):
        raise ValueError(f"scale shape {sd.shape} does not match {xd.shape}")

    def bwd(g):
        return g * sd, np.sum(g * xd, axis=(2, 3, 4), keepdims=True)

    return _node(xd * sd, (x, s), bwd)


def flatten_spatial(x: Tensor) -> Tensor:
    """(N, C, 1, 1, 1) -> (N, C)."""
    n, c = x.data.shape[:2]
    if x.data.shape[2:] != (1, 1, 1):
        raise ValueError("flatten_spatial expects trailing (1, 1, 1) dims")
    return _node(x.data.reshape(n, c), (x,), lambda g: (g.reshape(n, c, 1, 1, 1),))


def unflatten_spatial(x: Tensor) -> Tensor:
    """(N, C) -> (N, C, 1, 1, 1)."""
    n, c = x.data.shape
    return _node(x.data.reshape(n, c, 1, 1, 1), (x,), lambda g: (g.reshape(n, c),))


def sum_all(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.asarray(xd.sum()), (x,),
                 lambda g: (np.broadcast_to(g, xd.shape),))


def mean_all(x: Tensor) -> Tensor:
    xd = x.data
    inv = 1.0 / xd.size
    return _node(np.asarray(xd.mean()), (x,),
                 lambda g: (np.full_like(xd, g * inv),))


# ---------------------------------------------------------------------------
# network layers
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, out_sp: tuple) -> np.ndarray:
    """(C, Dp, Hp, Wp) padded sample -> (k^3 * C, prod(out_sp)) column matrix.

    Copies one shifted block per kernel tap, which keeps the copies long
    and strided instead of gathering the 8-D window view element-wise.
    """
    c = xp.shape[0]
    do, ho, wo = out_sp
    cols = np.empty((k * k * k * c, do * ho * wo), dtype=xp.dtype)
    t = 0
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                src = xp[:, dz:dz + do * stride:stride,
                         dy:dy + ho * stride:stride,
                         dx:dx + wo * stride:stride]
                np.copyto(cols[t * c:(t + 1) * c].reshape(c, do, ho, wo), src)
                t += 1
    return cols


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, Cin, D, H, W) with (Cout, Cin, k, k, k) kernels."""
    xd, wd = x.data, w.data
    if xd.ndim != 5 or wd.ndim != 5:
        raise ValueError("conv3d expects 5-axis input and kernel")
    if xd.shape[1] != wd.shape[1]:
        raise ValueError(f"channel mismatch: input {xd.shape[1]}, kernel {wd.shape[1]}")
    if xd.shape[0] != 1:
        return _conv3d_batched(x, w, b, stride, padding)
    cout, cin, k = wd.shape[0], wd.shape[1], wd.shape[2]
    xp = xd[0]
    if padding:
        xp = np.pad(xp, ((0, 0),) + ((padding, padding),) * 3)
    if any(s < k for s in xp.shape[1:]):
        raise ValueError("conv3d output would be empty")
    out_sp = tuple((s - k) // stride + 1 for s in xp.shape[1:])
    cols = _im2col(xp, k, stride, out_sp)
    wmat = np.ascontiguousarray(wd.transpose(2, 3, 4, 1, 0)).reshape(-1, cout)
    out2d = wmat.T @ cols
    out = out2d.reshape(1, cout, *out_sp)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1, 1)
    del cols  # rebuilt in backward; retaining it would hold ~k^3 x the input

    def bwd(g):
        g2d = np.ascontiguousarray(g[0]).reshape(cout, -1)
        cols = _im2col(xp, k, stride, out_sp)
        gw = (cols @ g2d.T).reshape(k, k, k, cin, cout)
        del cols
        gw = np.ascontiguousarray(gw.transpose(4, 3, 0, 1, 2))
        if stride > 1:
            gd = np.zeros((cout,) + tuple((s - 1) * stride + 1 for s in g.shape[2:]),
                          dtype=g.dtype)
            gd[:, ::stride, ::stride, ::stride] = g[0]
        else:
            gd = g[0]
        pad_sp = tuple(s + 2 * padding for s in xd.shape[2:])
        # rows the strided forward never read get zero gradient: pad extra right
        gp = np.pad(gd, ((0, 0),) + tuple(
            (k - 1, k - 1 + ps - (gs + k - 1))
            for gs, ps in zip(gd.shape[1:], pad_sp)))
        cols_g = _im2col(gp, k, 1, pad_sp)
        wf = wd[:, :, ::-1, ::-1, ::-1]
        wfmat = np.ascontiguousarray(wf.transpose(2, 3, 4, 0, 1)).reshape(-1, cin)
        gx = (wfmat.T @ cols_g).reshape(1, cin, *pad_sp)
        if padding:
            gx = np.ascontiguousarray(
                gx[:, :, padding:-padding, padding:-padding, padding:-padding])
        gb = None if b is None else g.sum(axis=(0, 2, 3, 4))
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bwd)


def _conv3d_batched(x: Tensor, w: Tensor, b: Tensor | None,
                    stride: int, padding: int) -> Tensor:
    xd, wd = x.data, w.data
    k = wd.shape[2]
    xp = np.pad(xd, ((0, 0), (0, 0)) + ((padding, padding),) * 3) if padding else xd
    if any(s < k for s in xp.shape[2:]):
        raise ValueError("conv3d output would be empty")
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    if stride > 1:
        win = win[:, :, ::stride, ::stride, ::stride]
    out = np.ascontiguousarray(
        np.einsum("ncdhwijk,ocijk->nodhw", win, wd, optimize=True))
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1, 1)

    def bwd(g):
        gw = np.einsum("nodhw,ncdhwijk->ocijk", g, win, optimize=True)
        if stride > 1:
            gd = np.zeros(g.shape[:2] + tuple((s - 1) * stride + 1 for s in g.shape[2:]),
                          dtype=g.dtype)
            gd[:, :, ::stride, ::stride, ::stride] = g
        else:
            gd = g
        pad_sp = tuple(s + 2 * padding for s in xd.shape[2:])
        gp = np.pad(gd, ((0, 0), (0, 0)) + tuple(
            (k - 1, k - 1 + ps - (gs + k - 1))
            for gs, ps in zip(gd.shape[2:], pad_sp)))
        wing = sliding_window_view(gp, (k, k, k), axis=(2, 3, 4))
        wflip = wd[:, :, ::-1, ::-1, ::-1]
        gx = np.einsum("nodhwijk,ocijk->ncdhw", wing, wflip, optimize=True)
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding, padding:-padding]
        gx = np.ascontiguousarray(gx)
        gb = None if b is None else g.sum(axis=(0, 2, 3, 4))
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bwd)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor,
                  eps: float = 1e-5) -> Tensor:
    """Per-(n, c) standardization over D*H*W, then per-channel affine."""
    xd = x.data
    mu = xd.mean(axis=(2, 3, 4), keepdims=True)
    xmu = xd - mu
    var = (xmu * xmu).mean(axis=(2, 3, 4), keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    y = xmu * ivar
    gv = gamma.data.reshape(1, -1, 1, 1, 1)
    out = gv * y + beta.data.reshape(1, -1, 1, 1, 1)

    def bwd(g):
        gbeta = g.sum(axis=(0, 2, 3, 4))
        ggamma = (g * y).sum(axis=(0, 2, 3, 4))
        gy = g * gv
        gx = ivar * (gy - gy.mean(axis=(2, 3, 4), keepdims=True)
                     - y * (gy * y).mean(axis=(2, 3, 4), keepdims=True))
        return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    xd = x.data
    m = xd.shape[2] * xd.shape[3] * xd.shape[4]
    out = xd.mean(axis=(2, 3, 4), keepdims=True)
    return _node(out, (x,), lambda g: (np.broadcast_to(g / m, xd.shape),))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on rank-2 input: (N, Fin) @ (Fout, Fin)^T [+ b]."""
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def bwd(g):
        gx = g @ wd
        gw = g.T @ xd
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bwd)


def cse_block(u: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Channel squeeze-and-excitation: gate each channel by a sigmoid score
    computed from its global average (squeeze -> two linear maps -> scale)."""
    z = flatten_spatial(global_avg_pool(u))
    gate = sigmoid(linear(relu(linear(z, w1)), w2))
    return scale_broadcast(u, unflatten_spatial(gate))


def maxpool3d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """2x2x2 max pooling; gradient routes to the first max per window."""
    if k != 2 or stride != 2:
        raise ValueError("maxpool3d supports k=2, stride=2 only")
    xd = x.data
    n, c, d, h, w = xd.shape
    if d % 2 or h % 2 or w % 2:
        raise ValueError(f"maxpool3d needs even spatial dims, got {(d, h, w)}")
    d2, h2, w2 = d // 2, h // 2, w // 2
    blocks = xd.reshape(n, c, d2, 2, h2, 2, w2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d2, h2, w2, 8)
    am = np.argmax(blocks, axis=-1)  # first occurrence wins ties
    out = np.take_along_axis(blocks, am[..., None], axis=-1)[..., 0]

    def bwd(g):
        gb = np.zeros((n, c, d2, h2, w2, 8), dtype=g.dtype)
        np.put_along_axis(gb, am[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, d2, h2, w2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (np.ascontiguousarray(gb.reshape(n, c, d, h, w)),)

    return _node(out, (x,), bwd)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    xd = x.data
    out = xd.repeat(factor, axis=2).repeat(factor, axis=3).repeat(factor, axis=4)
    n, c, d, h, w = xd.shape
    f = factor

    def bwd(g):
        return (g.reshape(n, c, d, f, h, f, w, f).sum(axis=(3, 5, 7)),)

    return _node(out, (x,), bwd)


def _same_shape(x: Tensor, y: Tensor):
    if x.data.shape != y.data.shape:
        raise ValueError(f"shape mismatch: {x.data.shape} vs {y.data.shape}")


# ---------------------------------------------------------------------------
# parameters, initialization, checkpoints
# ---------------------------------------------------------------------------

class ParamStore:
    """Ordered name -> Tensor map of learnable arrays."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())


def glorot_uniform(shape, fan_in, fan_out, rng) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def save_checkpoint(path: str, store: ParamStore, step: int = 0,
                    moments: dict | None = None, extra: dict | None = None) -> None:
    """Single-file checkpoint: magic, manifest length, JSON manifest, then
    per parameter (in manifest order) the f32 value blob followed by the
    two f32 Adam moment blobs (zeros when untrained)."""
    manifest = {
        "version": 1,
        "step": int(step),
        "params": [{"name": n, "shape": list(t.data.shape)} for n, t in store.items()],
    }
    if extra:
        manifest["extra"] = extra
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        for name, t in store.items():
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            f.write(arr.tobytes())
            if moments and name in moments:
                m, v = moments[name]
            else:
                m = v = np.zeros_like(arr)
            f.write(np.ascontiguousarray(m, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str):
    """Returns (manifest, params dict, moments dict)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        params, moments = {}, {}
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            blobs = []
            for _ in range(3):
                buf = f.read(4 * count)
                if len(buf) != 4 * count:
                    raise ValueError(f"{path}: truncated blob for {entry['name']}")
                blobs.append(np.frombuffer(buf, dtype="<f4").reshape(shape).copy())
            params[entry["name"]] = blobs[0]
            moments[entry["name"]] = (blobs[1], blobs[2])
    return manifest, params, moments


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn, wrt: dict[str, Tensor], n_samples: int = 64,
               h: float = 1e-3, tol: float = 1e-3, seed: int = 0,
               refine: tuple = (1e-5, 1e-7)) -> dict:
    """Compare analytic gradients of scalar fn() against central differences.

    Runs in the engine's f64 check mode: every checked tensor is promoted
    to f64 for the whole check (ops propagate the dtype), so both the
    analytic gradients and the difference quotients are evaluated on the
    same promoted function without f32 rounding swamping the comparison.

    A coordinate failing at the base step size is retried at the `refine`
    steps: stepping across a pReLU/maxpool kink contaminates the quotient
    at any h larger than the distance to the kink, while a genuinely wrong
    gradient fails at every step size.

    Relative error per coordinate: |a - c| / max(1e-8, |a| + |c|).
    """
    rng = np.random.default_rng(seed)
    originals = {name: t.data for name, t in wrt.items()}
    try:
        for name, t in wrt.items():
            t.data = t.data.astype(np.float64)
            t.grad = None
        y = fn()
        if y.data.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        backward(y)
        analytic = {name: (np.zeros_like(t.data) if t.grad is None
                           else np.asarray(t.grad, dtype=np.float64).copy())
                    for name, t in wrt.items()}

        report = {"h": h, "tol": tol, "tensors": {}, "passed": True}
        for name, t in wrt.items():
            size = t.data.size
            n = min(n_samples, size)
            coords = rng.choice(size, size=n, replace=False)
            max_err = 0.0
            flat = t.data.reshape(-1)
            a_flat = analytic[name].reshape(-1)
            for c in coords:
                keep = flat[c]
                a = a_flat[c]
                err = np.inf
                for step in (h,) + tuple(refine):
                    flat[c] = keep + step
                    yp = float(fn().data)
                    flat[c] = keep - step
                    ym = float(fn().data)
                    flat[c] = keep
                    fd = (yp - ym) / (2.0 * step)
                    err = min(err, abs(a - fd) / max(1e-8, abs(a) + abs(fd)))
                    if err <= tol:
                        break
                max_err = max(max_err, err)
            ok = max_err <= tol
            report["tensors"][name] = {"max_rel_err": float(max_err), "n": int(n),
                                       "passed": bool(ok)}
            report["passed"] = bool(report["passed"] and ok)
        return report
    finally:
        for name, t in wrt.items():
            t.data = originals[name]
            t.grad = None
