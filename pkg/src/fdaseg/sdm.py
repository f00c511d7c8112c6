"""Exact 3D signed Euclidean distance maps for binary masks.

The unsigned squared distance to the airway surface is computed with the
separable lower-envelope transform (one 1D parabola-envelope pass per
axis), which is exact in integer voxel units. The sign convention:

  0   on surface voxels (foreground with a background 6-neighbor,
      volume faces counting as background)
  < 0 strictly inside the airway
  > 0 outside

Normalization divides each side by its own maximum magnitude so both
extremes -1 and +1 are attained whenever both sides are non-degenerate;
the zero level set is untouched. A single shared scale is available via
mode="single".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volcore import Volume

_INF = np.int64(2) ** 62


class SdmError(ValueError):
    pass


@dataclass
class SdmVolume:
    volume: Volume  # kind "sdm", values in [-1, 1]
    max_in: float   # largest unsigned interior distance before normalization
    max_out: float  # largest exterior distance before normalization


def extract_surface(mask: np.ndarray) -> np.ndarray:
    """Boolean volume of foreground voxels with >= 1 background 6-neighbor.

    Faces of the volume count as background, so foreground touching the
    boundary is surface.
    """
    m = np.asarray(mask) != 0
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    has_bg = np.zeros_like(m)
    core = (slice(1, -1),) * 3
    for axis in range(3):
        for shift in (-1, 1):
            has_bg |= ~np.roll(padded, shift, axis=axis)[core]
    return m & has_bg


def _dt1d(f: np.ndarray) -> np.ndarray:
    """Exact 1D squared-distance transform of a sampled function.

    f[i] is the squared distance already accrued at position i (INF where
    no site exists). Returns min_j f[j] + (i - j)^2 via the lower envelope
    of the parabolas j -> f[j] + (i - j)^2.
    """
    n = f.shape[0]
    fin = [i for i in range(n) if f[i] < _INF]
    if not fin:
        return f.copy()
    v = [fin[0]]                 # parabola apex positions on the envelope
    z = [-np.inf, np.inf]        # envelope segment boundaries
    for q in fin[1:]:
        fq = int(f[q]) + q * q
        while True:
            p = v[-1]
            s = (fq - (int(f[p]) + p * p)) / (2.0 * (q - p))
            if s <= z[-2]:
                v.pop()
                z.pop()
            else:
                break
        v.append(q)
        z[-1] = s
        z.append(np.inf)
    out = np.empty(n, dtype=np.int64)
    k = 0
    for i in range(n):
        while z[k + 1] < i:
            k += 1
        d = i - v[k]
        out[i] = d * d + int(f[v[k]])
    return out


def _dt1d_weighted(f: np.ndarray, step: float) -> np.ndarray:
    """Float variant of _dt1d with physical spacing `step` between samples."""
    n = f.shape[0]
    fin = [i for i in range(n) if np.isfinite(f[i])]
    if not fin:
        return f.copy()
    s2 = step * step
    v = [fin[0]]
    z = [-np.inf, np.inf]
    for q in fin[1:]:
        fq = f[q] + s2 * q * q
        while True:
            p = v[-1]
            s = (fq - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p))
            if s <= z[-2]:
                v.pop()
                z.pop()
            else:
                break
        v.append(q)
        z[-1] = s
        z.append(np.inf)
    out = np.empty(n, dtype=np.float64)
    k = 0
    for i in range(n):
        while z[k + 1] < i:
            k += 1
        d = i - v[k]
        out[i] = s2 * d * d + f[v[k]]
    return out


def squared_edt(sites: np.ndarray, spacing=None) -> np.ndarray:
    """Squared Euclidean distance from every voxel to the nearest site voxel.

    Integer-exact when spacing is None (voxel units); float64 otherwise.
    """
    sites = np.asarray(sites) != 0
    if not sites.any():
        raise SdmError("squared_edt needs at least one site voxel")
    if spacing is None:
        g = np.where(sites, np.int64(0), _INF)
        for axis in range(3):
            # contiguous copy: reshape of a moveaxis view would not alias g
            moved = np.ascontiguousarray(np.moveaxis(g, axis, -1))
            flat = moved.reshape(-1, moved.shape[-1])
            for row in range(flat.shape[0]):
                flat[row] = _dt1d(flat[row])
            g = np.moveaxis(moved, -1, axis)
        return np.ascontiguousarray(g)
    g = np.where(sites, 0.0, np.inf)
    for axis, step in zip(range(3), spacing):
        moved = np.ascontiguousarray(np.moveaxis(g, axis, -1))
        flat = moved.reshape(-1, moved.shape[-1])
        for row in range(flat.shape[0]):
            flat[row] = _dt1d_weighted(flat[row], float(step))
        g = np.moveaxis(moved, -1, axis)
    return np.ascontiguousarray(g)


def sdm_normalize(raw: np.ndarray, mode: str = "two_sided"):
    """Scale a raw signed distance map into [-1, 1].

    Returns (normalized f32 array, max_in, max_out). Degenerate sides
    (no interior, or no exterior) are left alone: no values exist there.
    """
    raw = np.asarray(raw, dtype=np.float64)
    neg = raw < 0
    pos = raw > 0
    max_in = float(-raw[neg].min()) if neg.any() else 0.0
    max_out = float(raw[pos].max()) if pos.any() else 0.0
    out = raw.copy()
    if mode == "two_sided":
        if max_in > 0:
            out[neg] = raw[neg] / max_in
        if max_out > 0:
            out[pos] = raw[pos] / max_out
    elif mode == "single":
        scale = max(max_in, max_out)
        if scale > 0:
            out = raw / scale
    else:
        raise SdmError(f"unknown normalization mode {mode!r}")
    return out.astype(np.float32), max_in, max_out


def sdm_compute(mask: Volume, spacing_aware: bool = False,
                mode: str = "two_sided") -> SdmVolume:
    """Signed, normalized Euclidean distance map of a mask volume."""
    m = mask.data != 0
    if not m.any():
        raise SdmError("mask has no foreground; SDM undefined")
    surface = extract_surface(m)
    spacing = mask.spacing if spacing_aware else None
    sq = squared_edt(surface, spacing=spacing)
    dist = np.sqrt(sq.astype(np.float64))
    raw = np.where(m, -dist, dist)
    raw[surface] = 0.0
    normalized, max_in, max_out = sdm_normalize(raw, mode=mode)
    vol = Volume(data=normalized, spacing=mask.spacing, kind="sdm",
                 aux={"max_in": max_in, "max_out": max_out})
    return SdmVolume(volume=vol, max_in=max_in, max_out=max_out)


def sdm_target(mask_patch: np.ndarray, mode: str = "two_sided") -> np.ndarray:
    """Normalized SDM of a raw binary array, for per-crop training targets."""
    m = np.asarray(mask_patch) != 0
    if not m.any():
        raise SdmError("mask patch has no foreground; SDM undefined")
    surface = extract_surface(m)
    dist = np.sqrt(squared_edt(surface).astype(np.float64))
    raw = np.where(m, -dist, dist)
    raw[surface] = 0.0
    return sdm_normalize(raw, mode=mode)[0]
