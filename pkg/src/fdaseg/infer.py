"""Sliding-window whole-volume prediction and post-processing.

Tile origins sit at multiples of the stride with the final tile clamped
flush against each volume edge; overlapping probabilities are averaged
with per-voxel coverage counts. Tiles are reduced in sorted-origin order
into an f64 accumulator, so the result is bit-identical no matter which
order the tiles were evaluated in.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from . import autodiff as ad
from .model import FdaModel
from .volcore import Volume, largest_component


@dataclass
class InferConfig:
    patch_shape: tuple[int, int, int] = (32, 32, 32)
    stride: tuple[int, int, int] | None = None  # default: patch // 2
    threshold: float = 0.5
    overlap: str = "mean"
    connectivity: int = 26

    def __post_init__(self):
        self.patch_shape = tuple(int(n) for n in self.patch_shape)
        if self.stride is None:
            self.stride = tuple(max(1, p // 2) for p in self.patch_shape)
        else:
            self.stride = tuple(int(s) for s in self.stride)
        if any(s > p for s, p in zip(self.stride, self.patch_shape)):
            raise ValueError(f"stride {self.stride} exceeds patch {self.patch_shape}")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError("threshold must lie in (0, 1)")
        if self.overlap != "mean":
            raise ValueError(f"unsupported overlap reduction {self.overlap!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "InferConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown infer config fields: {sorted(unknown)}")
        kwargs = dict(d)
        if "patch_shape" in kwargs:
            kwargs["patch_shape"] = tuple(kwargs["patch_shape"])
        if kwargs.get("stride") is not None:
            kwargs["stride"] = tuple(kwargs["stride"])
        return cls(**kwargs)


def _axis_origins(dim: int, patch: int, stride: int) -> list[int]:
    origins = list(range(0, dim - patch + 1, stride))
    if origins[-1] != dim - patch:
        origins.append(dim - patch)
    return origins


def sliding_window_predict(model: FdaModel, image: Volume, cfg: InferConfig,
                           tile_order: list | None = None) -> Volume:
    """Probability volume from forward_noisy over overlapping tiles.

    `tile_order` (a permutation of the tile origin triples) only changes
    evaluation order, never the result. Volumes smaller than the patch are
    reflect-padded, predicted once, and cropped back.
    """
    data = image.data.astype(np.float32)
    shape = data.shape
    patch = cfg.patch_shape

    pad = [(0, max(0, p - n)) for n, p in zip(shape, patch)]
    if any(p[1] for p in pad):
        data = np.pad(data, pad, mode="reflect")

    origins = [
        _axis_origins(n, p, s)
        for n, p, s in zip(data.shape, patch, cfg.stride)
    ]
    tiles = list(product(*origins))
    order = tiles if tile_order is None else list(tile_order)
    if sorted(order) != sorted(tiles):
        raise ValueError("tile_order must be a permutation of the tile grid")

    results: dict[tuple, np.ndarray] = {}
    for origin in order:
        sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
        x = ad.tensor(data[sl][None, None])
        prob = model.forward_noisy(x)
        results[origin] = prob.data[0, 0].astype(np.float64)

    acc = np.zeros(data.shape, dtype=np.float64)
    cnt = np.zeros(data.shape, dtype=np.float64)
    for origin in sorted(results):
        sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
        acc[sl] += results[origin]
        cnt[sl] += 1.0
    out = (acc / cnt).astype(np.float32)
    out = out[tuple(slice(0, n) for n in shape)]
    return Volume(data=out, spacing=image.spacing, kind="image")


def postprocess(prob: Volume, cfg: InferConfig) -> Volume:
    """Threshold then keep the largest connected component."""
    mask = Volume(data=(prob.data >= cfg.threshold).astype(np.uint8),
                  spacing=prob.spacing, kind="mask")
    return largest_component(mask, connectivity=cfg.connectivity)
