"""Volume containers, file I/O, intensity preprocessing, and component utilities.

A volume on disk is a pair of files sharing a base name:

  <name>.volmeta   UTF-8 JSON: {"version": 1, "shape": [D, H, W],
                   "spacing": [sz, sy, sx], "kind": "image"|"mask"|"sdm"}
                   plus an optional "aux" object for extra scalars
  <name>.volraw    little-endian scalars (f32 for image/sdm, u8 for mask),
                   z-major (D outer, W inner), exactly D*H*W elements
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

FORMAT_VERSION = 1
META_SUFFIX = ".volmeta"
RAW_SUFFIX = ".volraw"

KIND_DTYPES = {
    "image": np.dtype("<f4"),
    "mask": np.dtype("u1"),
    "sdm": np.dtype("<f4"),
}


class VolumeError(ValueError):
    """Raised when a volume violates its invariants or a file pair is inconsistent."""


@dataclass
class Volume:
    """A 3D scalar grid with voxel spacing.

    data is a (D, H, W) array in z-major order. Masks hold {0, 1} in u8,
    images and signed-distance maps hold f32 (SDM values in [-1, 1]).
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "image"
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KIND_DTYPES:
            raise VolumeError(f"unknown volume kind {self.kind!r}")
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise VolumeError(f"volume data must be 3D, got shape {self.data.shape}")
        want = KIND_DTYPES[self.kind]
        if self.data.dtype != want:
            self.data = self.data.astype(want)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing components must be > 0, got {self.spacing}")
        if self.kind == "mask":
            bad = (self.data != 0) & (self.data != 1)
            if bad.any():
                raise VolumeError("mask data must be in {0, 1}")
        elif self.kind == "sdm":
            if self.data.size and (self.data.min() < -1.0 or self.data.max() > 1.0):
                raise VolumeError("sdm data must lie in [-1, 1]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)


@dataclass
class VolumeHeader:
    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    kind: str
    version: int = FORMAT_VERSION
    aux: dict = field(default_factory=dict)

    def to_json(self) -> str:
        meta = {
            "version": self.version,
            "shape": list(self.shape),
            "spacing": list(self.spacing),
            "kind": self.kind,
        }
        if self.aux:
            meta["aux"] = self.aux
        return json.dumps(meta, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "VolumeHeader":
        try:
            meta = json.loads(text)
        except json.JSONDecodeError as e:
            raise VolumeError(f"malformed volume header: {e}") from e
        for key in ("version", "shape", "spacing", "kind"):
            if key not in meta:
                raise VolumeError(f"volume header missing {key!r}")
        if meta["version"] != FORMAT_VERSION:
            raise VolumeError(f"unsupported volume format version {meta['version']}")
        if meta["kind"] not in KIND_DTYPES:
            raise VolumeError(f"unknown kind tag {meta['kind']!r}")
        shape = tuple(int(n) for n in meta["shape"])
        spacing = tuple(float(s) for s in meta["spacing"])
        if len(shape) != 3:
            raise VolumeError(f"shape must have 3 entries, got {meta['shape']}")
        return cls(shape=shape, spacing=spacing, kind=meta["kind"],
                   version=meta["version"], aux=meta.get("aux", {}))


def _base_path(path: str) -> str:
    for suffix in (META_SUFFIX, RAW_SUFFIX):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def save_volume(vol: Volume, path: str) -> None:
    """Write the <base>.volmeta / <base>.volraw pair for a volume."""
    base = _base_path(path)
    header = VolumeHeader(shape=vol.shape, spacing=vol.spacing, kind=vol.kind,
                          aux=dict(vol.aux))
    data = np.ascontiguousarray(vol.data, dtype=KIND_DTYPES[vol.kind])
    with open(base + META_SUFFIX, "w", encoding="utf-8") as f:
        f.write(header.to_json())
    with open(base + RAW_SUFFIX, "wb") as f:
        f.write(data.tobytes())


def load_volume(path: str) -> Volume:
    """Load a volume pair written by save_volume; errors on any inconsistency."""
    base = _base_path(path)
    meta_path, raw_path = base + META_SUFFIX, base + RAW_SUFFIX
    for p in (meta_path, raw_path):
        if not os.path.exists(p):
            raise VolumeError(f"missing volume file: {p}")
    with open(meta_path, encoding="utf-8") as f:
        header = VolumeHeader.from_json(f.read())
    dtype = KIND_DTYPES[header.kind]
    raw = np.fromfile(raw_path, dtype=dtype)
    expected = int(np.prod(header.shape))
    if raw.size != expected:
        raise VolumeError(
            f"{raw_path}: holds {raw.size} values, header claims "
            f"{header.shape} = {expected}"
        )
    data = raw.reshape(header.shape)
    return Volume(data=data, spacing=header.spacing, kind=header.kind,
                  aux=dict(header.aux))


def clamp_normalize(vol: Volume, lo: float = -1200.0, hi: float = 600.0) -> Volume:
    """Clamp image intensities to [lo, hi] and rescale to [0, 255].

    out = (clip(v, lo, hi) - lo) * (255 / (hi - lo)), element-wise.
    """
    if lo >= hi:
        raise VolumeError(f"clamp range invalid: lo={lo} >= hi={hi}")
    data = vol.data.astype(np.float32)
    scale = np.float32(255.0 / (hi - lo))
    out = (np.clip(data, lo, hi) - np.float32(lo)) * scale
    return Volume(data=out, spacing=vol.spacing, kind="image")


_STRUCTS = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


def largest_component(mask: Volume, connectivity: int = 26) -> Volume:
    """Keep only the largest connected foreground component of a mask.

    Ties are broken toward the component containing the smallest voxel
    index in z-major scan order.
    """
    if mask.kind != "mask":
        raise VolumeError(f"largest_component expects a mask, got {mask.kind}")
    if connectivity not in _STRUCTS:
        raise VolumeError(f"connectivity must be one of 6/18/26, got {connectivity}")
    labels, n = ndimage.label(mask.data, structure=_STRUCTS[connectivity])
    if n == 0:
        return Volume(data=np.zeros_like(mask.data), spacing=mask.spacing, kind="mask")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    best = sizes.max()
    tied = np.flatnonzero(sizes == best)
    if tied.size > 1:
        flat = labels.ravel()
        first = np.flatnonzero(np.isin(flat, tied))[0]
        winner = flat[first]
    else:
        winner = tied[0]
    out = (labels == winner).astype(np.uint8)
    return Volume(data=out, spacing=mask.spacing, kind="mask")
