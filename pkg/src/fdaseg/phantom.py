"""Deterministic synthetic airway-tree phantoms and their noisy corruptions.

A phantom is a recursive binary tree of capsules (cylinders with
hemispherical caps). The root runs along -z from the top face center;
each bifurcation tilts the two children by +/- the configured half-angle
inside a randomly oriented plane. The mask is the union of capsules, the
image adds a soft anti-aliased lumen profile on a flat background.

All randomness is counter-based (one Philox stream per branch index), so
the output is a pure function of the spec regardless of evaluation order.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volcore import Volume

MIN_TIP_RADIUS = 0.7
# internal geometry constants: branch length as a fraction of the volume
# depth at the root, shrinking per generation
ROOT_LENGTH_FRAC = 0.30
LENGTH_DECAY = 0.72


class PhantomError(ValueError):
    pass


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    depth: int = 2
    root_radius: float = 3.0
    radius_decay: float = 0.75
    branch_angle_deg: float = 32.0
    seed: int = 0
    wall_contrast: float = 600.0
    background_level: float = -900.0

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.depth < 1:
            raise PhantomError("depth must be >= 1")
        if self.root_radius < 1.0:
            raise PhantomError("root_radius must be >= 1 voxel")
        if not (0.0 < self.radius_decay < 1.0):
            raise PhantomError("radius_decay must lie in (0, 1)")
        tip = self.root_radius * self.radius_decay ** (self.depth - 1)
        if tip < MIN_TIP_RADIUS:
            raise PhantomError(
                f"deepest radius {tip:.3f} underflows the {MIN_TIP_RADIUS} voxel floor"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return _from_dict(cls, d)


@dataclass
class NoiseSpec:
    n_patches: int = 6
    patch_radius_range: tuple[float, float] = (2.0, 6.0)
    patch_intensity_range: tuple[float, float] = (200.0, 500.0)
    blur_sigma: float = 1.5
    gaussian_noise_sigma: float = 40.0
    seed: int = 0

    def __post_init__(self):
        if self.n_patches < 0:
            raise PhantomError("n_patches must be >= 0")
        for name in ("patch_radius_range", "patch_intensity_range"):
            lo, hi = getattr(self, name)
            if hi < lo or lo < 0:
                raise PhantomError(f"{name} must be a non-empty non-negative range")
        if self.blur_sigma < 0 or self.gaussian_noise_sigma < 0:
            raise PhantomError("sigmas must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return _from_dict(cls, d)


def _from_dict(cls, d):
    fields = {f for f in cls.__dataclass_fields__}
    unknown = set(d) - fields
    if unknown:
        raise PhantomError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = dict(d)
    for key in ("shape", "spacing", "patch_radius_range", "patch_intensity_range"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return cls(**kwargs)


@dataclass
class CenterlineBranch:
    points: np.ndarray  # (L, 3) float voxel coordinates, z-major [z, y, x]
    generation: int


@dataclass
class PhantomSample:
    image: Volume
    mask: Volume
    centerline: list[CenterlineBranch] = field(default_factory=list)


@dataclass
class _Capsule:
    start: np.ndarray
    end: np.ndarray
    radius: float
    generation: int


def _branch_rng(seed: int, branch_index: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, branch_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _perp_basis(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probe = np.array([0.0, 1.0, 0.0]) if abs(d[1]) < 0.9 else np.array([0.0, 0.0, 1.0])
    u = np.cross(d, probe)
    u /= np.linalg.norm(u)
    v = np.cross(d, u)
    v /= np.linalg.norm(v)
    return u, v


def _build_tree(spec: PhantomSpec) -> list[_Capsule]:
    D, H, W = spec.shape
    root_len = ROOT_LENGTH_FRAC * D
    margin = spec.root_radius + 1.5
    start = np.array([D - 1 - margin, (H - 1) / 2.0, (W - 1) / 2.0])
    direction = np.array([-1.0, 0.0, 0.0])  # -z, in (z, y, x) coordinates
    angle = math.radians(spec.branch_angle_deg)

    capsules: list[_Capsule] = []
    # (start, direction, length, radius, generation, heap index)
    stack = [(start, direction, root_len, spec.root_radius, 0, 1)]
    while stack:
        p0, d, length, radius, gen, idx = stack.pop()
        p1 = p0 + length * d
        _check_bounds(p0, p1, radius, spec.shape)
        capsules.append(_Capsule(start=p0, end=p1, radius=radius, generation=gen))
        if gen + 1 >= spec.depth:
            continue
        rng = _branch_rng(spec.seed, idx)
        azimuth = rng.uniform(0.0, 2.0 * math.pi)
        jitter = rng.uniform(-0.2, 0.2, size=2) * angle
        u, v = _perp_basis(d)
        for child, (sign, jit) in enumerate(zip((1.0, -1.0), jitter)):
            a = angle * sign + jit
            lateral = math.cos(azimuth) * u + math.sin(azimuth) * v
            cd = math.cos(a) * d + math.sin(a) * lateral
            cd /= np.linalg.norm(cd)
            stack.append((p1.copy(), cd, length * LENGTH_DECAY,
                          radius * spec.radius_decay, gen + 1, 2 * idx + child))
    capsules.sort(key=lambda c: (c.generation, tuple(c.start)))
    return capsules


def _check_bounds(p0, p1, radius, shape):
    pad = radius + 1.0
    lo = np.minimum(p0, p1) - pad
    hi = np.maximum(p0, p1) + pad
    if (lo < 0).any() or (hi > np.array(shape) - 1).any():
        raise PhantomError(
            "tree exits volume bounds; shrink depth/radius or enlarge shape"
        )


def _segment_profile(cap: _Capsule, shape) -> tuple[tuple[slice, ...], np.ndarray]:
    """Soft capsule profile on the capsule's bounding box.

    1 inside the lumen, linear 1-voxel ramp across the boundary, 0 outside.
    """
    pad = cap.radius + 1.5
    lo = np.maximum(np.floor(np.minimum(cap.start, cap.end) - pad).astype(int), 0)
    hi = np.minimum(np.ceil(np.maximum(cap.start, cap.end) + pad).astype(int) + 1,
                    np.array(shape))
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    grids = np.meshgrid(*[np.arange(a, b, dtype=np.float64) for a, b in zip(lo, hi)],
                        indexing="ij")
    pts = np.stack(grids, axis=-1)
    axis = cap.end - cap.start
    seg_len2 = float(axis @ axis)
    rel = pts - cap.start
    if seg_len2 > 0:
        t = np.clip((rel @ axis) / seg_len2, 0.0, 1.0)
    else:
        t = np.zeros(pts.shape[:-1])
    nearest = cap.start + t[..., None] * axis
    dist = np.linalg.norm(pts - nearest, axis=-1)
    prof = np.clip(cap.radius + 0.5 - dist, 0.0, 1.0)
    return sl, prof


def generate_phantom(spec: PhantomSpec) -> PhantomSample:
    """Rasterize the capsule tree of a spec into image, mask, and centerline."""
    capsules = _build_tree(spec)
    prof = np.zeros(spec.shape, dtype=np.float64)
    for cap in capsules:
        sl, p = _segment_profile(cap, spec.shape)
        np.maximum(prof[sl], p, out=prof[sl])

    # prof >= 0.5 is exactly "distance to an axis <= radius"
    mask = (prof >= 0.5).astype(np.uint8)
    image = (spec.background_level + spec.wall_contrast * prof).astype(np.float32)

    centerline: list[CenterlineBranch] = []
    for cap in capsules:
        length = float(np.linalg.norm(cap.end - cap.start))
        n = max(2, int(math.ceil(length / 0.5)) + 1)
        t = np.linspace(0.0, 1.0, n)
        pts = cap.start[None, :] + t[:, None] * (cap.end - cap.start)[None, :]
        centerline.append(CenterlineBranch(points=pts, generation=cap.generation))
        # guarantee the invariant: every centerline point's voxel is foreground
        vox = np.rint(pts).astype(int)
        mask[vox[:, 0], vox[:, 1], vox[:, 2]] = 1

    n_comp = ndimage.label(mask, structure=np.ones((3, 3, 3), bool))[1]
    if n_comp != 1:
        raise PhantomError(f"phantom mask has {n_comp} components, expected 1")

    return PhantomSample(
        image=Volume(data=image, spacing=spec.spacing, kind="image"),
        mask=Volume(data=mask, spacing=spec.spacing, kind="mask"),
        centerline=centerline,
    )


def corrupt_to_noisy(sample: PhantomSample, noise: NoiseSpec) -> PhantomSample:
    """Overlay seeded shadow patches and pixel noise; anatomy stays untouched."""
    image = sample.image.data.astype(np.float32).copy()
    shape = image.shape
    rng = _branch_rng(noise.seed, 0)
    if noise.n_patches > 0:
        overlay = np.zeros(shape, dtype=np.float64)
        for _ in range(noise.n_patches):
            center = np.array([rng.uniform(0, n - 1) for n in shape])
            radius = rng.uniform(*noise.patch_radius_range)
            intensity = rng.uniform(*noise.patch_intensity_range)
            blob = _Capsule(start=center, end=center, radius=radius, generation=-1)
            sl, p = _segment_profile(blob, shape)
            overlay[sl] += intensity * p
        if noise.blur_sigma > 0:
            overlay = ndimage.gaussian_filter(overlay, noise.blur_sigma)
        image += overlay.astype(np.float32)
    if noise.gaussian_noise_sigma > 0:
        image += rng.normal(0.0, noise.gaussian_noise_sigma,
                            size=shape).astype(np.float32)
    return PhantomSample(
        image=Volume(data=image, spacing=sample.image.spacing, kind="image"),
        mask=Volume(data=sample.mask.data.copy(), spacing=sample.mask.spacing,
                    kind="mask"),
        centerline=[CenterlineBranch(points=b.points.copy(), generation=b.generation)
                    for b in sample.centerline],
    )


def save_centerline(centerline: list[CenterlineBranch], path: str) -> None:
    payload = [
        {"generation": b.generation,
         "points": [[float(z), float(y), float(x)] for z, y, x in b.points]}
        for b in centerline
    ]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f)


def load_centerline(path: str) -> list[CenterlineBranch]:
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    return [
        CenterlineBranch(points=np.asarray(b["points"], dtype=np.float64),
                         generation=int(b["generation"]))
        for b in payload
    ]


def save_sample(sample: PhantomSample, out_dir: str) -> None:
    from .volcore import save_volume

    os.makedirs(out_dir, exist_ok=True)
    save_volume(sample.image, os.path.join(out_dir, "image"))
    save_volume(sample.mask, os.path.join(out_dir, "mask"))
    save_centerline(sample.centerline, os.path.join(out_dir, "centerline.json"))


def load_sample(sample_dir: str) -> PhantomSample:
    from .volcore import load_volume

    image = load_volume(os.path.join(sample_dir, "image"))
    mask = load_volume(os.path.join(sample_dir, "mask"))
    cl_path = os.path.join(sample_dir, "centerline.json")
    centerline = load_centerline(cl_path) if os.path.exists(cl_path) else []
    return PhantomSample(image=image, mask=mask, centerline=centerline)
