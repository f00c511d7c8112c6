"""Paired clean/noisy training loop with Adam, augmentation, and checkpoints.

Each step draws one clean and one noisy sample, crops a patch biased
toward the airway bounding box, augments (optional W-axis flip, small
z-axis rotation), recomputes the signed-distance target from the
augmented clean mask, and takes one Adam step on the summed loss.

All per-step randomness comes from a counter-based stream keyed by
(seed, step), so step k's draws never depend on evaluation order.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import save_checkpoint
from .losses import LossConfig, l_reg, l_seg_terms
from .model import FdaModel
from .phantom import PhantomSample, load_sample
from .sdm import sdm_target
from .volcore import clamp_normalize


@dataclass
class TrainConfig:
    epochs: int = 20
    steps_per_epoch: int = 10
    lr: float = 0.002
    lr_drop_epoch: int = 50
    lr_drop_factor: float = 10.0
    patch_shape: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    flip: bool = True
    rot_deg: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 10  # epochs
    crop_margin: int = 4       # dilation of the airway bbox for crop centers
    use_sdm: bool = True       # False drops the clean-stream regression loss

    def __post_init__(self):
        self.patch_shape = tuple(int(n) for n in self.patch_shape)
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if any(d % 8 for d in self.patch_shape):
            raise ValueError(f"patch dims must be divisible by 8: {self.patch_shape}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        kwargs = dict(d)
        if "patch_shape" in kwargs:
            kwargs["patch_shape"] = tuple(kwargs["patch_shape"])
        return cls(**kwargs)


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, store: ad.ParamStore):
        self.m = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.step_count = 0

    def load(self, moments: dict, step: int):
        for name in self.m:
            if name in moments:
                self.m[name] = moments[name][0].astype(np.float32).copy()
                self.v[name] = moments[name][1].astype(np.float32).copy()
        self.step_count = step

    def step(self, store: ad.ParamStore, lr: float, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - beta1 ** t
        bc2 = 1.0 - beta2 ** t
        for name, p in store.items():
            g = p.grad
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float32)
            m = self.m[name]
            v = self.v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data = p.data - np.float32(lr) * mhat / (np.sqrt(vhat) + eps)

    def moments(self) -> dict:
        return {n: (self.m[n], self.v[n]) for n in self.m}


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < cfg.lr_drop_epoch:
        return cfg.lr
    return cfg.lr / cfg.lr_drop_factor


def _step_rng(seed: int, step: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, 0x5A5A0000 + step], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _crop(image: np.ndarray, mask: np.ndarray, patch, margin: int,
          rng: np.random.Generator):
    """Patch crop whose center is biased into the dilated airway bbox."""
    shape = image.shape
    fg = np.argwhere(mask > 0)
    starts = []
    for axis in range(3):
        p = patch[axis]
        n = shape[axis]
        if n < p:
            raise ValueError(f"volume dim {n} smaller than patch dim {p}")
        if fg.size:
            lo = max(int(fg[:, axis].min()) - margin, 0)
            hi = min(int(fg[:, axis].max()) + margin, n - 1)
        else:
            lo, hi = 0, n - 1
        center = int(rng.integers(lo, hi + 1))
        starts.append(int(np.clip(center - p // 2, 0, n - p)))
    sl = tuple(slice(s, s + p) for s, p in zip(starts, patch))
    return image[sl].copy(), mask[sl].copy(), tuple(starts)


def sample_pair(clean: list[PhantomSample], noisy: list[PhantomSample],
                rng: np.random.Generator, patch, margin: int = 4):
    """One (image, mask) patch from each domain, uniform over volumes.

    Crops are redrawn (bounded) until they contain foreground, since the
    SDM target needs at least one airway voxel.
    """
    if not clean or not noisy:
        raise ValueError("both sample sets must be non-empty")
    out = []
    for group in (clean, noisy):
        idx = int(rng.integers(len(group)))
        s = group[idx]
        img = msk = None
        for _ in range(20):
            img, msk, _ = _crop(s.image.data, s.mask.data, patch, margin, rng)
            if msk.any():
                break
        out.append((img.astype(np.float32), msk.astype(np.uint8)))
    return tuple(out)


def _rotate_z(image: np.ndarray, theta_deg: float, order: int, fill: float):
    """Rotate about the z axis; trilinear for images, nearest for masks."""
    if theta_deg == 0.0:
        return image
    th = math.radians(theta_deg)
    d, h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    # source coordinates = inverse rotation of output coordinates
    ys = cy + (yy - cy) * math.cos(th) - (xx - cx) * math.sin(th)
    xs = cx + (yy - cy) * math.sin(th) + (xx - cx) * math.cos(th)
    zz = np.broadcast_to(np.arange(d, dtype=np.float64)[:, None, None], (d, h, w))
    coords = np.stack([zz, np.broadcast_to(ys, (d, h, w)),
                       np.broadcast_to(xs, (d, h, w))])
    return ndimage.map_coordinates(image.astype(np.float64), coords, order=order,
                                   mode="constant", cval=fill).astype(image.dtype)


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            flip: bool = True, rot_deg: float = 10.0):
    """Random W-axis flip and z-axis rotation in [-rot_deg, rot_deg].

    Rotation resamples trilinearly for the image (out-of-range fills with
    the patch minimum, standing in for the background level) and
    nearest-neighbor for the mask (fills with 0, stays binary).
    """
    if flip and rng.uniform() < 0.5:
        image = image[:, :, ::-1].copy()
        mask = mask[:, :, ::-1].copy()
    if rot_deg > 0:
        theta = float(rng.uniform(-rot_deg, rot_deg))
        fill = float(image.min())
        image = _rotate_z(image, theta, order=1, fill=fill)
        mask = _rotate_z(mask, theta, order=0, fill=0)
    return image, mask


def train_step(model: FdaModel, opt: AdamState, clean_pair, noisy_pair,
               lr: float, train_cfg: TrainConfig, loss_cfg: LossConfig):
    """One optimization step; returns (l_seg, l_reg, l_total, dice_term)."""
    noisy_img, noisy_mask = noisy_pair
    x_n = ad.tensor(noisy_img[None, None])
    prob = model.forward_noisy(x_n)
    g = ad.tensor(noisy_mask[None, None].astype(np.float32))
    dice, focal = l_seg_terms(prob, g, loss_cfg)
    seg = ad.add(dice, focal)

    if train_cfg.use_sdm:
        clean_img, clean_mask = clean_pair
        target = sdm_target(clean_mask)
        x_c = ad.tensor(clean_img[None, None])
        pred = model.forward_clean(x_c)
        reg = l_reg(pred, ad.tensor(target[None, None]), loss_cfg)
        total = ad.add(seg, reg)
        reg_val = reg.item()
    else:
        total = seg
        reg_val = 0.0

    total_val = total.item()
    if not np.isfinite(total_val):
        raise RuntimeError(
            f"non-finite loss: l_seg={seg.item()}, l_reg={reg_val}"
        )
    model.store.zero_grad()
    ad.backward(total)
    opt.step(model.store, lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    return seg.item(), reg_val, total_val, dice.item()


def load_dataset(data_dir: str, preprocess: bool = True) -> list[PhantomSample]:
    """Load every sample subdirectory, sorted by name; images are
    clamp-normalized to [0, 255] on load."""
    if not os.path.isdir(data_dir):
        raise ValueError(f"dataset directory not found: {data_dir}")
    subdirs = sorted(
        d for d in os.listdir(data_dir)
        if os.path.isdir(os.path.join(data_dir, d))
    )
    samples = []
    for d in subdirs:
        s = load_sample(os.path.join(data_dir, d))
        if preprocess:
            s = PhantomSample(image=clamp_normalize(s.image), mask=s.mask,
                              centerline=s.centerline)
        samples.append(s)
    if not samples:
        raise ValueError(f"no sample subdirectories under {data_dir}")
    return samples


def fit(model: FdaModel, clean: list[PhantomSample], noisy: list[PhantomSample],
        train_cfg: TrainConfig, loss_cfg: LossConfig, out_dir: str,
        log_name: str = "log.jsonl", stop_check=None) -> str:
    """Run the full loop; returns the path of the final checkpoint."""
    os.makedirs(out_dir, exist_ok=True)
    opt = AdamState(model.store)
    extra = {"model": model.cfg.to_dict()}

    def save(epoch):
        path = os.path.join(out_dir, f"ckpt_{epoch}.fda")
        save_checkpoint(path, model.store, step=opt.step_count,
                        moments=opt.moments(), extra=extra)
        return path

    final = save(0)
    log_path = os.path.join(out_dir, log_name)
    t0 = time.monotonic()
    with open(log_path, "w", encoding="utf-8") as log:
        step = 0
        for epoch in range(train_cfg.epochs):
            lr = lr_at(epoch, train_cfg)
            for _ in range(train_cfg.steps_per_epoch):
                rng = _step_rng(train_cfg.seed, step)
                clean_pair, noisy_pair = sample_pair(
                    clean, noisy, rng, train_cfg.patch_shape, train_cfg.crop_margin)
                clean_pair = _augmented_nonempty(clean_pair, rng, train_cfg)
                noisy_pair = _augmented_nonempty(noisy_pair, rng, train_cfg)
                seg, reg, total, dice = train_step(
                    model, opt, clean_pair, noisy_pair, lr, train_cfg, loss_cfg)
                log.write(json.dumps({
                    "step": step, "epoch": epoch, "l_seg": seg, "l_reg": reg,
                    "l_total": total, "dice_term": dice, "lr": lr,
                    "wall_time": round(time.monotonic() - t0, 3),
                }) + "\n")
                step += 1
            last = epoch == train_cfg.epochs - 1
            if last or (epoch + 1) % train_cfg.checkpoint_every == 0:
                final = save(epoch + 1)
            if stop_check is not None and stop_check(epoch, model):
                final = save(epoch + 1)
                break
    return final


def _augmented_nonempty(pair, rng, cfg: TrainConfig, max_tries: int = 20):
    """Augment but never hand back an empty mask (the SDM needs foreground)."""
    img, msk = pair
    if not msk.any():
        return pair
    for _ in range(max_tries):
        a_img, a_msk = augment(img, msk, rng, cfg.flip, cfg.rot_deg)
        if a_msk.any():
            return a_img, a_msk
    return img, msk
