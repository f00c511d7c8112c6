"""Training losses: signed-distance regression and Dice+Focal segmentation.

Regression loss (per patch, both terms under the configured reduction):

    l_reg(f, y) = red(|f - y|) - red( f*y / (f*y + f^2 + y^2) )

The ratio is taken as 0 whenever its denominator is 0 (only at f = y = 0),
which is the unique continuous completion along f = y -> 0. The ratio
reaches its maximum 1/3 at f = y and goes to -1 as f -> -y, so wrong-sign
predictions are penalized by both terms.

Segmentation loss:

    l_seg(p, g) = -(2*sum(p*g) + eps) / (sum(p + g) + eps)
                  - mean( (1 - pt)^2 * log(pt) )

where by default pt is the predicted probability of the voxel's true class
(p where g = 1, 1 - p where g = 0). The one-sided variant with pt = p
everywhere is available via focal_two_sided=False. Probabilities are
clipped away from {0, 1} before either term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _node


@dataclass
class LossConfig:
    reduction: str = "mean"
    dice_eps: float = 1e-5
    prob_clip: float = 1e-6
    focal_gamma: float = 2.0
    focal_two_sided: bool = True

    def __post_init__(self):
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be sum or mean, got {self.reduction!r}")
        if not (0.0 < self.prob_clip < 0.5):
            raise ValueError("prob_clip must lie in (0, 0.5)")
        if self.dice_eps <= 0:
            raise ValueError("dice_eps must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown loss config fields: {sorted(unknown)}")
        return cls(**d)


def _red(val: np.ndarray, reduction: str):
    return val.sum() if reduction == "sum" else val.mean()


def _red_scale(size: int, reduction: str) -> float:
    return 1.0 if reduction == "sum" else 1.0 / size


def l1_term(f: Tensor, y: Tensor, reduction: str = "mean") -> Tensor:
    if f.data.shape != y.data.shape:
        raise ValueError(f"shape mismatch: {f.data.shape} vs {y.data.shape}")
    diff = f.data - y.data
    scale = _red_scale(diff.size, reduction)

    def bwd(g):
        gf = g * scale * np.sign(diff)
        return gf, -gf

    return _node(np.asarray(_red(np.abs(diff), reduction)), (f, y), bwd)


def ratio_term(f: Tensor, y: Tensor, reduction: str = "mean") -> Tensor:
    """red( f*y / (f*y + f^2 + y^2) ), with 0/0 := 0."""
    if f.data.shape != y.data.shape:
        raise ValueError(f"shape mismatch: {f.data.shape} vs {y.data.shape}")
    fd, yd = f.data, y.data
    u = fd * yd
    den = u + fd * fd + yd * yd
    safe = np.where(den == 0, 1.0, den)
    r = np.where(den == 0, 0.0, u / safe)
    scale = _red_scale(fd.size, reduction)

    def bwd(g):
        den2 = safe * safe
        gf = np.where(den == 0, 0.0, yd * (yd * yd - fd * fd) / den2)
        gy = np.where(den == 0, 0.0, fd * (fd * fd - yd * yd) / den2)
        return g * scale * gf, g * scale * gy

    return _node(np.asarray(_red(r, reduction)), (f, y), bwd)


def l_reg(f: Tensor, y: Tensor, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    return ad.sub(l1_term(f, y, cfg.reduction), ratio_term(f, y, cfg.reduction))


def dice_term(p: Tensor, g: Tensor, eps: float = 1e-5) -> Tensor:
    """Negative soft Dice overlap, in [-1, 0] for valid inputs."""
    if p.data.shape != g.data.shape:
        raise ValueError(f"shape mismatch: {p.data.shape} vs {g.data.shape}")
    pd, gd = p.data, g.data
    num = 2.0 * float((pd * gd).sum()) + eps
    den = float((pd + gd).sum()) + eps
    val = -num / den

    def bwd(grad):
        # d/dp_i of -(num/den) = -(2 g_i den - num) / den^2
        gp = -(2.0 * gd * den - num) / (den * den)
        return (grad * gp, None)

    return _node(np.asarray(val, dtype=pd.dtype), (p, g), bwd)


def focal_term(p: Tensor, g: Tensor, gamma: float = 2.0,
               two_sided: bool = True) -> Tensor:
    """Mean focal penalty -(1/N) sum (1 - pt)^gamma log(pt)."""
    if p.data.shape != g.data.shape:
        raise ValueError(f"shape mismatch: {p.data.shape} vs {g.data.shape}")
    pd, gd = p.data, g.data
    if two_sided:
        pt = np.where(gd > 0.5, pd, 1.0 - pd)
        sign = np.where(gd > 0.5, 1.0, -1.0).astype(pd.dtype)
    else:
        pt = pd
        sign = np.ones_like(pd)
    one_m = 1.0 - pt
    n = pd.size
    val = -(one_m ** gamma * np.log(pt)).sum() / n

    def bwd(grad):
        # d/dpt of -(1-pt)^gamma log(pt) = gamma (1-pt)^(gamma-1) log(pt) - (1-pt)^gamma / pt
        dpt = gamma * one_m ** (gamma - 1.0) * np.log(pt) - one_m ** gamma / pt
        return (grad * sign * dpt / n, None)

    return _node(np.asarray(val, dtype=pd.dtype), (p, g), bwd)


def l_seg_terms(p: Tensor, g: Tensor, cfg: LossConfig | None = None):
    """(dice term, focal term) as scalar tensors; p is clipped first."""
    cfg = cfg or LossConfig()
    pc = ad.clip(p, cfg.prob_clip, 1.0 - cfg.prob_clip)
    return (dice_term(pc, g, cfg.dice_eps),
            focal_term(pc, g, cfg.focal_gamma, cfg.focal_two_sided))


def l_seg(p: Tensor, g: Tensor, cfg: LossConfig | None = None) -> Tensor:
    dice, focal = l_seg_terms(p, g, cfg)
    return ad.add(dice, focal)


def l_total(seg: Tensor, reg: Tensor) -> Tensor:
    return ad.add(seg, reg)
