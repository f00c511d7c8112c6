"""Dual-stream encoder/decoder network for clean-to-noisy airway transfer.

The clean stream (shared encoder -> channel-attention refinement -> clean
decoder) regresses a signed distance map through a tanh head. The noisy
stream runs the same shared encoder on the noisy input, adds a separate
noisy-specific encoder, projects both feature sets through 1x1x1 convs,
sums them channel-wise at every level, and decodes the aggregate to a
sigmoid probability map.

Every level block is two [3x3x3 conv -> instance norm -> pReLU] stages;
downsampling is 2x max pooling, upsampling is nearest-neighbor followed by
a 3x3x3 conv, and skip connections concatenate on channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

GROUPS = ("enc_clean", "enc_noisy", "dec_clean", "dec_mix", "proj", "cse")


@dataclass
class FdaConfig:
    channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    r_c: int = 2
    in_channels: int = 1
    levels: int = 4
    use_cse: bool = True
    use_noisy_stream: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != self.levels:
            raise ValueError(f"need {self.levels} channel counts, got {self.channels}")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channels must be strictly increasing: {self.channels}")
        if self.r_c < 1:
            raise ValueError("r_c must be >= 1")

    @classmethod
    def toy(cls, **overrides) -> "FdaConfig":
        return cls(channels=(8, 16, 32, 64), **overrides)

    @classmethod
    def full(cls, **overrides) -> "FdaConfig":
        return cls(channels=(32, 64, 128, 256), **overrides)

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels), "r_c": self.r_c,
            "in_channels": self.in_channels, "levels": self.levels,
            "use_cse": self.use_cse, "use_noisy_stream": self.use_noisy_stream,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FdaConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        kwargs = dict(d)
        if "channels" in kwargs:
            kwargs["channels"] = tuple(kwargs["channels"])
        return cls(**kwargs)


class FdaModel:
    """Parameter store plus the two forward passes."""

    def __init__(self, cfg: FdaConfig, init_seed: int = 0):
        self.cfg = cfg
        self.store = ParamStore()
        self._rng = np.random.Generator(np.random.PCG64(init_seed))
        self._build()

    # -- parameter construction ------------------------------------------

    def _conv_param(self, name: str, cout: int, cin: int, k: int):
        fan_in, fan_out = cin * k ** 3, cout * k ** 3
        w = ad.glorot_uniform((cout, cin, k, k, k), fan_in, fan_out, self._rng)
        self.store.add(f"{name}.w", Tensor(w))
        self.store.add(f"{name}.b", Tensor(np.zeros(cout, dtype=np.float32)))

    def _block_params(self, name: str, cin: int, cout: int):
        self._conv_param(f"{name}.conv1", cout, cin, 3)
        self.store.add(f"{name}.in1.gamma", Tensor(np.ones(cout, dtype=np.float32)))
        self.store.add(f"{name}.in1.beta", Tensor(np.zeros(cout, dtype=np.float32)))
        self.store.add(f"{name}.prelu1.a",
                       Tensor(np.full(cout, 0.25, dtype=np.float32)))
        self._conv_param(f"{name}.conv2", cout, cout, 3)
        self.store.add(f"{name}.in2.gamma", Tensor(np.ones(cout, dtype=np.float32)))
        self.store.add(f"{name}.in2.beta", Tensor(np.zeros(cout, dtype=np.float32)))
        self.store.add(f"{name}.prelu2.a",
                       Tensor(np.full(cout, 0.25, dtype=np.float32)))

    def _build(self):
        cfg = self.cfg
        ch = cfg.channels
        for enc in ("enc_clean", "enc_noisy"):
            cin = cfg.in_channels
            for lvl, cout in enumerate(ch):
                self._block_params(f"{enc}.L{lvl}", cin, cout)
                cin = cout
        for lvl, c in enumerate(ch):
            hidden = max(1, ceil(c / cfg.r_c))
            w1 = ad.glorot_uniform((hidden, c), c, hidden, self._rng)
            w2 = ad.glorot_uniform((c, hidden), hidden, c, self._rng)
            self.store.add(f"cse.L{lvl}.w1", Tensor(w1))
            self.store.add(f"cse.L{lvl}.w2", Tensor(w2))
        for lvl, c in enumerate(ch):
            self._conv_param(f"proj.L{lvl}.clean", c, c, 1)
            self._conv_param(f"proj.L{lvl}.noisy", c, c, 1)
        for dec in ("dec_clean", "dec_mix"):
            for lvl in range(cfg.levels - 2, -1, -1):
                self._conv_param(f"{dec}.U{lvl}.up", ch[lvl], ch[lvl + 1], 3)
                self._block_params(f"{dec}.U{lvl}.block", 2 * ch[lvl], ch[lvl])
            self._conv_param(f"{dec}.head", 1, ch[0], 1)

    # -- forward pieces ---------------------------------------------------

    def _block(self, x: Tensor, name: str) -> Tensor:
        s = self.store
        for i in (1, 2):
            x = ad.conv3d(x, s[f"{name}.conv{i}.w"], s[f"{name}.conv{i}.b"],
                          stride=1, padding=1)
            x = ad.instance_norm(x, s[f"{name}.in{i}.gamma"], s[f"{name}.in{i}.beta"])
            x = ad.prelu(x, s[f"{name}.prelu{i}.a"])
        return x

    def _encode(self, x: Tensor, enc: str) -> list[Tensor]:
        """Per-level pre-pool features, shallowest first; last is the bottleneck."""
        self._check_input(x)
        feats = []
        h = x
        for lvl in range(self.cfg.levels):
            h = self._block(h, f"{enc}.L{lvl}")
            feats.append(h)
            if lvl < self.cfg.levels - 1:
                h = ad.maxpool3d(h)
        return feats

    def _decode(self, feats: list[Tensor], dec: str) -> Tensor:
        s = self.store
        h = feats[-1]
        for lvl in range(self.cfg.levels - 2, -1, -1):
            h = ad.upsample_nearest(h, 2)
            h = ad.conv3d(h, s[f"{dec}.U{lvl}.up.w"], s[f"{dec}.U{lvl}.up.b"],
                          stride=1, padding=1)
            h = ad.concat_channels(h, feats[lvl])
            h = self._block(h, f"{dec}.U{lvl}.block")
        return ad.conv3d(h, s[f"{dec}.head.w"], s[f"{dec}.head.b"])

    def _check_input(self, x: Tensor):
        if x.data.ndim != 5 or x.data.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (N, {self.cfg.in_channels}, D, H, W) input, "
                             f"got {x.data.shape}")
        div = 2 ** (self.cfg.levels - 1)
        if any(d % div for d in x.data.shape[2:]):
            raise ValueError(f"spatial dims {x.data.shape[2:]} not divisible by {div}")

    def _refine(self, feats: list[Tensor]) -> list[Tensor]:
        if not self.cfg.use_cse:
            return feats
        s = self.store
        return [ad.cse_block(f, s[f"cse.L{lvl}.w1"], s[f"cse.L{lvl}.w2"])
                for lvl, f in enumerate(feats)]

    def forward_clean(self, x: Tensor, features: dict | None = None) -> Tensor:
        """Clean image patch -> signed-distance prediction in (-1, 1)."""
        feats = self._encode(x, "enc_clean")
        refined = self._refine(feats)
        if features is not None:
            features["enc_clean"] = feats
            features["refined"] = refined
        return ad.tanh(self._decode(refined, "dec_clean"))

    def forward_noisy(self, x: Tensor, features: dict | None = None) -> Tensor:
        """Noisy image patch -> probability map in (0, 1).

        Both encoders see x; at every level the two streams pass their own
        1x1x1 projection and are summed channel-wise before decoding.
        """
        s = self.store
        clean_feats = self._encode(x, "enc_clean")
        mixed = []
        noisy_feats = (self._encode(x, "enc_noisy")
                       if self.cfg.use_noisy_stream else None)
        for lvl, fc in enumerate(clean_feats):
            pc = ad.conv3d(fc, s[f"proj.L{lvl}.clean.w"], s[f"proj.L{lvl}.clean.b"])
            if noisy_feats is None:
                mixed.append(pc)
                continue
            pn = ad.conv3d(noisy_feats[lvl], s[f"proj.L{lvl}.noisy.w"],
                           s[f"proj.L{lvl}.noisy.b"])
            mixed.append(ad.add(pc, pn))
        if features is not None:
            features["enc_clean"] = clean_feats
            features["enc_noisy"] = noisy_feats
            features["mixed"] = mixed
        return ad.sigmoid(self._decode(mixed, "dec_mix"))

    # -- bookkeeping ------------------------------------------------------

    def param_groups(self) -> dict[str, list[str]]:
        """Partition of parameter names into the six architectural groups."""
        groups: dict[str, list[str]] = {g: [] for g in GROUPS}
        for name in self.store.names():
            groups[name.split(".", 1)[0]].append(name)
        return groups

    def load_state(self, params: dict[str, np.ndarray]):
        for name, t in self.store.items():
            if name not in params:
                raise ValueError(f"checkpoint missing parameter {name!r}")
            arr = np.asarray(params[name], dtype=np.float32)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: "
                                 f"{arr.shape} vs {t.data.shape}")
            t.data = arr.copy()


def model_from_checkpoint(path: str) -> tuple[FdaModel, dict]:
    """Rebuild a model from a checkpoint written by the training loop."""
    from .autodiff import load_checkpoint

    manifest, params, _ = load_checkpoint(path)
    extra = manifest.get("extra", {})
    if "model" not in extra:
        raise ValueError(f"{path}: checkpoint carries no model config")
    cfg = FdaConfig.from_dict(extra["model"])
    model = FdaModel(cfg, init_seed=0)
    model.load_state(params)
    return model, manifest
