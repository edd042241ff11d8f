"""Full localization pipeline: patch embed, two selective-scan stages, two
inverted-residual stages, and the multi-scale decoder producing a per-pixel
tamper probability map.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .blocks import (
    Decoder,
    Downsample,
    InvertedResidual,
    MixedSSMBlock,
    Module,
    PatchEmbed,
)
from .tensor import ShapeError, Tensor


@dataclasses.dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``input_size`` pins the accepted image size when set; otherwise any
    spatial size divisible by ``patch_size * 8`` is accepted. The default
    widths are a plausible fit for the reference budget (37M parameters,
    64G MACs at 512x512) but are not an exact reproduction of it.
    """

    depths: tuple = (2, 2, 9, 2)
    channels: tuple = (48, 96, 192, 384)
    state: int = 16
    ssm_ratio: int = 2
    cab_reduction: int = 16
    use_cab: bool = True
    expansion: int = 4
    decoder_dim: int = 128
    patch_size: int = 4
    input_size: tuple | None = None
    scan_mode: str = "zoh"

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.channels = tuple(int(c) for c in self.channels)
        if self.input_size is not None:
            self.input_size = tuple(int(s) for s in self.input_size)
        self.validate()

    @property
    def divisibility(self) -> int:
        return self.patch_size * 8

    def validate(self):
        if len(self.depths) != 4 or any(d < 1 for d in self.depths):
            raise ValueError(f"depths must be 4 positive integers, got {self.depths}")
        if len(self.channels) != 4 or any(c < 1 for c in self.channels):
            raise ValueError(f"channels must be 4 positive integers, got {self.channels}")
        if self.use_cab:
            for c in self.channels[:2]:
                if c % self.cab_reduction:
                    raise ValueError(
                        f"stage channels {c} not divisible by cab_reduction {self.cab_reduction}"
                    )
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be positive, got {self.patch_size}")
        if self.state < 1:
            raise ValueError(f"state must be positive, got {self.state}")
        if self.scan_mode not in ("zoh", "simplified"):
            raise ValueError(f"unknown scan_mode {self.scan_mode!r}")
        if self.input_size is not None:
            h, w = self.input_size
            if h % self.divisibility or w % self.divisibility:
                raise ValueError(
                    f"input_size {self.input_size} must be divisible by {self.divisibility}"
                )

    @classmethod
    def tiny(cls, **overrides):
        """Desk-scale configuration for tests and small experiments.

        Depth leans on the first two stages because at small input sizes
        the late stages see very few tokens; a short state suffices for
        the short scan sequences such inputs produce.
        """
        kw = dict(depths=(2, 2, 4, 2), channels=(16, 32, 32, 64), state=4,
                  cab_reduction=4, decoder_dim=32)
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def micro(cls, **overrides):
        """Minimal pipeline: every stage depth 1, small widths, patch 2.

        Small enough for exhaustive finite-difference verification; divides
        16x16 inputs (divisibility = patch_size * 8 = 16).
        """
        kw = dict(depths=(1, 1, 1, 1), channels=(4, 8, 8, 8), state=2,
                  cab_reduction=2, decoder_dim=8, patch_size=2)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Model(Module):
    """The end-to-end network. Input (B, H, W, 3) in [0, 1]; output (B, H, W, 1)
    strictly inside (0, 1)."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.config = config
        c1, c2, c3, c4 = config.channels
        mixer = dict(state=config.state, ssm_ratio=config.ssm_ratio,
                     cab_reduction=config.cab_reduction, use_cab=config.use_cab,
                     scan_mode=config.scan_mode, dtype=dtype)
        self.patch = PatchEmbed(rng, 3, c1, patch=config.patch_size,
                                divisibility=config.divisibility, dtype=dtype)
        self.stage1 = [MixedSSMBlock(rng, c1, **mixer) for _ in range(config.depths[0])]
        self.down1 = Downsample(rng, c1, c2, norm="ln", dtype=dtype)
        self.stage2 = [MixedSSMBlock(rng, c2, **mixer) for _ in range(config.depths[1])]
        self.down2 = Downsample(rng, c2, c3, norm="bn", dtype=dtype)
        self.stage3 = [InvertedResidual(rng, c3, expansion=config.expansion, dtype=dtype)
                       for _ in range(config.depths[2])]
        self.down3 = Downsample(rng, c3, c4, norm="bn", dtype=dtype)
        self.stage4 = [InvertedResidual(rng, c4, expansion=config.expansion, dtype=dtype)
                       for _ in range(config.depths[3])]
        self.decoder = Decoder(rng, config.channels, embed=config.decoder_dim, dtype=dtype)

    def _check_input(self, x: Tensor):
        if x.ndim != 4 or x.shape[3] != 3:
            raise ShapeError(f"model: expected (B, H, W, 3), got {x.shape}")
        _, h, w, _ = x.shape
        if self.config.input_size is not None and (h, w) != self.config.input_size:
            raise ShapeError(
                f"model: configured for input {self.config.input_size}, got ({h}, {w})"
            )
        lo, hi = float(x.data.min()), float(x.data.max())
        if lo < -1e-6 or hi > 1.0 + 1e-6:
            raise ValueError(f"model: image values must lie in [0, 1], got [{lo}, {hi}]")

    def forward_features(self, x: Tensor):
        """Stage outputs X1..X4 at strides 1/4, 1/8, 1/16, 1/32 of the input."""
        self._check_input(x)
        # fixed per-channel standardization: mean 0.5, std 0.5
        x = T.mul(T.sub(x, 0.5), 2.0)
        x = self.patch(x)
        for blk in self.stage1:
            x = blk(x)
        x1 = x
        x = self.down1(x)
        for blk in self.stage2:
            x = blk(x)
        x2 = x
        x = self.down2(x)
        for blk in self.stage3:
            x = blk(x)
        x3 = x
        x = self.down3(x)
        for blk in self.stage4:
            x = blk(x)
        return x1, x2, x3, x

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[1], x.shape[2]
        feats = self.forward_features(x)
        return self.decoder(feats, (h, w))


def build(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Deterministically initialize a model: same seed, same bits."""
    rng = np.random.default_rng(seed)
    return Model(config, rng, dtype=dtype)


def param_count(model: Model) -> int:
    return sum(t.size for _, t in model.named_parameters())


def mac_count(config: ModelConfig, input_size) -> int:
    """Analytic forward multiply-accumulate count at the given input size.

    Counts the dominant multiply terms per layer; elementwise adds and
    normalizations are excluded. Every counted term scales linearly with
    pixel count except the squeeze-excitation dense pair (constant per
    image), which is why doubling the pixels slightly undershoots 2x.
    """
    h, w = int(input_size[0]), int(input_size[1])
    p = config.patch_size
    c1, c2, c3, c4 = config.channels
    total = 0

    def mixed_ssm(hw, c):
        e = config.ssm_ratio * c
        n = config.state
        r = max(1, -(-e // 16))
        m = hw * c * 2 * e            # in_proj
        m += hw * 9 * e               # depthwise 3x3
        m += 4 * hw * e * (r + 2 * n)  # per-route x_proj
        m += 4 * hw * r * e           # per-route delta projection
        m += 4 * 6 * hw * e * n       # scan kernel
        m += hw * e                   # gate
        m += hw * e * c               # out_proj
        if config.use_cab:
            m += hw * 9 * c * c       # attention conv front
            m += hw * c               # pooling
            m += 2 * c * (c // config.cab_reduction)  # squeeze + excite
            m += hw * c               # channel scaling
        else:
            m += 2 * hw * c * 4 * c
        return m

    def inverted_residual(hw, c):
        t = config.expansion * c
        return hw * (c * t + 9 * t + t * c)

    gh, gw = h // p, w // p
    total += gh * gw * p * p * 3 * c1                      # patch embed
    total += config.depths[0] * mixed_ssm(gh * gw, c1)
    total += (gh // 2) * (gw // 2) * 4 * c1 * c2           # down1
    gh, gw = gh // 2, gw // 2
    total += config.depths[1] * mixed_ssm(gh * gw, c2)
    total += (gh // 2) * (gw // 2) * 4 * c2 * c3           # down2
    gh, gw = gh // 2, gw // 2
    total += config.depths[2] * inverted_residual(gh * gw, c3)
    total += (gh // 2) * (gw // 2) * 4 * c3 * c4           # down3
    gh, gw = gh // 2, gw // 2
    total += config.depths[3] * inverted_residual(gh * gw, c4)

    e = config.decoder_dim
    base = (h // p) * (w // p)
    scale = 1
    for c in config.channels:
        total += (base // (scale * scale)) * c * e         # stage projections
        total += base * e * 2 if scale > 1 else 0          # bilinear lerp work
        scale *= 2
    total += base * 4 * e * e                              # fuse
    total += base * e                                      # head
    total += h * w * 2                                     # final upsample
    return total


def param_and_flop_report(model: Model, input_size) -> tuple[int, int]:
    """Parameter and multiply-accumulate counts, printed with the reference
    budget (37M parameters / 64G MACs at 512x512) for eyeball comparison."""
    params = param_count(model)
    macs = mac_count(model.config, input_size)
    print(
        f"params: {params / 1e6:.2f}M  macs@{input_size[0]}x{input_size[1]}: "
        f"{macs / 1e9:.2f}G  (reference budget: 37M / 64G at 512x512)"
    )
    return params, macs
