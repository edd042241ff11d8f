"""Neural building blocks: patch embedding, Mixed-SSM block with channel
attention, downsampling, inverted residuals, and the multi-scale decoder.

Everything is channels-last (B, H, W, C). Blocks are Modules: lightweight
containers whose parameters are discovered by walking attributes, so layers
compose by plain attribute assignment.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .scan2d import SS2DParams, ss2d_block
from .tensor import ShapeError, Tensor, truncated_normal


class Module:
    """Base for parameterized blocks.

    ``named_parameters`` walks instance attributes: trainable Tensors,
    child Modules, lists of Modules, and parameter containers exposing
    ``named_tensors``. Non-trainable state (running statistics) registers
    through ``_buffers`` and travels with checkpoints but not gradients.
    """

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if name.startswith("_") or name == "training":
                continue
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")
            elif hasattr(value, "named_tensors"):
                yield from value.named_tensors(full)

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, arr in self._buffers.items():
            yield (f"{prefix}.{name}" if prefix else name), arr
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Module):
                yield from value.named_buffers(full)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}")

    def train(self, flag: bool = True):
        self.training = flag
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(flag)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, rng, in_dim: int, out_dim: int, bias: bool = True, dtype=np.float32):
        super().__init__()
        self.w = Tensor(truncated_normal(rng, (in_dim, out_dim), dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        out = T.matmul(T.reshape(x, (-1 if not lead else int(np.prod(lead)), x.shape[-1])), self.w)
        if self.b is not None:
            out = T.add(out, self.b)
        return T.reshape(out, lead + (self.w.shape[1],))


class Conv2D(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, bias: bool = True, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.w = Tensor(truncated_normal(rng, (kernel, kernel, in_ch, out_ch), dtype=dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class DepthwiseConv2D(Module):
    def __init__(self, rng, channels: int, kernel: int = 3, padding: int = 1,
                 bias: bool = True, dtype=np.float32):
        super().__init__()
        self.padding = padding
        self.w = Tensor(truncated_normal(rng, (kernel, kernel, channels), dtype=dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.depthwise_conv2d(x, self.w, self.b, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        self.g = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.g, self.b)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.g = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self._buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self._buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x, self.g, self.b,
            self._buffers["running_mean"], self._buffers["running_var"],
            training=self.training, momentum=self.momentum,
        )


class PatchEmbed(Module):
    """Non-overlapping stride-``patch`` projection of the image to C1 channels.

    Spatial dims must be divisible by ``divisibility`` (the full downstream
    pipeline's requirement, patch size times 8), checked here so the error
    surfaces at the entrance.
    """

    def __init__(self, rng, in_ch: int, out_ch: int, patch: int = 4,
                 divisibility: int | None = None, dtype=np.float32):
        super().__init__()
        self.patch = patch
        self.divisibility = divisibility if divisibility is not None else patch * 8
        self.proj = Conv2D(rng, in_ch, out_ch, kernel=patch, stride=patch, bias=False, dtype=dtype)
        self.norm = LayerNorm(out_ch, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"patch embed: expected (B, H, W, C), got {x.shape}")
        _, h, w, _ = x.shape
        if h % self.divisibility or w % self.divisibility:
            raise ShapeError(
                f"patch embed: spatial dims ({h}, {w}) must be divisible by "
                f"{self.divisibility}"
            )
        return self.norm(self.proj(x))


class ChannelAttention(Module):
    """3x3 convolution followed by squeeze-excitation channel re-weighting."""

    def __init__(self, rng, channels: int, reduction: int, dtype=np.float32):
        super().__init__()
        if channels % reduction:
            raise ValueError(
                f"channel attention: channels {channels} not divisible by reduction {reduction}"
            )
        self.conv = Conv2D(rng, channels, channels, kernel=3, padding=1, dtype=dtype)
        self.squeeze = Linear(rng, channels, channels // reduction, dtype=dtype)
        self.excite = Linear(rng, channels // reduction, channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        s = T.sigmoid(self.excite(T.relu(self.squeeze(T.global_avg_pool(y)))))
        s = T.reshape(s, (s.shape[0], 1, 1, s.shape[1]))
        return T.mul(y, s)


class MLP(Module):
    """Two dense layers with SiLU between, the no-attention ablation arm."""

    def __init__(self, rng, channels: int, hidden: int | None = None, dtype=np.float32):
        super().__init__()
        hidden = hidden if hidden is not None else 4 * channels
        self.fc1 = Linear(rng, channels, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(x)))


class MixedSSMBlock(Module):
    """Two pre-norm residual sub-layers: 2D selective scan, then channel
    attention (or a plain MLP when ``use_cab`` is off)."""

    def __init__(self, rng, channels: int, state: int = 16, ssm_ratio: int = 2,
                 cab_reduction: int = 16, use_cab: bool = True,
                 scan_mode: str = "zoh", dtype=np.float32):
        super().__init__()
        self.scan_mode = scan_mode
        self.norm1 = LayerNorm(channels, dtype=dtype)
        self.ssm = SS2DParams(rng, channels, state=state, ssm_ratio=ssm_ratio, dtype=dtype)
        self.norm2 = LayerNorm(channels, dtype=dtype)
        if use_cab:
            self.mixer = ChannelAttention(rng, channels, cab_reduction, dtype=dtype)
        else:
            self.mixer = MLP(rng, channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = T.add(x, ss2d_block(self.norm1(x), self.ssm, mode=self.scan_mode))
        x = T.add(x, self.mixer(self.norm2(x)))
        return x


class Downsample(Module):
    """Stride-2 convolution plus normalization; halves both spatial dims."""

    def __init__(self, rng, in_ch: int, out_ch: int, norm: str = "ln", dtype=np.float32):
        super().__init__()
        self.conv = Conv2D(rng, in_ch, out_ch, kernel=2, stride=2, bias=False, dtype=dtype)
        if norm == "ln":
            self.norm = LayerNorm(out_ch, dtype=dtype)
        elif norm == "bn":
            self.norm = BatchNorm(out_ch, dtype=dtype)
        else:
            raise ValueError(f"downsample: unknown norm {norm!r}")

    def forward(self, x: Tensor) -> Tensor:
        _, h, w, _ = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"downsample: spatial dims ({h}, {w}) must be even")
        return self.norm(self.conv(x))


class InvertedResidual(Module):
    """Pointwise expand, depthwise 3x3, pointwise project, all with BN; the
    activations are ReLU6 and the residual applies when shapes match."""

    def __init__(self, rng, in_ch: int, out_ch: int | None = None,
                 expansion: int = 4, dtype=np.float32):
        super().__init__()
        out_ch = out_ch if out_ch is not None else in_ch
        self.residual = in_ch == out_ch
        mid = expansion * in_ch
        self.expand = Conv2D(rng, in_ch, mid, kernel=1, bias=False, dtype=dtype)
        self.bn1 = BatchNorm(mid, dtype=dtype)
        self.dw = DepthwiseConv2D(rng, mid, kernel=3, padding=1, bias=False, dtype=dtype)
        self.bn2 = BatchNorm(mid, dtype=dtype)
        self.project = Conv2D(rng, mid, out_ch, kernel=1, bias=False, dtype=dtype)
        self.bn3 = BatchNorm(out_ch, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = T.clip(self.bn1(self.expand(x)), 0.0, 6.0)
        y = T.clip(self.bn2(self.dw(y)), 0.0, 6.0)
        y = self.bn3(self.project(y))
        return T.add(x, y) if self.residual else y


class Decoder(Module):
    """Fuse the four stage features into a full-resolution probability map.

    Each stage is linearly mapped to a shared width, upsampled to the 1/4
    grid, concatenated and fused; a 1-channel head is then upsampled to the
    input size and squashed. Output entries are clamped strictly inside
    (0, 1) so downstream logarithms stay finite.
    """

    P_MIN = 1e-7

    def __init__(self, rng, stage_channels, embed: int = 128, dtype=np.float32):
        super().__init__()
        self.proj = [Linear(rng, c, embed, dtype=dtype) for c in stage_channels]
        self.fuse = Linear(rng, embed * len(stage_channels), embed, bias=False, dtype=dtype)
        self.fuse_norm = BatchNorm(embed, dtype=dtype)
        self.head = Linear(rng, embed, 1, dtype=dtype)

    def forward(self, features, out_size) -> Tensor:
        if len(features) != len(self.proj):
            raise ShapeError(f"decoder: expected {len(self.proj)} stage features")
        base_h, base_w = features[0].shape[1], features[0].shape[2]
        cols = []
        for i, (f, proj) in enumerate(zip(features, self.proj)):
            p = proj(f)
            if f.shape[1] != base_h:
                if base_h % f.shape[1] or base_w % f.shape[2]:
                    raise ShapeError(
                        f"decoder: stage {i} grid {f.shape[1:3]} does not divide ({base_h}, {base_w})"
                    )
                p = T.upsample_bilinear(p, scale=base_h // f.shape[1])
            cols.append(p)
        fused = T.relu(self.fuse_norm(self.fuse(T.concat(cols, axis=-1))))
        logits = self.head(fused)
        logits = T.upsample_bilinear(logits, size=out_size)
        return T.clip(T.sigmoid(logits), self.P_MIN, 1.0 - self.P_MIN)
