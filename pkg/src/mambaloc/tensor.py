"""N-dimensional tensors with reverse-mode automatic differentiation.

Values live in flat row-major numpy buffers (float32 by default, float64 for
verification work). Differentiable operations record themselves on the active
:class:`GradTape`; replaying the tape in reverse accumulates gradients into
``Tensor.grad``. Only the primitives needed by the forgery-localization
pipeline are provided; this is not a general-purpose autodiff system.
"""

from __future__ import annotations

import contextlib

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's contract."""


class NumericError(ArithmeticError):
    """Raised when a primitive produces (or receives) non-finite values."""


_ACTIVE_TAPE: "GradTape | None" = None
_FINITE_CHECKS = True


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Temporarily enable or disable per-op finite-value validation."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite values in result")


class Tensor:
    """A dense real-valued array, optionally carrying a gradient buffer.

    Tensors that participate in a tape must not be mutated in place while the
    tape is alive; the optimizer mutates leaf parameters only between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_recorded")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = np.ascontiguousarray(arr) if arr.ndim else arr

        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._recorded = False  # True when produced by a taped op

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    """Ordered record of primitive applications with their backward rules.

    Walking the entries in reverse order and applying each backward rule
    accumulates ``dLoss/dx`` into ``x.grad`` for every tensor reachable from
    the loss; construction order is a valid topological order by definition.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a GradTape is already active in this context")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and replay all entries in reverse order."""
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, parents, backward in reversed(self._entries):
            if out.grad is None:
                continue  # not on a path to the loss
            grads = backward(out.grad)
            for parent, g in zip(parents, grads):
                if g is None or not (parent.requires_grad or parent._recorded):
                    continue
                if g.shape != parent.data.shape:
                    raise ShapeError(
                        f"backward: gradient shape {g.shape} does not match "
                        f"tensor shape {parent.data.shape}"
                    )
                if parent.grad is None:
                    parent.grad = g.astype(parent.data.dtype, copy=True)
                else:
                    parent.grad += g


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def record(out_data: np.ndarray, parents: tuple, backward, name: str) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record the op on the active tape.

    ``backward(grad_out)`` must return per-parent gradients (None for inputs
    that do not take gradients) in the order of ``parents``. This is the
    extension point used by fused ops (selective scan, grid partition).
    """
    _check_finite(out_data, name)
    out = Tensor(out_data)
    needs = any(p.requires_grad or p._recorded for p in parents)
    out.requires_grad = needs
    if _ACTIVE_TAPE is not None and needs:
        out._recorded = True
        _ACTIVE_TAPE._entries.append((out, tuple(parents), backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}: {e}") from None
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"subtract: {a.shape} vs {b.shape}: {e}") from None
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "subtract")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"multiply: {a.shape} vs {b.shape}: {e}") from None
    return record(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "multiply",
    )


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        out = a.data / b.data
    except ValueError as e:
        raise ShapeError(f"divide: {a.shape} vs {b.shape}: {e}") from None

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return record(out, (a, b), backward, "divide")


def power(x, p: float) -> Tensor:
    """Elementwise x**p for constant p (x > 0 required for non-integer p)."""
    x = _as_tensor(x)
    p = float(p)
    out = x.data ** p

    def backward(g):
        if p == 2.0:
            return (g * (2.0 * x.data),)
        if p == 1.0:
            return (g,)
        return (g * p * x.data ** (p - 1.0),)

    return record(out, (x,), backward, "power")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return record(out, (x,), lambda g: (g / x.data,), "log")


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    out = np.logaddexp(np.zeros((), dtype=x.data.dtype), x.data)
    return record(out, (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # overflow-safe: never exponentiates a positive argument
    z = np.exp(-np.abs(x))
    pos = 1.0 / (1.0 + z)
    return np.where(x >= 0, pos, 1.0 - pos)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = _sigmoid(x.data)
    return record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    out = x.data * s
    return record(out, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),), "silu")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)
    return record(out, (x,), lambda g: (g * (x.data > 0),), "relu")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through strictly inside the bounds."""
    x = _as_tensor(x)
    out = np.clip(x.data, lo, hi)
    mask = (x.data > lo) & (x.data < hi)
    return record(out, (x,), lambda g: (g * mask,), "clip")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)

    return record(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return ((np.broadcast_to(g, x.shape) / count).astype(x.dtype, copy=False),)

    return record(np.asarray(out), (x,), backward, "mean")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.ascontiguousarray(x.data.reshape(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return record(out, (x,), lambda g: (np.ascontiguousarray(g.reshape(x.shape)),), "reshape")


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    inv = tuple(np.argsort(axes))
    return record(out, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),), "permute")


def flip(x, axis: int) -> Tensor:
    x = _as_tensor(x)
    out = np.ascontiguousarray(np.flip(x.data, axis=axis))
    return record(out, (x,), lambda g: (np.ascontiguousarray(np.flip(g, axis=axis)),), "flip")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {e}") from None
    ax = axis % out.ndim
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(offsets[i], offsets[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(pieces)

    return record(out, tuple(tensors), backward, "concat")


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` elements along ``axis``."""
    x = _as_tensor(x)
    ax = axis % x.ndim
    if start < 0 or start + length > x.shape[ax]:
        raise ShapeError(f"narrow: [{start}:{start + length}] out of range for axis {ax} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, start + length)
    out = np.ascontiguousarray(x.data[tuple(sl)])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[tuple(sl)] = g
        return (gx,)

    return record(out, (x,), backward, "narrow")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_windows(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Extract stride-subsampled (kh, kw) windows of x (B, H, W, C)."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, OH, OW, C, kh, kw)
    return win


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution: x (B, H, W, Cin), w (kh, kw, Cin, Cout), channels last."""
    x = _as_tensor(x)
    w = _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expects x (B,H,W,C) and w (kh,kw,Cin,Cout), got {x.shape}, {w.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape[3]} vs kernel Cin {cin}")
    B, H, W, _ = x.shape
    oh = (H + 2 * padding - kh) // stride + 1
    ow = (W + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {H}x{W} (pad {padding})")

    win = _conv_windows(x.data, kh, kw, stride, padding)     # (B,OH,OW,C,kh,kw)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * oh * ow, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(B, oh, ow, cout)

    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} vs Cout {cout}")
        out = out + b.data
        parents.append(b)

    def backward(g):
        gmat = g.reshape(B * oh * ow, cout)
        gw = (cols.T @ gmat).reshape(kh, kw, cin, cout)
        gcols = (gmat @ wmat.T).reshape(B, oh, ow, kh, kw, cin)
        hp, wp = H + 2 * padding, W + 2 * padding
        gxp = np.zeros((B, hp, wp, cin), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, :, i, j]
        gx = gxp[:, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    return record(out, tuple(parents), backward, "conv2d")


def depthwise_conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel 2D convolution: x (B, H, W, C), w (kh, kw, C)."""
    x = _as_tensor(x)
    w = _as_tensor(w)
    if x.ndim != 4 or w.ndim != 3:
        raise ShapeError(f"depthwise_conv2d: expects x (B,H,W,C) and w (kh,kw,C), got {x.shape}, {w.shape}")
    kh, kw, c = w.shape
    if x.shape[3] != c:
        raise ShapeError(f"depthwise_conv2d: channels {x.shape[3]} vs kernel {c}")
    B, H, W, _ = x.shape
    oh = (H + 2 * padding - kh) // stride + 1
    ow = (W + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"depthwise_conv2d: kernel {kh}x{kw} does not fit input {H}x{W} (pad {padding})")

    win = _conv_windows(x.data, kh, kw, stride, padding)     # (B,OH,OW,C,kh,kw)
    out = np.einsum("bhwcij,ijc->bhwc", win, w.data, optimize=True)

    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (c,):
            raise ShapeError(f"depthwise_conv2d: bias shape {b.shape} vs channels {c}")
        out = out + b.data
        parents.append(b)

    def backward(g):
        gw = np.einsum("bhwcij,bhwc->ijc", win, g, optimize=True)
        hp, wp = H + 2 * padding, W + 2 * padding
        gxp = np.zeros((B, hp, wp, c), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += g * w.data[i, j]
        gx = gxp[:, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    return record(out, tuple(parents), backward, "depthwise_conv2d")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (channel) axis, then apply the affine pair."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma, x)
    beta = _as_tensor(beta, x)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs channels {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gxhat = g * gamma.data
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        red = tuple(range(g.ndim - 1))
        return (gx.astype(x.dtype, copy=False), (g * xhat).sum(axis=red), g.sum(axis=red))

    return record(out, (x, gamma, beta), backward, "layer_norm")


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Normalize each channel over all other axes (channels-last layout).

    Training mode uses batch statistics and updates the running buffers in
    place (momentum = weight of the new estimate, unbiased variance, the usual
    convention); evaluation mode normalizes with the running buffers.
    """
    x = _as_tensor(x)
    gamma = _as_tensor(gamma, x)
    beta = _as_tensor(beta, x)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: affine shapes {gamma.shape}/{beta.shape} vs channels {c}")
    axes = tuple(range(x.ndim - 1))
    if training:
        n = int(np.prod([x.shape[a] for a in axes]))
        mu = x.data.mean(axis=axes)
        xc = x.data - mu
        var = np.mean(xc * xc, axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        var_unbiased = var * (n / (n - 1.0)) if n > 1 else var
        running_var *= (1.0 - momentum)
        running_var += momentum * var_unbiased
        out = xhat * gamma.data + beta.data

        def backward(g):
            gxhat = g * gamma.data
            m1 = gxhat.mean(axis=axes, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
            gx = inv * (gxhat - m1 - xhat * m2)
            return (gx.astype(x.dtype, copy=False), (g * xhat).sum(axis=axes), g.sum(axis=axes))

        return record(out, (x, gamma, beta), backward, "batch_norm")

    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        return ((g * gamma.data * inv).astype(x.dtype, copy=False),
                (g * xhat).sum(axis=red), g.sum(axis=red))

    return record(out, (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------

def global_avg_pool(x) -> Tensor:
    """Mean over the spatial axes of (B, H, W, C), giving (B, C)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expects (B,H,W,C), got {x.shape}")
    B, H, W, C = x.shape
    out = x.data.mean(axis=(1, 2))

    def backward(g):
        gx = np.broadcast_to(g[:, None, None, :], x.shape) / (H * W)
        return (gx.astype(x.dtype, copy=False),)

    return record(out, (x,), backward, "global_avg_pool")


def avg_pool2d(x, factor: int) -> Tensor:
    """Non-overlapping mean pooling by an exact integer factor."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expects (B,H,W,C), got {x.shape}")
    B, H, W, C = x.shape
    if H % factor or W % factor:
        raise ShapeError(f"avg_pool2d: {H}x{W} not divisible by factor {factor}")
    oh, ow = H // factor, W // factor
    out = x.data.reshape(B, oh, factor, ow, factor, C).mean(axis=(2, 4))

    def backward(g):
        gx = np.broadcast_to(
            g[:, :, None, :, None, :], (B, oh, factor, ow, factor, C)
        ) / (factor * factor)
        return (np.ascontiguousarray(gx).reshape(x.shape).astype(x.dtype, copy=False),)

    return record(out, (x,), backward, "avg_pool2d")


def _interp_axis(n_in: int, n_out: int):
    """Half-pixel-center linear interpolation indices and fractions."""
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(pos).astype(np.int64)
    f = pos - i0
    i0c = np.clip(i0, 0, n_in - 1)
    i1c = np.clip(i0 + 1, 0, n_in - 1)
    return i0c, i1c, f


def _lerp_along(x: np.ndarray, axis: int, i0, i1, f) -> np.ndarray:
    x0 = np.take(x, i0, axis=axis)
    x1 = np.take(x, i1, axis=axis)
    shape = [1] * x.ndim
    shape[axis] = len(f)
    fb = f.reshape(shape).astype(x.dtype)
    # lerp form keeps constant inputs exactly constant (x1 - x0 == 0)
    return x0 + fb * (x1 - x0)


def _lerp_adjoint(g: np.ndarray, axis: int, n_in: int, i0, i1, f) -> np.ndarray:
    shape = [1] * g.ndim
    shape[axis] = len(f)
    fb = f.reshape(shape).astype(g.dtype)
    out_shape = list(g.shape)
    out_shape[axis] = n_in
    gx = np.zeros(out_shape, dtype=g.dtype)
    idx0 = [slice(None)] * g.ndim
    idx0[axis] = i0
    idx1 = [slice(None)] * g.ndim
    idx1[axis] = i1
    np.add.at(gx, tuple(idx0), g * (1.0 - fb))
    np.add.at(gx, tuple(idx1), g * fb)
    return gx


def upsample_bilinear(x, size=None, scale: int | None = None) -> Tensor:
    """Bilinear resize of (B, H, W, C) to ``size`` or by an integer ``scale``."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear: expects (B,H,W,C), got {x.shape}")
    B, H, W, C = x.shape
    if (size is None) == (scale is None):
        raise ShapeError("upsample_bilinear: give exactly one of size, scale")
    oh, ow = (H * scale, W * scale) if scale is not None else (int(size[0]), int(size[1]))
    hi0, hi1, hf = _interp_axis(H, oh)
    wi0, wi1, wf = _interp_axis(W, ow)
    out = _lerp_along(_lerp_along(x.data, 1, hi0, hi1, hf), 2, wi0, wi1, wf)

    def backward(g):
        g = _lerp_adjoint(g, 2, W, wi0, wi1, wf)
        g = _lerp_adjoint(g, 1, H, hi0, hi1, hf)
        return (g,)

    return record(out, (x,), backward, "upsample_bilinear")


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02,
                     dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Normal(0, std) with values beyond 2 std redrawn (deterministic in rng)."""
    out = rng.normal(0.0, std, size=shape)
    mask = np.abs(out) > 2.0 * std
    while np.any(mask):
        out[mask] = rng.normal(0.0, std, size=int(mask.sum()))
        mask = np.abs(out) > 2.0 * std
    return out.astype(dtype)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(fn, point: Tensor, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a Tensor to a scalar Tensor; ``point`` is perturbed coordinate
    by coordinate (its buffer is restored afterwards). The error at each
    coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if epsilon <= 0:
        raise ShapeError("grad_check: epsilon must be positive")
    was_leaf = point.requires_grad
    point.requires_grad = True
    point.grad = None
    try:
        with GradTape() as tape:
            out = fn(point)
        if out.size != 1:
            raise ShapeError("grad_check: fn must return a scalar")
        tape.backward(out)
        analytic = (point.grad if point.grad is not None else np.zeros_like(point.data)).copy()

        flat = point.data.reshape(-1)
        numeric = np.empty(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = fn(point).data.item()
            flat[i] = orig - epsilon
            fm = fn(point).data.item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * epsilon)
        if not np.all(np.isfinite(numeric)):
            raise NumericError("grad_check: non-finite finite-difference value")
    finally:
        point.requires_grad = was_leaf
    a = analytic.reshape(-1).astype(np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))
