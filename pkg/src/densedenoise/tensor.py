"""Dense numeric arrays with a dynamic reverse-mode autodiff tape.

Tensors wrap contiguous float32 (or float64, for verification) numpy
buffers laid out NCHW for 4-D data.  Operations executed while a Tape is
active record a backward rule; Tape.backward replays the rules in reverse
execution order and accumulates gradients into every tensor that requires
them.  There is no graph compilation and no higher-order differentiation.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

DEFAULT_DTYPE = np.float32

Scalar = Union[int, float]


class ShapeMismatchError(ValueError):
    """Raised when two operands disagree on shape or channel count."""

    def __init__(self, what: str, a, b):
        super().__init__(f"{what}: {tuple(a)} vs {tuple(b)}")


class Tensor:
    """A dense array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of executed operations for one forward pass.

    Entries are (output, backward_rule) pairs; backward_rule receives the
    output gradient and accumulates into the inputs.  A tape may be reused
    after reset().
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, rule: Callable[[np.ndarray], None]):
        self._records.append((out, rule))

    def reset(self):
        self._records.clear()

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(t) into .grad of every reachable tensor."""
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not self._records:
            raise ValueError("backward on an empty tape")
        loss.accumulate_grad(np.ones_like(loss.data))
        for out, rule in reversed(self._records):
            if out.grad is not None:
                rule(out.grad)


_tape_stack: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


class no_grad:
    """Context manager that suppresses recording (inference mode)."""

    def __enter__(self):
        _tape_stack.append(None)  # type: ignore[arg-type]
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False


def backward(loss: Tensor):
    """Run reverse-mode accumulation on the currently active tape."""
    tape = active_tape()
    if tape is None:
        raise ValueError("backward called with no active tape")
    tape.backward(loss)


def _maybe_record(out: Tensor, inputs: Sequence[Tensor], rule) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, rule)
    return out


# ---------------------------------------------------------------------------
# elementwise ops


def _check_same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeMismatchError(what, a.shape, b.shape)


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        out = Tensor(a.data + a.dtype.type(b))

        def rule(g, a=a):
            if a.requires_grad:
                a.accumulate_grad(g)

        return _maybe_record(out, (a,), rule)
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def rule(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _maybe_record(out, (a, b), rule)


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)

    def rule(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _maybe_record(out, (a, b), rule)


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        s = a.dtype.type(b)
        out = Tensor(a.data * s)

        def rule(g, a=a, s=s):
            if a.requires_grad:
                a.accumulate_grad(g * s)

        return _maybe_record(out, (a,), rule)
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)

    def rule(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _maybe_record(out, (a, b), rule)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    out = Tensor(a.data / b.data)

    def rule(g, a=a, b=b, out=out):
        if a.requires_grad:
            a.accumulate_grad(g / b.data)
        if b.requires_grad:
            b.accumulate_grad(-g * out.data / b.data)

    return _maybe_record(out, (a, b), rule)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))

    def rule(g, a=a):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return _maybe_record(out, (a,), rule)


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)

    def rule(g, a=a):
        if a.requires_grad:
            a.accumulate_grad(g * (2.0 * a.data))

    return _maybe_record(out, (a,), rule)


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    """a**p for scalar p; caller guarantees a > 0 when p is non-integral."""
    out = Tensor(a.data ** exponent)

    def rule(g, a=a):
        if a.requires_grad:
            a.accumulate_grad(g * exponent * a.data ** (exponent - 1.0))

    return _maybe_record(out, (a,), rule)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    out = Tensor(np.maximum(a.data, floor))

    def rule(g, a=a):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > floor))

    return _maybe_record(out, (a,), rule)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def rule(g, a=a):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g, a.shape).copy())

    return _maybe_record(out, (a,), rule)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())

    def rule(g, a=a, n=n):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g / n, a.shape).copy())

    return _maybe_record(out, (a,), rule)


def mean_per_image(a: Tensor) -> Tensor:
    """[N,C,H,W] -> [N]; mean over all but the batch axis."""
    if a.ndim != 4:
        raise ValueError(f"mean_per_image expects 4-D input, got {a.shape}")
    n = a.data[0].size
    out = Tensor(a.data.mean(axis=(1, 2, 3)))

    def rule(g, a=a, n=n):
        if a.requires_grad:
            a.accumulate_grad(
                np.broadcast_to((g / n)[:, None, None, None], a.shape).copy()
            )

    return _maybe_record(out, (a,), rule)


# ---------------------------------------------------------------------------
# structural ops


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def rule(g, a=a):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _maybe_record(out, (a,), rule)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_channels of zero parts")
    first = parts[0]
    for p in parts[1:]:
        if (
            p.shape[0] != first.shape[0]
            or p.shape[2:] != first.shape[2:]
            or p.ndim != 4
        ):
            raise ShapeMismatchError("concat_channels", first.shape, p.shape)
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def rule(g, parts=tuple(parts), bounds=bounds):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[:, lo:hi])

    return _maybe_record(out, parts, rule)


def avg_pool2(a: Tensor) -> Tensor:
    """2x2 non-overlapping mean pool; odd trailing row/column dropped."""
    n, c, h, w = a.shape
    if h < 2 or w < 2:
        raise ValueError(f"avg_pool2 needs H,W >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    cropped = a.data[:, :, : 2 * h2, : 2 * w2]
    out = Tensor(cropped.reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5)))

    def rule(g, a=a, h2=h2, w2=w2):
        if a.requires_grad:
            gi = np.zeros_like(a.data)
            gi[:, :, : 2 * h2, : 2 * w2] = np.repeat(
                np.repeat(g, 2, axis=2), 2, axis=3
            ) * 0.25
            a.accumulate_grad(gi)

    return _maybe_record(out, (a,), rule)


# ---------------------------------------------------------------------------
# convolution


def _corr_windows(x: np.ndarray, kh: int, kw: int, padding: int) -> np.ndarray:
    """Sliding kh x kw windows of the zero-padded input: [N,C,H',W',kh,kw]."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    return np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of NCHW input with [Cout,Cin,kh,kw] filters."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    _, cin, _, _ = x.shape
    cout, cw, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if cin != cw:
        raise ShapeMismatchError("conv2d input channels vs weight channels", (cin,), (cw,))
    if bias is not None and bias.shape != (cout,):
        raise ShapeMismatchError("conv2d bias", bias.shape, (cout,))

    cols = _corr_windows(x.data, kh, kw, padding)
    y = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    if bias is not None:
        y += bias.data[None, :, None, None]
    out = Tensor(y)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def rule(g, x=x, weight=weight, bias=bias, cols=cols, kh=kh, kw=kw, padding=padding):
        if weight.requires_grad:
            dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            weight.accumulate_grad(dw)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            wf = weight.data[:, :, ::-1, ::-1]
            gcols = _corr_windows(g, kh, kw, kh - 1 - padding)
            dx = np.tensordot(gcols, wf, axes=([1, 4, 5], [0, 2, 3]))
            x.accumulate_grad(np.ascontiguousarray(dx.transpose(0, 3, 1, 2)))

    return _maybe_record(out, inputs, rule)


def depthwise_conv2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: int = 0
) -> Tensor:
    """Per-channel spatial conv with one [1,kh,kw] filter per input channel."""
    _, c, _, _ = x.shape
    cw, one, kh, kw = weight.shape
    if one != 1:
        raise ValueError(f"depthwise weight must be [C,1,kh,kw], got {weight.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"depthwise kernel extents must be odd, got {kh}x{kw}")
    if cw != c:
        raise ShapeMismatchError("depthwise channels", (c,), (cw,))
    if bias is not None and bias.shape != (c,):
        raise ShapeMismatchError("depthwise bias", bias.shape, (c,))

    cols = _corr_windows(x.data, kh, kw, padding)
    y = np.einsum("nchwij,cij->nchw", cols, weight.data[:, 0])
    if bias is not None:
        y += bias.data[None, :, None, None]
    out = Tensor(y)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def rule(g, x=x, weight=weight, bias=bias, cols=cols, kh=kh, kw=kw, padding=padding):
        if weight.requires_grad:
            dw = np.einsum("nchwij,nchw->cij", cols, g)
            weight.accumulate_grad(dw[:, None])
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            wf = weight.data[:, 0, ::-1, ::-1]
            gcols = _corr_windows(g, kh, kw, kh - 1 - padding)
            dx = np.einsum("nchwij,cij->nchw", gcols, wf)
            x.accumulate_grad(dx)

    return _maybe_record(out, inputs, rule)


def depthwise_separable_conv(
    x: Tensor,
    depthwise_weight: Tensor,
    pointwise_weight: Tensor,
    bias: Optional[Tensor] = None,
    padding: int = 0,
) -> Tensor:
    """Depthwise spatial stage followed by a 1x1 channel-mixing stage."""
    mid = depthwise_conv2d(x, depthwise_weight, padding=padding)
    return conv2d(mid, pointwise_weight, bias=bias, padding=0)


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    epsilon: float = 1e-5,
    momentum: float = 0.9,
) -> Tensor:
    """Per-channel normalization over (N,H,W); running stats are EMA-updated
    in train mode only and are plain buffers, never differentiated."""
    if x.ndim != 4:
        raise ValueError(f"batch_norm expects 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatchError("batch_norm gamma/beta vs channels", gamma.shape, (c,))
    if mode not in ("train", "infer"):
        raise ValueError(f"batch_norm mode must be 'train' or 'infer', got {mode!r}")

    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    std = np.sqrt(var + epsilon).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) / std[None, :, None, None]
    out = Tensor(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])

    def rule(g, x=x, gamma=gamma, beta=beta, xhat=xhat, std=std, mode=mode):
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gs = g * gamma.data[None, :, None, None]
            if mode == "train":
                m = x.shape[0] * x.shape[2] * x.shape[3]
                s1 = gs.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gs * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (gs - s1 / m - xhat * s2 / m) / std[None, :, None, None]
            else:
                dx = gs / std[None, :, None, None]
            x.accumulate_grad(dx)

    return _maybe_record(out, (x, gamma, beta), rule)
