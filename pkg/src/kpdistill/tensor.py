"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations needed by the keypoint network and its losses are
provided.  Operations are recorded on the innermost active :class:`Tape`
whenever at least one input requires a gradient; outside a tape nothing is
recorded, which is the inference path.

Layout convention for image-like data is ``(batch, channels, height, width)``.
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

MAGIC = b"KPT1"
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

_debug = bool(os.environ.get("KPDISTILL_DEBUG"))
_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent with an operation."""


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an operation produces NaN or infinity."""


def set_debug(enabled: bool) -> None:
    """Toggle finite-value assertions after every forward and backward rule."""
    global _debug
    _debug = bool(enabled)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("only scalar multiplication is supported")
        return scale(self, float(other))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return total(self)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class Tape:
    """Records operations for one reverse pass.

    Use as a context manager; operations executed inside the ``with`` block on
    tensors that require gradients are appended in order.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            if node.output.requires_grad:
                node.output.grad = g
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if _debug:
                    _check_finite(gi, f"backward of {node.name}")
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
        # leaves: anything left over was never an op output on this tape
        for node in self.nodes:
            for inp in node.inputs:
                g = grads.pop(id(inp), None)
                if g is not None:
                    inp.grad = g if inp.grad is None else inp.grad + g
        if loss.requires_grad and loss.grad is None:
            loss.grad = np.ones_like(loss.data)


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NonFiniteError(f"non-finite value in {where} at index {tuple(int(i) for i in bad)}")


def record(
    name: str,
    out_data: np.ndarray,
    inputs: Iterable[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out_data`` in a tensor and register its backward rule.

    ``backward`` receives the gradient w.r.t. the output and returns one
    gradient (or ``None``) per input, in order.
    """
    inputs = tuple(inputs)
    if _debug:
        _check_finite(out_data, name)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.nodes.append(Node(inputs, out, backward, name))
    return out


# --------------------------------------------------------------------------
# operations


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and b.data.size != 1 and a.data.size != 1:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def reduce_to(g, t):
        return np.sum(g).reshape(t.shape) if t.shape != g.shape else g

    return record("add", a.data + b.data, (a, b), lambda g: (reduce_to(g, a), reduce_to(g, b)))


def scale(a: Tensor, factor: float) -> Tensor:
    return record("scale", a.data * a.data.dtype.type(factor), (a,), lambda g: (g * factor,))


def total(a: Tensor) -> Tensor:
    return record("sum", np.sum(a.data, keepdims=False).reshape(()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation over ``(N, C, H, W)`` input with ``(O, C, kh, kw)`` weights."""
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input shape {x.shape} incompatible with weight shape {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match weight shape {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input shape {x.shape} too small for weight shape {weight.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (N, C, Ho, Wo, kh, kw) -> (N, Ho, Wo, C*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gt = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gt.T @ cols.reshape(-1, c * kh * kw)).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gt @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", out, inputs, backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, x.data.dtype.type(0)), (x,), lambda g: (g * mask,))


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; gradient goes to the first maximum in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial size {h}x{w} must be even")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = (np.arange(4) == idx[..., None]) * g[..., None]
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx.astype(g.dtype, copy=False),)

    return record("maxpool2", out, (x,), backward)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1, independently at every (batch, y, x) position."""
    if x.data.ndim < 2 or x.shape[1] < 2:
        raise ShapeError(f"softmax_channels: need at least 2 channels, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return record("softmax", s, (x,), lambda g: (s * (g - np.sum(g * s, axis=1, keepdims=True)),))


def log_softmax_channels(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return record("log_softmax", out, (x,), lambda g: (g - s * np.sum(g, axis=1, keepdims=True),))


def l2_normalize_channels(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True)) + x.data.dtype.type(eps)
    y = x.data / norm
    return record("l2_normalize", y, (x,), lambda g: ((g - y * np.sum(g * y, axis=1, keepdims=True)) / norm,))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over all elements."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=diff.dtype)

    def backward(g):
        ga = diff * (2.0 * g / n)
        return ga, -ga

    return record("mse", out, (a, b), backward)


def pad_replicate(x: Tensor, pad: int) -> Tensor:
    """Pad the two spatial axes by repeating edge values."""
    if pad == 0:
        return x
    h, w = x.shape[-2:]
    rows = np.clip(np.arange(-pad, h + pad), 0, h - 1)
    cols = np.clip(np.arange(-pad, w + pad), 0, w - 1)
    out = x.data[..., rows, :][..., cols]

    def backward(g):
        gr = np.zeros(g.shape[:-2] + (h, g.shape[-1]), dtype=g.dtype)
        np.add.at(gr, (Ellipsis, rows, slice(None)), g)
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, (Ellipsis, cols), gr)
        return (gx,)

    return record("pad_replicate", out, (x,), backward)


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst: tuple[int, int] | None  # (input index, flat element index)
    checked: int
    message: str = ""


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    max_checks: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``.  With
    ``max_checks`` set, a seeded random subset of that many elements per input
    is probed instead of all of them.
    """
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = f(*inputs)
        tape.backward(loss)
    if not np.isfinite(loss.data).all():
        return GradCheckReport(False, float("inf"), None, 0, "non-finite loss at the base point")

    rng = np.random.default_rng(seed)
    worst_err, worst_at, checked = 0.0, None, 0
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idxs = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(f(*inputs).data)
            flat[i] = orig - epsilon
            fm = float(f(*inputs).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckReport(False, float("inf"), (k, int(i)), checked, f"non-finite loss perturbing input {k} element {i}")
            num = (fp - fm) / (2 * epsilon)
            ana = float(analytic.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            checked += 1
            if err > worst_err:
                worst_err, worst_at = err, (k, int(i))
    ok = worst_err <= tolerance
    msg = "" if ok else f"max relative error {worst_err:.3g} at input {worst_at[0]} element {worst_at[1]}"
    return GradCheckReport(ok, worst_err, worst_at, checked, msg)


# --------------------------------------------------------------------------
# serialization


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_TAGS:
        raise TypeError(f"cannot serialize dtype {arr.dtype}")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<B", _DTYPE_TAGS[dt])
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor starting at ``offset``; returns it and the end offset."""
    if buf[offset : offset + 4] != MAGIC:
        raise ValueError(f"bad tensor magic at offset {offset}")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    dims = struct.unpack_from(f"<{rank}I", buf, offset + 8)
    pos = offset + 8 + 4 * rank
    (tag,) = struct.unpack_from("<B", buf, pos)
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown dtype tag {tag}")
    dt = _TAG_DTYPES[tag]
    pos += 1
    count = int(np.prod(dims, dtype=np.int64))
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(dims).astype(dt.newbyteorder("="))
    return Tensor(arr), pos + count * dt.itemsize
