"""Minimal dense-matrix engine with reverse-mode automatic differentiation.

Covers exactly the operations the attention/scoring/loss graph needs:
matmul, broadcasting add/sub/mul/div, scale/shift, transpose, masked row
softmax, row normalization, elementwise log/pow/clamp, full-tensor
sum/mean, and top-fraction mean. Every op validates shapes and rejects
non-finite outputs. Storage dtype is float32 by default; pass float64
tensors for high-precision gradient checks.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DataError, NumericError

DEFAULT_DTYPE = np.float32

_TAPE_STACK: list["Tape"] = []


class Tensor2:
    """A 2-D tensor of finite reals with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DataError(f"Tensor2 requires 2-D data, got shape {arr.shape}")
        if dtype is not None:
            arr = arr.astype(dtype)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if not np.isfinite(arr).all():
            raise NumericError("Tensor2 data must be finite")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def is_scalar(self) -> bool:
        return self.data.shape == (1, 1)

    def item(self) -> float:
        if not self.is_scalar():
            raise DataError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor2(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations; construction order is topological order."""

    def __init__(self):
        self._records: list[tuple[Tensor2, list[tuple[Tensor2, object]]]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()

    def record(self, out: Tensor2, pulls: list[tuple[Tensor2, object]]) -> None:
        self._records.append((out, pulls))
        self._produced.add(id(out))

    def backward(self, loss: Tensor2) -> None:
        """Accumulate d(loss)/d(leaf) into the grad fields of all leaves.

        Repeated calls keep accumulating; zero grads between steps.
        """
        if not loss.is_scalar():
            raise DataError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise DataError("loss was not produced on this tape")
        flowing: dict[int, np.ndarray] = {
            id(loss): np.ones((1, 1), dtype=loss.data.dtype)
        }
        for out, pulls in reversed(self._records):
            grad_out = flowing.pop(id(out), None)
            if grad_out is None:
                continue
            for parent, pull in pulls:
                if not parent.requires_grad:
                    continue
                contrib = pull(grad_out)
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + contrib
                elif id(parent) in self._produced:
                    flowing[key] = contrib
                else:  # leaf: accumulate into the public grad field
                    if parent.grad is None:
                        parent.grad = contrib.copy()
                    else:
                        parent.grad = parent.grad + contrib


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(out_data: np.ndarray, pulls: list[tuple[Tensor2, object]]) -> Tensor2:
    if not np.isfinite(out_data).all():
        raise NumericError("operation produced non-finite values")
    out = Tensor2(out_data, requires_grad=any(p.requires_grad for p, _ in pulls))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, pulls)
    return out


def _check_same_dtype(a: Tensor2, b: Tensor2) -> None:
    if a.data.dtype != b.data.dtype:
        raise DataError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and grad.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _broadcastable(a: Tensor2, b: Tensor2, op: str) -> None:
    ar, ac = a.shape
    br, bc = b.shape
    if (br in (1, ar)) and (bc in (1, ac)):
        return
    raise DataError(f"{op}: shape {a.shape} incompatible with {b.shape}")


def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    _check_same_dtype(a, b)
    if a.cols != b.rows:
        raise DataError(f"matmul: shape {a.shape} incompatible with {b.shape}")
    out = a.data @ b.data
    return _make(out, [
        (a, lambda g, bd=b.data: g @ bd.T),
        (b, lambda g, ad=a.data: ad.T @ g),
    ])


def transpose(a: Tensor2) -> Tensor2:
    return _make(a.data.T.copy(), [(a, lambda g: g.T)])


def add(a: Tensor2, b: Tensor2) -> Tensor2:
    _check_same_dtype(a, b)
    _broadcastable(a, b, "add")
    return _make(a.data + b.data, [
        (a, lambda g, s=a.shape: _reduce_to(g, s)),
        (b, lambda g, s=b.shape: _reduce_to(g, s)),
    ])


def sub(a: Tensor2, b: Tensor2) -> Tensor2:
    _check_same_dtype(a, b)
    _broadcastable(a, b, "sub")
    return _make(a.data - b.data, [
        (a, lambda g, s=a.shape: _reduce_to(g, s)),
        (b, lambda g, s=b.shape: -_reduce_to(g, s)),
    ])


def mul(a: Tensor2, b: Tensor2) -> Tensor2:
    _check_same_dtype(a, b)
    _broadcastable(a, b, "mul")
    return _make(a.data * b.data, [
        (a, lambda g, bd=b.data, s=a.shape: _reduce_to(g * bd, s)),
        (b, lambda g, ad=a.data, s=b.shape: _reduce_to(g * ad, s)),
    ])


def div(a: Tensor2, b: Tensor2) -> Tensor2:
    _check_same_dtype(a, b)
    _broadcastable(a, b, "div")
    out = a.data / b.data
    return _make(out, [
        (a, lambda g, bd=b.data, s=a.shape: _reduce_to(g / bd, s)),
        (b, lambda g, ad=a.data, bd=b.data, s=b.shape: _reduce_to(-g * ad / (bd * bd), s)),
    ])


def scale(a: Tensor2, k: float) -> Tensor2:
    k = a.data.dtype.type(k)
    return _make(a.data * k, [(a, lambda g: g * k)])


def shift(a: Tensor2, c: float) -> Tensor2:
    c = a.data.dtype.type(c)
    return _make(a.data + c, [(a, lambda g: g)])


def log(a: Tensor2) -> Tensor2:
    if (a.data <= 0).any():
        raise NumericError("log requires strictly positive inputs")
    return _make(np.log(a.data), [(a, lambda g, ad=a.data: g / ad)])


def power(a: Tensor2, p: float) -> Tensor2:
    out = np.power(a.data, p)
    return _make(out, [
        (a, lambda g, ad=a.data: g * p * np.power(ad, p - 1.0)),
    ])


def clamp(a: Tensor2, lo: float, hi: float) -> Tensor2:
    if lo > hi:
        raise DataError(f"clamp: lo {lo} > hi {hi}")
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), [
        (a, lambda g, m=inside: g * m),
    ])


def softmax_rows(x: Tensor2, additive_mask: Tensor2 | None = None) -> Tensor2:
    """Row softmax with numerical max-subtraction and an optional additive mask.

    Mask entries are 0 (keep) or a large negative value (drop); a fully
    masked row falls back to a uniform distribution with zero gradient.
    """
    z = x.data
    fully_masked = None
    if additive_mask is not None:
        if additive_mask.requires_grad:
            raise DataError("softmax mask must not require gradients")
        _broadcastable(x, additive_mask, "softmax_rows")
        mask = np.broadcast_to(additive_mask.data, x.shape)
        z = z + mask
        fully_masked = (mask != 0).all(axis=1)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    if fully_masked is not None and fully_masked.any():
        y = y.copy()
        y[fully_masked] = 1.0 / x.cols

    def pull(g, yd=y, dead=fully_masked):
        gx = yd * (g - (g * yd).sum(axis=1, keepdims=True))
        if dead is not None and dead.any():
            gx = gx.copy()
            gx[dead] = 0.0
        return gx

    return _make(y, [(x, pull)])


def normalize_rows_t(a: Tensor2) -> Tensor2:
    """L2-normalize each row; zero rows stay zero and receive zero gradient."""
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    y = a.data / safe

    def pull(g, yd=y, sn=safe, zero=(norms == 0.0)):
        gx = (g - (g * yd).sum(axis=1, keepdims=True) * yd) / sn
        if zero.any():
            gx = gx * ~zero
        return gx

    return _make(y, [(a, pull)])


def sum_all(a: Tensor2) -> Tensor2:
    out = np.array([[a.data.sum()]], dtype=a.data.dtype)
    return _make(out, [
        (a, lambda g, s=a.shape, dt=a.data.dtype: np.full(s, g[0, 0], dtype=dt)),
    ])


def mean_all(a: Tensor2) -> Tensor2:
    n = a.rows * a.cols
    out = np.array([[a.data.mean()]], dtype=a.data.dtype)
    return _make(out, [
        (a, lambda g, s=a.shape, dt=a.data.dtype: np.full(s, g[0, 0] / n, dtype=dt)),
    ])


def top_fraction_count(length: int, fraction: float) -> int:
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    return max(1, math.ceil(fraction * length))


def mean_top_fraction(a: Tensor2, fraction: float) -> Tensor2:
    """Mean of the k = max(1, ceil(fraction*L)) largest entries.

    The tensor is read as a flat row-major vector; ties are broken by
    lowest flat index. Gradient is 1/k on the selected entries.
    """
    flat = a.data.reshape(-1)
    if flat.size == 0:
        raise DataError("mean_top_fraction: empty input")
    k = top_fraction_count(flat.size, fraction)
    picked = np.argsort(-flat, kind="stable")[:k]
    out = np.array([[flat[picked].mean()]], dtype=a.data.dtype)

    def pull(g, idx=picked, s=a.shape, dt=a.data.dtype):
        gx = np.zeros(s[0] * s[1], dtype=dt)
        gx[idx] = g[0, 0] / k
        return gx.reshape(s)

    return _make(out, [(a, pull)])


def constant(data, dtype=None) -> Tensor2:
    return Tensor2(data, requires_grad=False, dtype=dtype)


def backward(tape: Tape, loss: Tensor2) -> None:
    tape.backward(loss)
