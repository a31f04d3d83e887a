"""Dense float32 tensors with a small reverse-mode autodiff engine.

Every primitive returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  Calling
:func:`backward` on a scalar walks the recorded graph once in reverse
topological order and accumulates ``.grad`` on leaves that require gradients.

Broadcasting is intentionally narrow: a binary op accepts operands of equal
shape, or a second operand whose shape is a suffix of the first (a bias over
leading batch dimensions).  Anything else must be reshaped explicitly.
"""
from __future__ import annotations

import contextlib
import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32
LAYERNORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(shape):
    raise ShapeError(f"expected a single element, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
    out.grad = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_suffix(a: Tensor, b: Tensor, op: str) -> bool:
    """True when ``b`` broadcasts over leading dims of ``a``; False when shapes are equal."""
    if a.shape == b.shape:
        return False
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead else g


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    bcast = _check_suffix(a, b, "add")

    def backward(g):
        return g, (_sum_to(g, b.shape) if bcast else g)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    bcast = _check_suffix(a, b, "sub")

    def backward(g):
        gb = _sum_to(g, b.shape) if bcast else g
        return g, -gb

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    bcast = _check_suffix(a, b, "mul")

    def backward(g):
        ga = g * b.data if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * a.data
            if bcast:
                gb = _sum_to(gb, b.shape)
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data + DTYPE(c), (a,), lambda g: (g,), "add_scalar")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    th = np.tanh(DTYPE(_GELU_C) * x * (1.0 + DTYPE(0.044715) * x2))
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = DTYPE(_GELU_C) * (1.0 + DTYPE(3 * 0.044715) * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return _result(out, (a,), backward, "gelu")


def log(a: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log with the input clamped from below at ``floor``."""
    clamped = np.maximum(a.data, DTYPE(floor))
    live = a.data > floor

    def backward(g):
        return (np.where(live, g / clamped, 0.0).astype(DTYPE),)

    return _result(np.log(clamped), (a,), backward, "log")


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p).astype(DTYPE) / DTYPE(1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# reductions and normalisation


def softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (a,), backward, "softmax")


def layernorm(a: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise the last dimension to zero mean / unit variance (no affine part)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + DTYPE(eps))
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _result(y, (a,), backward, "layernorm")


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    if axis is None:
        def backward(g):
            return (np.broadcast_to(g, a.shape).astype(DTYPE),)

        return _result(np.asarray(a.data.sum(dtype=np.float64), dtype=DTYPE), (a,), backward, "sum")
    ax = axis % a.ndim

    def backward_axis(g):
        return (np.broadcast_to(np.expand_dims(g, ax), a.shape).astype(DTYPE),)

    return _result(a.data.sum(axis=ax), (a,), backward_axis, "sum_rows")


def sum_rows(a: Tensor) -> Tensor:
    """Sum over the first axis."""
    return sum(a, axis=0)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a (..., n, k)`` with ``b (k, m)`` or ``b (..., k, m)`` sharing leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        b.ndim > 2 and a.shape[:-2] != b.shape[:-2]
    ):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    if b.ndim == 2:
        def backward(g):
            ga = np.matmul(g, b.data.T) if a.requires_grad else None
            gb = None
            if b.requires_grad:
                k, m = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            return ga, gb
    else:
        def backward(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
            return ga, gb

    return _result(out, (a, b), backward, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of a ``(V, D)`` table; gradients scatter-add back into the table."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: index out of range for table {table.shape}")
    out = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(out, (table,), backward, "embedding")


# ---------------------------------------------------------------------------
# engine


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# finite-difference checking


class GradCheckReport:
    def __init__(self, max_rel_error: float, tol: float, checked: int, floor: float = 0.0):
        self.max_rel_error = max_rel_error
        self.tol = tol
        self.checked = checked
        self.floor = floor

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __repr__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"GradCheckReport({status}, max_rel_error={self.max_rel_error:.3g}, tol={self.tol}, "
                f"checked={self.checked}, floor={self.floor:.3g})")


def _scalar(f: Callable[[], Tensor]) -> float:
    return float(f().data.astype(np.float64).reshape(-1)[0])


def evaluation_noise(f: Callable[[], Tensor], inputs: Sequence[Tensor], probes: int = 8, ulps: float = 2.0,
                     rng: np.random.Generator | None = None) -> float:
    """Standard deviation of ``f`` when every input is jittered by a few ulps.

    This is the resolution at which a 32-bit evaluation of ``f`` can be
    trusted; differences of ``f`` smaller than it are rounding noise.
    """
    rng = rng or np.random.default_rng(12345)
    saved = [t.data.copy() for t in inputs]
    vals = []
    try:
        for _ in range(probes):
            for t, orig in zip(inputs, saved):
                jitter = rng.uniform(-ulps, ulps, size=orig.shape) * np.spacing(np.abs(orig).astype(DTYPE))
                t.data[...] = orig + jitter.astype(DTYPE)
            vals.append(_scalar(f))
    finally:
        for t, orig in zip(inputs, saved):
            t.data[...] = orig
    return float(np.std(vals))


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    tol: float = 1e-2,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float | None = None,
) -> GradCheckReport:
    """Compare autodiff gradients of the scalar ``f()`` against central differences.

    ``f`` must be deterministic and read the current ``.data`` of ``inputs``.
    The per-entry error is ``|a - n| / max(|a|, |n|, floor)``, so an entry
    fails when it misses by more than ``tol`` relative and by more than
    ``tol * floor`` absolute.  By default ``floor`` is calibrated so that
    ``tol * floor`` is three times the rounding noise of a central difference
    (:func:`evaluation_noise` divided by ``h``), with a lower bound of
    ``eps32 / h``.  With ``max_entries`` only a random subset of each input
    is perturbed.
    """
    for t in inputs:
        t.grad = None
    out = f()
    backward(out)
    if floor is None:
        noise = max(evaluation_noise(f, inputs), float(np.finfo(DTYPE).eps) * (abs(out.item()) + 1.0))
        floor = 3.0 * noise / h / tol
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    checked = 0
    for t in inputs:
        analytic = np.zeros(t.shape, dtype=np.float64) if t.grad is None else t.grad.astype(np.float64)
        flat = t.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + DTYPE(h)
            up = _scalar(f)
            flat[i] = orig - DTYPE(h)
            down = _scalar(f)
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
            checked += 1
    return GradCheckReport(worst, tol, checked, floor)


# ---------------------------------------------------------------------------
# checkpoint container

MAGIC = b"NEATCKPT1"


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray | Tensor]) -> None:
    """Write named float32 arrays in the ``NEATCKPT1`` container format."""
    chunks = [MAGIC]
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=DTYPE)
        arr = np.asarray(arr, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise ValueError(f"{path}: not a NEATCKPT1 checkpoint")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = 4 * count
            if pos + nbytes > len(buf):
                raise ValueError("truncated payload")
            out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(DTYPE)
            pos += nbytes
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out


def parameters_norm(grads: Iterable[np.ndarray]) -> float:
    total = 0.0
    for g in grads:
        total += float(np.dot(g.reshape(-1).astype(np.float64), g.reshape(-1).astype(np.float64)))
    return math.sqrt(total)
