"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

The operation set is exactly what the video transformer needs: matmul,
softmax, layer norm, GELU, elementwise arithmetic, row/column slicing and
concatenation, row gathers, reductions, and a fused cross-entropy. Tensors
are flat row-major buffers; there is no broadcasting beyond the row-wise
bias add. Gradients accumulate additively into ``.grad`` buffers.

Recording happens only while a :class:`Tape` is active (``with Tape() as
tape:``); outside a tape every op runs forward-only. A tape and the tensors
recorded on it belong to one thread; distinct tapes may run concurrently.
"""

from __future__ import annotations

import math
import threading
from array import array
from typing import Callable, Iterable, Sequence

from . import backend
from .errors import ContractError, DataError, DimensionError, NumericError

Shape = tuple[int, ...]


def _buf(n: int) -> array:
    return array("d", bytes(8 * n))


def _numel(shape: Shape) -> int:
    n = 1
    for s in shape:
        n *= s
    return n


class Tensor:
    """N-dimensional float64 array with optional gradient buffer."""

    __slots__ = ("shape", "data", "requires_grad", "grad")

    def __init__(self, shape: Sequence[int], data: array, requires_grad: bool = False):
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise DimensionError(f"shape {shape} has a non-positive dimension")
        if _numel(shape) != len(data):
            raise DimensionError(
                f"shape {shape} needs {_numel(shape)} values, buffer has {len(data)}"
            )
        self.shape = shape
        self.data = data
        self.requires_grad = requires_grad
        self.grad: array | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape: Sequence[int], requires_grad: bool = False) -> "Tensor":
        return Tensor(shape, _buf(_numel(tuple(shape))), requires_grad)

    @staticmethod
    def full(shape: Sequence[int], value: float) -> "Tensor":
        n = _numel(tuple(shape))
        return Tensor(shape, array("d", [float(value)] * n))

    @staticmethod
    def of(values, requires_grad: bool = False) -> "Tensor":
        """Build from a (nested) list; shape is inferred."""
        shape = []
        probe = values
        while isinstance(probe, (list, tuple)):
            shape.append(len(probe))
            probe = probe[0]
        flat: list[float] = []

        def _walk(v, depth):
            if depth == len(shape):
                flat.append(float(v))
                return
            if len(v) != shape[depth]:
                raise DimensionError("ragged nested list cannot form a tensor")
            for item in v:
                _walk(item, depth + 1)

        _walk(values, 0)
        return Tensor(tuple(shape), array("d", flat), requires_grad)

    @staticmethod
    def scalar(value: float, requires_grad: bool = False) -> "Tensor":
        return Tensor((), array("d", [float(value)]), requires_grad)

    # -- inspection -----------------------------------------------------------

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def numel(self) -> int:
        return len(self.data)

    def item(self) -> float:
        if self.numel != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return self.data[0]

    def tolist(self):
        def _build(shape, base, strides):
            if not shape:
                return self.data[base]
            return [
                _build(shape[1:], base + i * strides[0], strides[1:])
                for i in range(shape[0])
            ]

        strides = []
        acc = 1
        for s in reversed(self.shape):
            strides.append(acc)
            acc *= s
        strides.reverse()
        return _build(self.shape, 0, strides)

    def copy(self) -> "Tensor":
        return Tensor(self.shape, array("d", self.data), self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# -- tape ---------------------------------------------------------------------

_tls = threading.local()


def _stack() -> list:
    s = getattr(_tls, "stack", None)
    if s is None:
        s = _tls.stack = []
    return s


class Tape:
    """Ordered record of operations; replaying it backwards is backprop."""

    __slots__ = ("_entries", "_out_ids")

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[array], None]]] = []
        self._out_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        top = _stack().pop()
        assert top is self, "tapes must be exited in LIFO order"

    def record(self, out: Tensor, backward_fn: Callable[[array], None]) -> None:
        self._entries.append((out, backward_fn))
        self._out_ids.add(id(out))

    def __len__(self) -> int:
        return len(self._entries)


def active_tape() -> Tape | None:
    s = getattr(_tls, "stack", None)
    return s[-1] if s else None


def _track(*tensors: Tensor) -> bool:
    if active_tape() is None:
        return False
    return any(t.requires_grad for t in tensors)


def _grad_buf(t: Tensor) -> array:
    if t.grad is None:
        t.grad = _buf(t.numel)
    return t.grad


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf with requires_grad."""
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._entries and id(loss) not in tape._out_ids:
        raise ContractError("loss tensor was not produced on this tape")
    _grad_buf(loss)[0] += 1.0
    for out, backward_fn in reversed(tape._entries):
        if out.grad is None:
            continue
        backward_fn(out.grad)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -- test hook ----------------------------------------------------------------

# Maps op name -> multiplicative factor applied to that op's input gradients.
# Used by the gradient-check CLI's negative control; empty in normal runs.
_BACKWARD_CORRUPTION: dict[str, float] = {}


def _corruption(op: str) -> float:
    return _BACKWARD_CORRUPTION.get(op, 1.0)


class corrupt_backward_for_testing:
    """Context manager: scale one op's backward output by ``factor``."""

    def __init__(self, op: str, factor: float = 1.5):
        self.op = op
        self.factor = factor

    def __enter__(self):
        _BACKWARD_CORRUPTION[self.op] = self.factor
        return self

    def __exit__(self, *exc):
        _BACKWARD_CORRUPTION.pop(self.op, None)


# -- operations ---------------------------------------------------------------


def _require_2d(t: Tensor, what: str) -> None:
    if t.ndim != 2:
        raise DimensionError(f"{what} must be 2-d, got shape {t.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, "matmul lhs")
    _require_2d(b, "matmul rhs")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out_data = _buf(m * n)
    backend.active.mm_nn(m, k, n, a.data, b.data, out_data, False)
    out = Tensor((m, n), out_data, _track(a, b))
    if out.requires_grad:

        def bwd(dout: array) -> None:
            c = _corruption("matmul")
            dc = dout if c == 1.0 else array("d", (c * v for v in dout))
            if a.requires_grad:
                bt = _buf(k * n)
                backend.active.transpose(k, n, b.data, bt)
                backend.active.mm_nn(m, n, k, dc, bt, _grad_buf(a), True)
            if b.requires_grad:
                at = _buf(m * k)
                backend.active.transpose(m, k, a.data, at)
                backend.active.mm_nn(k, m, n, at, dc, _grad_buf(b), True)

        active_tape().record(out, bwd)
    return out


def transpose(a: Tensor) -> Tensor:
    _require_2d(a, "transpose input")
    r, c = a.shape
    out_data = _buf(r * c)
    backend.active.transpose(r, c, a.data, out_data)
    out = Tensor((c, r), out_data, _track(a))
    if out.requires_grad:

        def bwd(dout: array) -> None:
            tmp = _buf(r * c)
            backend.active.transpose(c, r, dout, tmp)
            backend.active.axpy(r * c, _corruption("transpose"), tmp, _grad_buf(a))

        active_tape().record(out, bwd)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op} needs equal shapes, got {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    n = a.numel
    out_data = _buf(n)
    backend.active.add_v(n, a.data, b.data, out_data)
    out = Tensor(a.shape, out_data, _track(a, b))
    if out.requires_grad:

        def bwd(dout: array) -> None:
            c = _corruption("add")
            if a.requires_grad:
                backend.active.axpy(n, c, dout, _grad_buf(a))
            if b.requires_grad:
                backend.active.axpy(n, c, dout, _grad_buf(b))

        active_tape().record(out, bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    n = a.numel
    out_data = _buf(n)
    backend.active.sub_v(n, a.data, b.data, out_data)
    out = Tensor(a.shape, out_data, _track(a, b))
    if out.requires_grad:

        def bwd(dout: array) -> None:
            if a.requires_grad:
                backend.active.axpy(n, 1.0, dout, _grad_buf(a))
            if b.requires_grad:
                backend.active.axpy(n, -1.0, dout, _grad_buf(b))

        active_tape().record(out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    n = a.numel
    out_data = _buf(n)
    backend.active.mul_v(n, a.data, b.data, out_data)
    out = Tensor(a.shape, out_data, _track(a, b))
    if out.requires_grad:

        def bwd(dout: array) -> None:
            if a.requires_grad:
                backend.active.mul_acc(n, dout, b.data, _grad_buf(a))
            if b.requires_grad:
                backend.active.mul_acc(n, dout, a.data, _grad_buf(b))

        active_tape().record(out, bwd)
    return out


def scale(a: Tensor, alpha: float) -> Tensor:
    n = a.numel
    out_data = _buf(n)
    backend.active.scale_v(n, alpha, a.data, out_data)
    out = Tensor(a.shape, out_data, _track(a))
    if out.requires_grad:

        def bwd(dout: array) -> None:
            backend.active.axpy(n, alpha, dout, _grad_buf(a))

        active_tape().record(out, bwd)
    return out


def scale_add(a: Tensor, alpha: float, b: Tensor) -> Tensor:
    """alpha * a + b in one pass."""
    _same_shape(a, b, "scale_add")
    n = a.numel
    out_data = _buf(n)
    backend.active.scale_add(n, alpha, a.data, b.data, out_data)
    out = Tensor(a.shape, out_data, _track(a, b))
    if out.requires_grad:

        def bwd(dout: array) -> None:
            if a.requires_grad:
                backend.active.axpy(n, alpha, dout, _grad_buf(a))
            if b.requires_grad:
                backend.active.axpy(n, 1.0, dout, _grad_buf(b))

        active_tape().record(out, bwd)
    return out


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a length-C vector to every row of an [R, C] tensor."""
    _require_2d(a, "add_bias input")
    if bias.shape != (a.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} does not match rows of {a.shape}")
    rows, d = a.shape
    out_data = _buf(rows * d)
    backend.active.add_bias_rows(rows, d, a.data, bias.data, out_data)
    out = Tensor(a.shape, out_data, _track(a, bias))
    if out.requires_grad:

        def bwd(dout: array) -> None:
            if a.requires_grad:
                backend.active.axpy(rows * d, 1.0, dout, _grad_buf(a))
            if bias.requires_grad:
                backend.active.colsum_acc(rows, d, dout, _grad_buf(bias))

        active_tape().record(out, bwd)
    return out


def gelu(a: Tensor) -> Tensor:
    n = a.numel
    out_data = _buf(n)
    backend.active.gelu(n, a.data, out_data)
    out = Tensor(a.shape, out_data, _track(a))
    if out.requires_grad:

        def bwd(dout: array) -> None:
            c = _corruption("gelu")
            if c == 1.0:
                backend.active.gelu_bwd(n, a.data, dout, _grad_buf(a))
            else:
                tmp = _buf(n)
                backend.active.gelu_bwd(n, a.data, dout, tmp)
                backend.active.axpy(n, c, tmp, _grad_buf(a))

        active_tape().record(out, bwd)
    return out


def _axis_split(shape: Shape, axis: int, op: str) -> tuple[int, int, int]:
    nd = len(shape)
    if not -nd <= axis < nd:
        raise DimensionError(f"{op} axis {axis} invalid for shape {shape}")
    axis %= nd
    outer = _numel(shape[:axis])
    inner = _numel(shape[axis + 1 :])
    return outer, shape[axis], inner


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """exp(x - max) normalized to sum 1 along ``axis``."""
    outer, size, inner = _axis_split(a.shape, axis, "softmax")
    n = a.numel
    out_data = _buf(n)
    backend.active.softmax_mid(outer, size, inner, a.data, out_data)
    out = Tensor(a.shape, out_data, _track(a))
    if out.requires_grad:

        def bwd(dout: array) -> None:
            c = _corruption("softmax")
            if c == 1.0:
                backend.active.softmax_bwd_mid(outer, size, inner, out_data, dout, _grad_buf(a))
            else:
                tmp = _buf(n)
                backend.active.softmax_bwd_mid(outer, size, inner, out_data, dout, tmp)
                backend.active.axpy(n, c, tmp, _grad_buf(a))

        active_tape().record(out, bwd)
    return out


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-vector (x - mean) / sqrt(var + eps) * gamma + beta over the last axis.

    Variance uses the population (divide-by-D) convention.
    """
    if a.ndim < 1:
        raise DimensionError("layernorm input must have at least one axis")
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layernorm gamma/beta shapes {gamma.shape}/{beta.shape} do not match last dim {d}"
        )
    rows = a.numel // d
    out_data = _buf(rows * d)
    xhat = _buf(rows * d)
    inv_std = _buf(rows)
    backend.active.layernorm_rows(rows, d, eps, a.data, gamma.data, beta.data, out_data, xhat, inv_std)
    out = Tensor(a.shape, out_data, _track(a, gamma, beta))
    if out.requires_grad:

        def bwd(dout: array) -> None:
            dx = _grad_buf(a) if a.requires_grad else _buf(rows * d)
            dgamma = _grad_buf(gamma) if gamma.requires_grad else _buf(d)
            dbeta = _grad_buf(beta) if beta.requires_grad else _buf(d)
            backend.active.layernorm_bwd_rows(
                rows, d, dout, gamma.data, xhat, inv_std, dx, dgamma, dbeta
            )

        active_tape().record(out, bwd)
    return out


def sum_all(a: Tensor) -> Tensor:
    total = backend.active.sum_all(a.numel, a.data)
    out = Tensor.scalar(total)
    out.requires_grad = _track(a)
    if out.requires_grad:

        def bwd(dout: array) -> None:
            backend.active.acc_scalar(a.numel, dout[0], _grad_buf(a))

        active_tape().record(out, bwd)
    return out


def mean_rows(a: Tensor) -> Tensor:
    """Mean over axis 0 of an [R, C] tensor, kept as [1, C]."""
    _require_2d(a, "mean_rows input")
    rows, d = a.shape
    sums = _buf(d)
    backend.active.colsum_acc(rows, d, a.data, sums)
    out_data = _buf(d)
    backend.active.scale_v(d, 1.0 / rows, sums, out_data)
    out = Tensor((1, d), out_data, _track(a))
    if out.requires_grad:

        def bwd(dout: array) -> None:
            backend.active.axpy_rows(rows, d, 1.0 / rows, dout, _grad_buf(a))

        active_tape().record(out, bwd)
    return out


def _as_index_array(indices) -> array:
    if isinstance(indices, array) and indices.typecode == "q":
        return indices
    return array("q", [int(i) for i in indices])


def _check_indices(idx: array, limit: int, what: str) -> None:
    if backend.active.bounds_check(len(idx), idx, limit):
        offending = next(i for i in idx if not 0 <= i < limit)
        raise DimensionError(f"{what} index {offending} out of range for {limit}")


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of an [R, C] tensor; backward scatter-adds."""
    _require_2d(a, "gather_rows input")
    rows, d = a.shape
    idx = _as_index_array(indices)
    _check_indices(idx, rows, "gather_rows")
    n_idx = len(idx)
    out_data = _buf(n_idx * d)
    backend.active.gather_rows(n_idx, d, a.data, idx, out_data)
    out = Tensor((n_idx, d), out_data, _track(a))
    if out.requires_grad:

        def bwd(dout: array) -> None:
            backend.active.scatter_add_rows(n_idx, d, dout, idx, _grad_buf(a))

        active_tape().record(out, bwd)
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    _require_2d(a, "slice_rows input")
    rows, d = a.shape
    if not 0 <= start < stop <= rows:
        raise DimensionError(f"row slice [{start}:{stop}] invalid for {rows} rows")
    out_rows = stop - start
    out_data = array("d", a.data[start * d : stop * d])
    out = Tensor((out_rows, d), out_data, _track(a))
    if out.requires_grad:

        def bwd(dout: array) -> None:
            g = memoryview(_grad_buf(a))
            backend.active.axpy(out_rows * d, 1.0, dout, g[start * d : stop * d])

        active_tape().record(out, bwd)
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    _require_2d(a, "slice_cols input")
    rows, d = a.shape
    if not 0 <= start < stop <= d:
        raise DimensionError(f"column slice [{start}:{stop}] invalid for {d} columns")
    width = stop - start
    out_data = _buf(rows * width)
    backend.active.copy_cols(rows, d, start, width, a.data, out_data)
    out = Tensor((rows, width), out_data, _track(a))
    if out.requires_grad:

        def bwd(dout: array) -> None:
            backend.active.acc_cols_into(rows, d, start, width, dout, _grad_buf(a))

        active_tape().record(out, bwd)
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_rows needs at least one tensor")
    d = parts[0].shape[-1]
    for p in parts:
        _require_2d(p, "concat_rows part")
        if p.shape[1] != d:
            raise DimensionError(f"concat_rows widths differ: {p.shape[1]} vs {d}")
    total_rows = sum(p.shape[0] for p in parts)
    out_data = _buf(total_rows * d)
    pos = 0
    for p in parts:
        n = p.numel
        out_data[pos : pos + n] = p.data
        pos += n
    out = Tensor((total_rows, d), out_data, _track(*parts))
    if out.requires_grad:
        offsets = []
        pos = 0
        for p in parts:
            offsets.append(pos)
            pos += p.numel

        def bwd(dout: array) -> None:
            dv = memoryview(dout)
            for p, off in zip(parts, offsets):
                if p.requires_grad:
                    backend.active.axpy(p.numel, 1.0, dv[off : off + p.numel], _grad_buf(p))

        active_tape().record(out, bwd)
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_cols needs at least one tensor")
    rows = parts[0].shape[0]
    for p in parts:
        _require_2d(p, "concat_cols part")
        if p.shape[0] != rows:
            raise DimensionError(f"concat_cols row counts differ: {p.shape[0]} vs {rows}")
    total_d = sum(p.shape[1] for p in parts)
    out_data = _buf(rows * total_d)
    start = 0
    for p in parts:
        backend.active.paste_cols(rows, total_d, start, p.shape[1], p.data, out_data)
        start += p.shape[1]
    out = Tensor((rows, total_d), out_data, _track(*parts))
    if out.requires_grad:
        starts = []
        start = 0
        for p in parts:
            starts.append(start)
            start += p.shape[1]

        def bwd(dout: array) -> None:
            for p, s in zip(parts, starts):
                if p.requires_grad:
                    backend.active.acc_cols_from(rows, total_d, s, p.shape[1], dout, _grad_buf(p))

        active_tape().record(out, bwd)
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if _numel(shape) != a.numel:
        raise DimensionError(f"cannot reshape {a.shape} ({a.numel} values) to {shape}")
    out = Tensor(shape, array("d", a.data), _track(a))
    if out.requires_grad:

        def bwd(dout: array) -> None:
            backend.active.axpy(a.numel, 1.0, dout, _grad_buf(a))

        active_tape().record(out, bwd)
    return out


def permute_flat(a: Tensor, indices, shape: Sequence[int]) -> Tensor:
    """Reindex the flat buffer: out.flat[i] = a.flat[indices[i]].

    ``indices`` need not be a bijection; backward scatter-adds, so repeated
    source positions accumulate correctly.
    """
    shape = tuple(int(s) for s in shape)
    idx = _as_index_array(indices)
    n = _numel(shape)
    if len(idx) != n:
        raise DimensionError(f"index count {len(idx)} does not fill shape {shape}")
    _check_indices(idx, a.numel, "permute_flat")
    out_data = _buf(n)
    backend.active.gather_f64(n, a.data, idx, 0, out_data)
    out = Tensor(shape, out_data, _track(a))
    if out.requires_grad:

        def bwd(dout: array) -> None:
            backend.active.scatter_add_flat(n, dout, idx, _grad_buf(a))

        active_tape().record(out, bwd)
    return out


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean of -log softmax(logits)[label], stabilized with log-sum-exp."""
    _require_2d(logits, "cross_entropy logits")
    b, c = logits.shape
    labels = [int(y) for y in labels]
    if len(labels) != b:
        raise DimensionError(f"{len(labels)} labels for batch of {b}")
    for y in labels:
        if not 0 <= y < c:
            raise DataError(f"label {y} outside [0, {c})")
    data = logits.data
    total = 0.0
    lses = []
    for i in range(b):
        base = i * c
        m = max(data[base : base + c])
        acc = 0.0
        for j in range(c):
            acc += math.exp(data[base + j] - m)
        lse = math.log(acc) + m
        lses.append(lse)
        total += lse - data[base + labels[i]]
    out = Tensor.scalar(total / b)
    out.requires_grad = _track(logits)
    if out.requires_grad:

        def bwd(dout: array) -> None:
            g = _grad_buf(logits)
            s = dout[0] / b
            for i in range(b):
                base = i * c
                lse = lses[i]
                for j in range(c):
                    p = math.exp(data[base + j] - lse)
                    if j == labels[i]:
                        p -= 1.0
                    g[base + j] += s * p

        active_tape().record(out, bwd)
    return out


def nonfinite_count(a: Tensor) -> int:
    return backend.active.count_nonfinite(a.numel, a.data)


# -- gradient checking ----------------------------------------------------------


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be deterministic and produce a scalar tensor; ``x`` is
    perturbed in place coordinate by coordinate and restored afterwards.
    The relative error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise ContractError("gradcheck step must be positive")
    if not x.requires_grad:
        raise ContractError("gradcheck target tensor must require gradients")
    x.grad = None
    with Tape() as tape:
        y = f(x)
    if y.shape != ():
        raise ContractError(f"gradcheck function must return a scalar, got {y.shape}")
    if not math.isfinite(y.item()):
        raise NumericError("gradcheck function returned a non-finite value")
    backward(y, tape)
    analytic = array("d", x.grad) if x.grad is not None else _buf(x.numel)
    x.grad = None
    worst = 0.0
    for i in range(x.numel):
        orig = x.data[i]
        x.data[i] = orig + step
        fp = f(x).item()
        x.data[i] = orig - step
        fm = f(x).item()
        x.data[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite value during finite differencing at index {i}")
        numeric = (fp - fm) / (2.0 * step)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        rel = abs(analytic[i] - numeric) / denom
        if rel > worst:
            worst = rel
    return worst
