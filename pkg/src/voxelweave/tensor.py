"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array plus an optional tape node recording how it was
produced. Calling :func:`backward` on a scalar walks the tape in reverse
topological order and accumulates gradients into every ``requires_grad``
tensor that the scalar depends on. Tensor data is treated as immutable after
creation; only ``grad`` mutates.

Also home to the VWT1 binary tensor container used for labels, volumes and
checkpoints: magic ``VWT1``, little-endian u32 rank, u64 dims, u8 dtype code
(0 = float32, 1 = float64), then the row-major payload.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32
_ALLOWED_DTYPES = (np.float32, np.float64)

# When true, every op output is validated finite (slow; meant for tests).
_CHECK_FINITE = False


def set_check_finite(enabled: bool) -> bool:
    """Toggle finite-validation of op outputs. Returns the previous setting."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return previous


def _validate_finite(data: np.ndarray, op: str) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op!r}")


class TapeNode:
    """One recorded op: which tensors fed it and how to push gradients back."""

    __slots__ = ("op", "parents", "backward")

    def __init__(
        self,
        op: str,
        parents: Sequence["Tensor"],
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    ):
        self.op = op
        self.parents = tuple(parents)
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_ctx")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.dtype not in _ALLOWED_DTYPES:
            raise ContractError(f"unsupported dtype {arr.dtype}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._ctx: TapeNode | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def result(data: np.ndarray, op: str, parents: Sequence["Tensor"], backward) -> "Tensor":
        """Wrap an op output, attaching a tape node if any parent needs grads."""
        _validate_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._ctx = TapeNode(op, parents, backward) if out.requires_grad else None
        return out

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- basic properties ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def grad_or_zeros(self) -> np.ndarray:
        """Accumulated gradient, or zeros if this tensor was never reached."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar (strict shapes; scalars allowed) -----------------------

    def __add__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.add_scalar(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.add_scalar(self, -float(other))

    def __neg__(self):
        from . import ops

        return ops.mul_scalar(self, -1.0)

    def __truediv__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.div(self, other)
        return ops.mul_scalar(self, 1.0 / float(other))


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        raise DimensionError(
            f"gradient shape {g.shape} does not match tensor shape {t.data.shape}"
        )
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Reverse pass from a scalar. Populates .grad on reachable tensors."""
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward on a tensor with no graph (requires_grad=False)")

    # Iterative reverse topological order over the tape DAG.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for p in node._ctx.parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

    accumulate_grad(loss, np.ones_like(loss.data))
    for node in reversed(order):
        ctx = node._ctx
        if ctx is None:
            continue
        grads = ctx.backward(node.grad)
        if len(grads) != len(ctx.parents):
            raise ContractError(f"op {ctx.op!r} returned {len(grads)} gradients "
                                f"for {len(ctx.parents)} inputs")
        for parent, g in zip(ctx.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            _validate_finite(g, f"backward:{ctx.op}")
            accumulate_grad(parent, np.asarray(g, dtype=parent.data.dtype))


# -- VWT1 container -----------------------------------------------------------

VWT1_MAGIC = b"VWT1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensor(stream: BinaryIO, array: np.ndarray) -> None:
    """Append one VWT1 record to a binary stream."""
    arr = np.asarray(array)
    if arr.dtype not in _CODE_FOR_KIND:
        raise ContractError(f"VWT1 stores float32/float64, got {arr.dtype}")
    code = _CODE_FOR_KIND[arr.dtype]
    stream.write(VWT1_MAGIC)
    stream.write(struct.pack("<I", arr.ndim))
    for dim in arr.shape:
        stream.write(struct.pack("<Q", dim))
    stream.write(struct.pack("<B", code))
    stream.write(np.ascontiguousarray(arr).astype(_DTYPE_CODES[code]).tobytes())


def read_tensor(stream: BinaryIO) -> np.ndarray:
    """Read one VWT1 record. Raises ContractError on malformed input."""
    magic = stream.read(4)
    if magic != VWT1_MAGIC:
        raise ContractError(f"bad VWT1 magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(stream, 4))
    if rank > 32:
        raise ContractError(f"implausible VWT1 rank {rank}")
    shape = tuple(
        struct.unpack("<Q", _read_exact(stream, 8))[0] for _ in range(rank)
    )
    (code,) = struct.unpack("<B", _read_exact(stream, 1))
    if code not in _DTYPE_CODES:
        raise ContractError(f"unknown VWT1 dtype code {code}")
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = _read_exact(stream, count * dtype.itemsize)
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise ContractError(f"truncated VWT1 record: wanted {n} bytes, got {len(buf)}")
    return buf


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
