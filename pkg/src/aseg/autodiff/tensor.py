"""Tensor container and the recording tape used for reverse-mode differentiation."""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

FAST = np.float32
EXACT = np.float64
# x87 80-bit on x86; only the finite-difference oracle uses it
EXTENDED = np.longdouble
_DTYPES = {"float32": FAST, "float64": EXACT, "extended": EXTENDED}
_SUPPORTED = tuple(np.dtype(t) for t in (FAST, EXACT, EXTENDED))

_state = threading.local()
_corrupted: set[str] = set()


def resolve_dtype(dtype) -> np.dtype:
    """Map a dtype spec ('float32', 'float64', numpy type) to a supported numpy dtype."""
    if isinstance(dtype, str):
        try:
            return np.dtype(_DTYPES[dtype])
        except KeyError:
            raise ValueError(f"unsupported dtype {dtype!r}; use 'float32' or 'float64'") from None
    dt = np.dtype(dtype)
    if dt not in _SUPPORTED:
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


class Tensor:
    """Dense array participating in a differentiation tape.

    Feature maps use NCHW layout. Matrix views (attention scores, MLP
    activations) are plain lower-rank tensors.
    """

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(resolve_dtype(dtype), copy=False)
        elif arr.dtype not in _SUPPORTED:
            arr = arr.astype(EXACT)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # Arithmetic delegates to the functional ops; imported lazily to avoid a cycle.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        from . import ops
        return ops.swap_last(self)


class Node:
    # Holds only the output's id: a strong reference would form a
    # tensor <-> node cycle that keeps large buffers alive until a gc pass.
    __slots__ = ("name", "inputs", "output_id", "backward_fn")

    def __init__(self, name: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: Callable):
        self.name = name
        self.inputs = tuple(inputs)
        self.output_id = id(output)
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Operations are recorded only while a tape is active (``with Tape() as t``)
    and at least one input requires a gradient. Outside any tape the ops run
    as plain array kernels, which is how inference is done.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, name: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: Callable) -> None:
        node = Node(name, inputs, output, backward_fn)
        output._node = node
        output.requires_grad = True
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        backward(loss, self, grad)


def _stack() -> list[Tape]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording, e.g. to evaluate a model inside a training tape."""
    stack = _stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack[:] = saved


def should_record(*inputs: Tensor) -> Tape | None:
    tape = active_tape()
    if tape is None:
        return None
    if any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return tape
    return None


@contextlib.contextmanager
def corrupt_backward(*op_names: str, factor: float = 1.5) -> Iterator[None]:
    """Test hook: scale the backward rule of the named ops by ``factor``.

    Used as a negative control for gradient checking.
    """
    _corrupted.update(op_names)
    _state.corrupt_factor = factor
    try:
        yield
    finally:
        _corrupted.difference_update(op_names)


def backward(loss: Tensor, tape: Tape | None = None, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Gradients add onto whatever ``.grad`` already holds; call ``zero_grad``
    between runs for fresh values.
    """
    if tape is None:
        tape = active_tape()
    if tape is None:
        raise RuntimeError("no tape given and none active")
    if loss.size != 1 and grad is None:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    node = loss._node
    if node is None or not any(n is node for n in reversed(tape.nodes)):
        raise ValueError("loss was not produced by an operation recorded on this tape")

    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    pending: dict[int, np.ndarray] = {id(loss): seed}
    factor = getattr(_state, "corrupt_factor", 1.0)
    for node in reversed(tape.nodes):
        g = pending.pop(node.output_id, None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        if node.name in _corrupted:
            in_grads = tuple(None if gi is None else gi * factor for gi in in_grads)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
