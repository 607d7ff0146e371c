"""Dense float64 tensors with a reverse-mode tape.

Every operation that touches a gradient-tracked tensor appends one node to the
active ``Tape``. Inputs are recorded before their consumers, so walking the
node list backwards is a valid reverse topological order.

Usage:
    w = Tensor([0.0, 1.0], requires_grad=True)
    with Tape() as tape:
        loss = reduce("mean", sigmoid(w))
        tape.backward(loss)
    w.grad  # -> array of dL/dw

Tensors created outside a tape (or under ``no_grad()``) are read-only values and
can be shared across threads. Parameters are the only writable tensors.
"""

from __future__ import annotations

import contextvars
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Literal

import numpy as np
from beartype import beartype
from numpy.lib.stride_tricks import sliding_window_view

from mapo_tools.constants import PROB_MAX, PROB_MIN
from mapo_tools.errors import ContractViolation, DomainError

ElementwiseKind = Literal[
    "add", "sub", "mul", "div", "sigmoid", "log", "relu", "clamp", "softplus", "neg"
]
ReduceKind = Literal["sum", "mean"]
BackwardFn = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]

_BINARY_KINDS = frozenset({"add", "sub", "mul", "div"})

_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "active_tape", default=None
)
_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "grad_enabled", default=True
)


class Tensor:
    """A dense row-major float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape", "name")

    def __init__(
        self, data: Any, requires_grad: bool = False, name: str | None = None
    ) -> None:
        arr = np.array(data, dtype=np.float64)
        self._init(arr, requires_grad, name)

    def _init(self, arr: np.ndarray, requires_grad: bool, name: str | None) -> None:
        if any(extent <= 0 for extent in arr.shape):
            raise ContractViolation(
                f"Tensor extents must be positive, got shape {arr.shape}"
            )
        if not requires_grad:
            arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> Tensor:
        """Adopt *arr* without copying. Used for operation results."""
        obj = cls.__new__(cls)
        obj._init(np.asarray(arr, dtype=np.float64), requires_grad, None)
        return obj

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ContractViolation(f"item() needs a single element, shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: Tensor | float) -> Tensor:
        return elementwise("add", self, _as_tensor(other))

    def __radd__(self, other: float) -> Tensor:
        return elementwise("add", _as_tensor(other), self)

    def __sub__(self, other: Tensor | float) -> Tensor:
        return elementwise("sub", self, _as_tensor(other))

    def __rsub__(self, other: float) -> Tensor:
        return elementwise("sub", _as_tensor(other), self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        return elementwise("mul", self, _as_tensor(other))

    def __rmul__(self, other: float) -> Tensor:
        return elementwise("mul", _as_tensor(other), self)

    def __truediv__(self, other: Tensor | float) -> Tensor:
        return elementwise("div", self, _as_tensor(other))

    def __rtruediv__(self, other: float) -> Tensor:
        return elementwise("div", _as_tensor(other), self)

    def __neg__(self) -> Tensor:
        return elementwise("neg", self)


def _as_tensor(value: Tensor | float | int) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(float(value))


@dataclass(frozen=True, slots=True)
class TapeNode:
    kind: str
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


class Tape:
    """Append-only record of operations, consumed once by ``backward``."""

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        self._consumed = False
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> Tape:
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc: object) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(
        self,
        out: Tensor,
        kind: str,
        inputs: tuple[Tensor, ...],
        backward: BackwardFn,
    ) -> None:
        out.node_id = len(self.nodes)
        out.tape = self
        self.nodes.append(TapeNode(kind, inputs, backward))

    def reset(self) -> None:
        self.nodes.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> list[Tensor]:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

        Returns the leaves that received a gradient, in order of discovery.
        """
        if loss.ndim != 0:
            raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or loss.node_id is None:
            raise ContractViolation("loss is not recorded on this tape")
        if self._consumed:
            raise ContractViolation("backward already ran on this tape; call reset()")
        self._consumed = True

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node_id in range(loss.node_id, -1, -1):
            g = grads.pop(node_id, None)
            if g is None:
                continue
            node = self.nodes[node_id]
            for tensor, tg in zip(node.inputs, node.backward(g)):
                if tg is None or not tensor.requires_grad:
                    continue
                if tensor.tape is self and tensor.node_id is not None:
                    prev = grads.get(tensor.node_id)
                    grads[tensor.node_id] = tg if prev is None else prev + tg
                else:
                    tensor.grad = tg.copy() if tensor.grad is None else tensor.grad + tg
                    leaves.setdefault(id(tensor), tensor)
        return list(leaves.values())


@beartype
def backward(loss: Tensor) -> list[Tensor]:
    """Run reverse mode on the tape *loss* was recorded on."""
    if loss.tape is None:
        raise ContractViolation("loss is not attached to any tape")
    return loss.tape.backward(loss)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording, even when parameters require gradients."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def _record(
    kind: str, out: np.ndarray, inputs: tuple[Tensor, ...], back: BackwardFn
) -> Tensor:
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise DomainError(f"{kind} produced a non-finite value")
    track = _GRAD_ENABLED.get() and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=track)
    if track:
        tape = _ACTIVE_TAPE.get()
        if tape is None:
            raise ContractViolation(
                f"{kind} on a gradient-tracked tensor needs an active Tape (or no_grad())"
            )
        tape.record(result, kind, inputs, back)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return np.asarray(g.sum()).reshape(shape) if g.shape != shape else g


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@beartype
def elementwise(
    kind: ElementwiseKind,
    a: Tensor,
    b: Tensor | None = None,
    *,
    lo: float = PROB_MIN,
    hi: float = PROB_MAX,
) -> Tensor:
    """Apply an elementwise operation. Binary kinds allow equal shapes or a 0-d operand."""
    if kind in _BINARY_KINDS:
        if b is None:
            raise ContractViolation(f"{kind} needs two operands")
        if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
            raise ContractViolation(f"{kind}: shape mismatch {a.shape} vs {b.shape}")
    elif b is not None:
        raise ContractViolation(f"{kind} takes a single operand")

    x = a.data
    back: BackwardFn
    match kind:
        case "add":
            y = b.data
            out = x + y
            back = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
        case "sub":
            y = b.data
            out = x - y
            back = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
        case "mul":
            y = b.data
            out = x * y
            back = lambda g: (
                _unbroadcast(g * y, a.shape),
                _unbroadcast(g * x, b.shape),
            )
        case "div":
            y = b.data
            if np.any(y == 0):
                raise DomainError("div by zero")
            out = x / y
            back = lambda g: (
                _unbroadcast(g / y, a.shape),
                _unbroadcast(-g * x / (y * y), b.shape),
            )
        case "sigmoid":
            out = _stable_sigmoid(x)
            back = lambda g: (g * out * (1.0 - out),)
        case "log":
            if np.any(x <= 0):
                raise DomainError("log of a non-positive value; clamp probabilities first")
            out = np.log(x)
            back = lambda g: (g / x,)
        case "relu":
            out = np.maximum(x, 0.0)
            back = lambda g: (g * (x > 0),)
        case "clamp":
            if lo > hi:
                raise ContractViolation(f"clamp bounds inverted: [{lo}, {hi}]")
            out = np.clip(x, lo, hi)
            back = lambda g: (g * ((x >= lo) & (x <= hi)),)
        case "softplus":
            out = np.logaddexp(0.0, x)
            back = lambda g: (g * _stable_sigmoid(x),)
        case "neg":
            out = -x
            back = lambda g: (-g,)
    inputs = (a,) if b is None else (a, b)
    return _record(kind, out, inputs, back)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def sigmoid(a: Tensor) -> Tensor:
    return elementwise("sigmoid", a)


def log(a: Tensor) -> Tensor:
    return elementwise("log", a)


def relu(a: Tensor) -> Tensor:
    return elementwise("relu", a)


def softplus(a: Tensor) -> Tensor:
    return elementwise("softplus", a)


def clamp(a: Tensor, lo: float = PROB_MIN, hi: float = PROB_MAX) -> Tensor:
    return elementwise("clamp", a, lo=lo, hi=hi)


@beartype
def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    if not float(exponent).is_integer() and np.any(x <= 0):
        raise DomainError(f"power {exponent} of a non-positive value")
    out = x**exponent
    return _record("power", out, (a,), lambda g: (g * exponent * x ** (exponent - 1.0),))


@beartype
def reduce(kind: ReduceKind, a: Tensor) -> Tensor:
    """Sum or mean over every element, giving a 0-d tensor."""
    n = a.size
    if n == 0:
        raise ContractViolation(f"{kind} of an empty tensor")
    total = a.data.sum()
    if kind == "sum":
        return _record("sum", total, (a,), lambda g: (np.full(a.shape, float(g)),))
    return _record("mean", total / n, (a,), lambda g: (np.full(a.shape, float(g) / n),))


@beartype
def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.size:
        raise ContractViolation(f"cannot reshape {a.shape} into {shape}")
    out = a.data.reshape(shape)
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


@beartype
def conv2d(input: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded cross-correlation of ``[C,H,W]`` with ``[F,C,kh,kw]``, giving ``[F,H,W]``."""
    if input.ndim != 3 or kernel.ndim != 4:
        raise ContractViolation(
            f"conv2d expects [C,H,W] and [F,C,kh,kw], got {input.shape} and {kernel.shape}"
        )
    n_out, channels, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractViolation(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if input.shape[0] != channels:
        raise ContractViolation(
            f"conv2d channel mismatch: input {input.shape[0]}, kernel {channels}"
        )
    _, h, w = input.shape
    if h < kh or w < kw:
        raise ContractViolation(f"conv2d input {h}x{w} smaller than kernel {kh}x{kw}")
    if bias is not None and bias.shape != (n_out,):
        raise ContractViolation(f"conv2d bias must have shape ({n_out},), got {bias.shape}")

    ph, pw = kh // 2, kw // 2
    k = kernel.data
    padded = np.pad(input.data, ((0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    out = np.einsum("chwuv,fcuv->fhw", windows, k, optimize=True)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def back(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        grad_k = np.einsum("fhw,chwuv->fcuv", g, windows, optimize=True)
        grad_padded = np.zeros_like(padded)
        for u in range(kh):
            for v in range(kw):
                grad_padded[:, u : u + h, v : v + w] += np.einsum(
                    "fhw,fc->chw", g, k[:, :, u, v], optimize=True
                )
        grad_x = grad_padded[:, ph : ph + h, pw : pw + w]
        if bias is None:
            return grad_x, grad_k
        return grad_x, grad_k, g.sum(axis=(1, 2))

    inputs = (input, kernel) if bias is None else (input, kernel, bias)
    return _record("conv2d", out, inputs, back)


@beartype
def max_pool2(a: Tensor) -> Tensor:
    """2x2 max pooling of ``[C,H,W]``; ties resolve to the first element in row-major order."""
    if a.ndim != 3 or a.shape[1] % 2 or a.shape[2] % 2:
        raise ContractViolation(f"max_pool2 needs [C,H,W] with even H, W, got {a.shape}")
    c, h, w = a.shape
    blocks = a.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
    blocks = blocks.reshape(c, h // 2, w // 2, 4)
    idx = np.argmax(blocks, axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def back(g: np.ndarray) -> tuple[np.ndarray]:
        grad_blocks = np.zeros((c, h // 2, w // 2, 4))
        np.put_along_axis(grad_blocks, idx, g[..., None], axis=-1)
        grad = grad_blocks.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4)
        return (grad.reshape(c, h, w),)

    return _record("max_pool2", out, (a,), back)


@beartype
def upsample2(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of ``[C,H,W]``."""
    if a.ndim != 3:
        raise ContractViolation(f"upsample2 needs [C,H,W], got {a.shape}")
    c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, 2, axis=1), 2, axis=2)
    back = lambda g: (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)
    return _record("upsample2", out, (a,), back)


@beartype
def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 3 or b.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ContractViolation(f"concat_channels shape mismatch {a.shape} vs {b.shape}")
    split = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)
    return _record("concat", out, (a, b), lambda g: (g[:split], g[split:]))


@beartype
def dropout_apply(a: Tensor, rate: float, seed: int, enabled: bool = True) -> Tensor:
    """Inverted dropout with a counter-based mask.

    Element ``i`` is zeroed when the ``i``-th Philox draw under key *seed* falls
    below *rate*, so the mask depends only on ``(seed, i)``. Survivors are scaled
    by ``1 / (1 - rate)``. Disabled or zero-rate dropout returns *a* itself.
    """
    if not 0.0 <= rate < 1.0:
        raise ContractViolation(f"dropout rate must lie in [0, 1), got {rate}")
    if not enabled or rate == 0.0:
        return a
    draws = np.random.Generator(np.random.Philox(key=seed)).random(a.size)
    scale = (draws.reshape(a.shape) >= rate) / (1.0 - rate)
    return _record("dropout", a.data * scale, (a,), lambda g: (g * scale,))
