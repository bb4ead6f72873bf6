"""Dense float64 tensors with reverse-mode automatic differentiation.

Feature maps follow the (batch, channel, height, width) layout. Graphs are
single-shot tapes: ``backward`` walks the graph once, accumulates gradients
into every tensor that requires them, and marks the traversed ops as spent;
reusing a spent graph raises :class:`GraphReuseError`.

Every constructed tensor is checked for NaN/Inf, so numeric failures surface
at the op that produced them instead of propagating silently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "InstanceStats",
    "NonFiniteError",
    "GraphReuseError",
    "no_grad",
    "backward",
    "zero_grads",
    "conv2d_3x3",
    "relu",
    "global_avg_pool",
    "linear",
    "instance_stats",
    "normalize_scale_shift",
    "l2_normalize",
    "sqrt",
    "maximum_scalar",
    "sum_rows",
    "expand_rows",
    "expand_spatial",
    "repeat_channels",
    "sum_all",
    "mean_all",
    "finite_diff_check",
    "write_tensor_record",
    "read_tensor_record",
    "save_tensors",
    "load_tensors",
]


class NonFiniteError(ArithmeticError):
    """A tensor operation produced (or received) NaN or Inf values."""


class GraphReuseError(RuntimeError):
    """A computation graph was reused after backward() consumed it."""


_grad_enabled = True


class no_grad:
    """Context manager that skips graph construction inside its scope."""

    def __enter__(self) -> None:
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc) -> bool:
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array with optional gradient tracking.

    ``grad`` stays ``None`` until a backward pass reaches this node. Leaf
    tensors (model parameters, inputs) are reusable across graphs; interior
    nodes belong to exactly one forward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_spent")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor holds non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], None] | None = None
        self._spent = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def _tracked(self) -> bool:
        return self.requires_grad or self._grad_fn is not None

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar covers same-shape tensors and python scalars only;
    # richer broadcasting is deliberately out of scope.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return _add(self, other)
        return _add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return _sub(self, other)
        return _add_scalar(self, -float(other))

    def __rsub__(self, other):
        return _sub_from_scalar(float(other), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return _mul(self, other)
        return _mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return _div(self, other)
        return _mul_scalar(self, 1.0 / float(other))

    def __neg__(self):
        return _mul_scalar(self, -1.0)


def _accum(node: Tensor, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.zeros_like(node.data)
    node.grad += g


def _make(data, parents: tuple[Tensor, ...], grad_fn, op: str) -> Tensor:
    try:
        out = Tensor(data)
    except NonFiniteError as exc:
        raise NonFiniteError(f"non-finite result from {op}") from exc
    if _grad_enabled and any(p._tracked for p in parents):
        for p in parents:
            if p._spent:
                raise GraphReuseError(
                    f"{op}: input graph was already consumed by backward()"
                )
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def _add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def grad_fn(g):
        if a._tracked:
            _accum(a, g)
        if b._tracked:
            _accum(b, g)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def _sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def grad_fn(g):
        if a._tracked:
            _accum(a, g)
        if b._tracked:
            _accum(b, -g)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def _mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def grad_fn(g):
        if a._tracked:
            _accum(a, g * b.data)
        if b._tracked:
            _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def _div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("div", a, b)

    def grad_fn(g):
        if a._tracked:
            _accum(a, g / b.data)
        if b._tracked:
            _accum(b, -g * a.data / (b.data * b.data))

    # a zero divisor is reported as NonFiniteError by _make, not as a warning
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return _make(data, (a, b), grad_fn, "div")


def _add_scalar(a: Tensor, s: float) -> Tensor:
    def grad_fn(g):
        if a._tracked:
            _accum(a, g)

    return _make(a.data + s, (a,), grad_fn, "add_scalar")


def _mul_scalar(a: Tensor, s: float) -> Tensor:
    def grad_fn(g):
        if a._tracked:
            _accum(a, g * s)

    return _make(a.data * s, (a,), grad_fn, "mul_scalar")


def _sub_from_scalar(s: float, a: Tensor) -> Tensor:
    def grad_fn(g):
        if a._tracked:
            _accum(a, -g)

    return _make(s - a.data, (a,), grad_fn, "sub_from_scalar")


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x). The subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0

    def grad_fn(g):
        if x._tracked:
            _accum(x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), grad_fn, "relu")


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root.

    The gradient at exactly 0 is taken as 0 (rather than unbounded), which
    gives zero-distance pairs a well-defined zero derivative.
    """
    if np.any(x.data < 0):
        raise ValueError("sqrt: negative input")
    out_data = np.sqrt(x.data)

    def grad_fn(g):
        if x._tracked:
            inv = np.zeros_like(out_data)
            pos = out_data > 0
            inv[pos] = 0.5 / out_data[pos]
            _accum(x, g * inv)

    return _make(out_data, (x,), grad_fn, "sqrt")


def maximum_scalar(x: Tensor, s: float) -> Tensor:
    """Elementwise max(x, s); subgradient 0 where x <= s."""
    mask = x.data > s

    def grad_fn(g):
        if x._tracked:
            _accum(x, g * mask)

    return _make(np.maximum(x.data, s), (x,), grad_fn, "maximum_scalar")


# ---------------------------------------------------------------------------
# shape-changing primitives
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    def grad_fn(g):
        if x._tracked:
            _accum(x, np.broadcast_to(g, x.shape))

    return _make(x.data.sum(), (x,), grad_fn, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    n = x.size

    def grad_fn(g):
        if x._tracked:
            _accum(x, np.broadcast_to(g / n, x.shape))

    return _make(x.data.mean(), (x,), grad_fn, "mean_all")


def sum_rows(x: Tensor) -> Tensor:
    """Reduce a [B, D] tensor to per-row sums of shape [B]."""
    if x.data.ndim != 2:
        raise ValueError(f"sum_rows expects a 2-d tensor, got shape {x.shape}")

    def grad_fn(g):
        if x._tracked:
            _accum(x, np.repeat(g[:, None], x.shape[1], axis=1))

    return _make(x.data.sum(axis=1), (x,), grad_fn, "sum_rows")


def expand_rows(x: Tensor, width: int) -> Tensor:
    """Tile a [B] tensor into [B, width]."""
    if x.data.ndim != 1:
        raise ValueError(f"expand_rows expects a 1-d tensor, got shape {x.shape}")

    def grad_fn(g):
        if x._tracked:
            _accum(x, g.sum(axis=1))

    return _make(np.repeat(x.data[:, None], width, axis=1), (x,), grad_fn, "expand_rows")


def expand_spatial(x: Tensor, height: int, width: int) -> Tensor:
    """Tile a [B, C] tensor into [B, C, height, width]."""
    if x.data.ndim != 2:
        raise ValueError(f"expand_spatial expects a 2-d tensor, got shape {x.shape}")

    def grad_fn(g):
        if x._tracked:
            _accum(x, g.sum(axis=(2, 3)))

    data = np.broadcast_to(x.data[:, :, None, None], x.shape + (height, width)).copy()
    return _make(data, (x,), grad_fn, "expand_spatial")


def repeat_channels(x: Tensor, reps: int) -> Tensor:
    """Repeat a single-channel [B, 1, H, W] map into [B, reps, H, W]."""
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"repeat_channels expects [B, 1, H, W], got {x.shape}")

    def grad_fn(g):
        if x._tracked:
            _accum(x, g.sum(axis=1, keepdims=True))

    return _make(np.repeat(x.data, reps, axis=1), (x,), grad_fn, "repeat_channels")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [B, C, H, W] -> [B, C]."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool expects [B, C, H, W], got {x.shape}")
    hw = x.shape[2] * x.shape[3]

    def grad_fn(g):
        if x._tracked:
            _accum(x, np.broadcast_to(g[:, :, None, None] / hw, x.shape))

    return _make(x.data.mean(axis=(2, 3)), (x,), grad_fn, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map [B, Din] @ weight[Dout, Din].T + bias[Dout]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError("linear expects 2-d input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear: input dim {x.shape[1]} does not match weight dim {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")

    def grad_fn(g):
        if x._tracked:
            _accum(x, g @ weight.data)
        if weight._tracked:
            _accum(weight, g.T @ x.data)
        if bias._tracked:
            _accum(bias, g.sum(axis=0))

    return _make(x.data @ weight.data.T + bias.data, (x, weight, bias), grad_fn, "linear")


def conv2d_3x3(
    x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 1
) -> Tensor:
    """Cross-correlation with a fixed 3x3 kernel.

    Output spatial size is floor((H + 2*padding - 3)/stride) + 1 per axis.
    Gradients flow to the input, the weights, and the bias.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d_3x3 expects [B, C, H, W] input, got {x.shape}")
    if weight.data.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ValueError(f"conv2d_3x3 expects [Cout, Cin, 3, 3] weights, got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d_3x3: input channels {x.shape[1]} do not match weight channels {weight.shape[1]}"
        )
    if stride not in (1, 2):
        raise ValueError(f"conv2d_3x3: stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ValueError("conv2d_3x3: padding must be >= 0")
    cout = weight.shape[0]
    if bias.shape != (cout,):
        raise ValueError(f"conv2d_3x3: bias shape {bias.shape} != ({cout},)")

    b, cin, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - 3) // stride + 1
    wo = (wp - 3) // stride + 1
    if hp < 3 or wp < 3 or ho < 1 or wo < 1:
        raise ValueError(f"conv2d_3x3: output collapses below 1x1 for input {h}x{w}")

    xp = np.zeros((b, cin, hp, wp))
    xp[:, :, padding : padding + h, padding : padding + w] = x.data

    acc = np.zeros((b, cout, ho, wo))
    for di in range(3):
        for dj in range(3):
            patch = xp[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride]
            acc += np.einsum("bchw,oc->bohw", patch, weight.data[:, :, di, dj], optimize=True)
    acc += bias.data[None, :, None, None]

    def grad_fn(g):
        if bias._tracked:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if weight._tracked:
            dw = np.empty_like(weight.data)
            for di in range(3):
                for dj in range(3):
                    patch = xp[
                        :, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride
                    ]
                    dw[:, :, di, dj] = np.einsum("bohw,bchw->oc", g, patch, optimize=True)
            _accum(weight, dw)
        if x._tracked:
            dxp = np.zeros_like(xp)
            for di in range(3):
                for dj in range(3):
                    dxp[
                        :, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride
                    ] += np.einsum("bohw,oc->bchw", g, weight.data[:, :, di, dj], optimize=True)
            _accum(x, dxp[:, :, padding : padding + h, padding : padding + w])

    return _make(acc, (x, weight, bias), grad_fn, "conv2d_3x3")


# ---------------------------------------------------------------------------
# composite ops
# ---------------------------------------------------------------------------


@dataclass
class InstanceStats:
    """Per-(sample, channel) spatial mean and standard deviation, [B, C] each."""

    mean: Tensor
    std: Tensor


def instance_stats(x: Tensor, eps: float = 0.0) -> InstanceStats:
    """Spatial mean and std per sample and channel.

    The variance uses the population convention (divide by H*W); ``eps`` is
    added under the square root to guard constant feature maps.
    """
    if x.data.ndim != 4:
        raise ValueError(f"instance_stats expects [B, C, H, W], got {x.shape}")
    if eps < 0:
        raise ValueError("instance_stats: eps must be >= 0")
    _, _, h, w = x.shape
    mean = global_avg_pool(x)
    centered = _sub(x, expand_spatial(mean, h, w))
    var = global_avg_pool(_mul(centered, centered))
    std = sqrt(_add_scalar(var, eps))
    return InstanceStats(mean=mean, std=std)


def normalize_scale_shift(
    x: Tensor, stats: InstanceStats, scale: Tensor, shift: Tensor
) -> Tensor:
    """scale * (x - mean) / std + shift with [B, C] statistics broadcast spatially."""
    if x.data.ndim != 4:
        raise ValueError(f"normalize_scale_shift expects [B, C, H, W], got {x.shape}")
    bc = x.shape[:2]
    for name, t in (("mean", stats.mean), ("std", stats.std), ("scale", scale), ("shift", shift)):
        if t.shape != bc:
            raise ValueError(f"normalize_scale_shift: {name} shape {t.shape} != {bc}")
    _, _, h, w = x.shape
    normalized = _div(_sub(x, expand_spatial(stats.mean, h, w)), expand_spatial(stats.std, h, w))
    return _add(_mul(expand_spatial(scale, h, w), normalized), expand_spatial(shift, h, w))


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row of a [B, D] tensor by max(||row||, eps)."""
    if v.data.ndim != 2:
        raise ValueError(f"l2_normalize expects [B, D], got {v.shape}")
    norms = sqrt(sum_rows(_mul(v, v)))
    return _div(v, expand_rows(maximum_scalar(norms, eps), v.shape[1]))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-mode gradient accumulation from a scalar loss.

    Populates ``grad`` on every tensor in the graph that requires it, then
    marks the graph as spent. A second call (or any op built on a spent
    intermediate) raises :class:`GraphReuseError`.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._spent:
        raise GraphReuseError("backward() already ran on this graph")
    if loss._grad_fn is None:
        return  # constant graph: nothing requires gradients

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._spent:
            raise GraphReuseError("graph shares ops with one already consumed by backward()")
        stack.append((node, True))
        for parent in node._parents:
            if parent._tracked and id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._grad_fn is not None:
            node._grad_fn(node.grad)
            node._spent = True


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5
) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x`` and
    central finite differences.

    ``f`` must be a deterministic scalar-valued function of one tensor. The
    relative error denominator is floored at 1e-8.
    """
    probe = Tensor(np.array(x.data, copy=True), requires_grad=True)
    out = f(probe)
    if out.data.shape != ():
        raise ValueError("finite_diff_check expects a scalar-valued function")
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.ravel()
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] += h
            f_plus = f(Tensor(bumped.reshape(x.shape))).item()
            bumped[i] -= 2 * h
            f_minus = f(Tensor(bumped.reshape(x.shape))).item()
            numeric[i] = (f_plus - f_minus) / (2 * h)

    a = analytic.ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float((np.abs(a - numeric) / denom).max())


# ---------------------------------------------------------------------------
# serialization: one record = JSON header line + raw little-endian float64
# ---------------------------------------------------------------------------


def write_tensor_record(fh: BinaryIO, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float64)
    header = json.dumps({"shape": list(arr.shape)}) + "\n"
    fh.write(header.encode("ascii"))
    fh.write(arr.astype("<f8").tobytes(order="C"))


def read_tensor_record(fh: BinaryIO) -> np.ndarray:
    header = fh.readline()
    if not header:
        raise EOFError("no tensor record at stream position")
    try:
        shape = tuple(json.loads(header.decode("ascii"))["shape"])
    except (ValueError, KeyError) as exc:
        raise ValueError("malformed tensor record header") from exc
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("truncated tensor record payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def save_tensors(path, arrays: Sequence[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for arr in arrays:
            write_tensor_record(fh, arr)


def load_tensors(path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while True:
            try:
                out.append(read_tensor_record(fh))
            except EOFError:
                break
    return out
