"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the upstream gradient to one gradient per
parent.  :func:`backward` orders the recorded nodes into a :class:`Tape`
(parents before children) and walks it in reverse.

Only the operators the dual-stream classifier needs are provided.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, StateError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self._consumed = False

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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_non_scalar(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _raise_non_scalar(shape):
    raise DimensionError(f"expected a scalar tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._consumed = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    if exponent == 0.0:
        # d/dx x^0 = 0 everywhere, including x = 0
        return _make(np.ones_like(a.data), (a,), lambda g: (np.zeros_like(a.data),), "pow")

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(a.data**exponent, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); values at or below the floor receive no gradient."""
    keep = a.data > floor
    return _make(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,), "clamp_min")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0),), "relu")


def tsum(a: Tensor, axis=None) -> Tensor:
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def pick(a: Tensor, index: Sequence[int]) -> Tensor:
    """Row-wise gather: out[i] = a[i, index[i]] for a of shape (B, K)."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise DimensionError(f"pick expects (B, K) and (B,), got {a.shape} and {index.shape}")
    rows = np.arange(a.shape[0])

    def bw(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return _make(a.data[rows, index], (a,), bw, "pick")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """W @ x + b for x of shape (n,) or a batch (B, n); W is (m, n)."""
    if W.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weight shape {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"linear: bias shape {b.shape} incompatible with weight shape {W.shape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ W.data
        if x.ndim == 1:
            gW = np.outer(g, x.data)
            gb = g
        else:
            gW = g.T @ x.data
            gb = g.sum(axis=0)
        return (gx, gW, gb) if b is not None else (gx, gW)

    parents = (x, W, b) if b is not None else (x, W)
    return _make(out, parents, bw, "linear")


def _im2col(x: np.ndarray) -> np.ndarray:
    """(C, N, H, W) -> (C*9, N*H*W) patch matrix, zero padding 1."""
    c, n, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, n, h, w))
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(c * 9, n * h * w)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    c, n, h, w = shape
    cols = cols.reshape(c, 3, 3, n, h, w)
    xp = np.zeros((c, n, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            xp[:, :, i : i + h, j : j + w] += cols[:, i, j]
    return xp[:, :, 1:-1, 1:-1]


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1; spatial size is preserved.

    ``x`` is one image (C_in, H, W) or a channel-major batch (C_in, N, H, W);
    ``kernels`` is (C_out, C_in, 3, 3).
    """
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: kernels must be (C_out, C_in, 3, 3), got {kernels.shape}")
    single = x.ndim == 3
    if x.ndim not in (3, 4) or x.shape[0] != kernels.shape[1]:
        raise DimensionError(f"conv2d: input shape {x.shape} incompatible with kernels {kernels.shape}")
    if bias is not None and bias.shape != (kernels.shape[0],):
        raise DimensionError(f"conv2d: bias shape {bias.shape} incompatible with kernels {kernels.shape}")
    xd = x.data[:, None] if single else x.data
    c, n, h, w = xd.shape
    c_out = kernels.shape[0]
    cols = _im2col(xd)
    wmat = kernels.data.reshape(c_out, c * 9)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape((c_out, h, w) if single else (c_out, n, h, w))

    def bw(g):
        g2 = g.reshape(c_out, n * h * w)
        gw = (g2 @ cols.T).reshape(kernels.shape)
        gx = None
        if x.requires_grad:
            gx = _col2im(wmat.T @ g2, (c, n, h, w))
            if single:
                gx = gx[:, 0]
        if bias is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=1))

    parents = (x, kernels, bias) if bias is not None else (x, kernels)
    return _make(out, parents, bw, "conv2d")


def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling over the last two axes.

    Gradient goes to the first maximal cell of each window in row-major order.
    """
    h, w = x.shape[-2:]
    if x.ndim < 3 or h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial extents, got shape {x.shape}")
    d = x.data
    corners = (d[..., 0::2, 0::2], d[..., 0::2, 1::2], d[..., 1::2, 0::2], d[..., 1::2, 1::2])
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))

    def bw(g):
        gx = np.zeros_like(d)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), corner in zip(((0, 0), (0, 1), (1, 0), (1, 1)), corners):
            hit = (corner == out) & ~taken
            taken |= hit
            gx[..., i::2, j::2] = g * hit
        return (gx,)

    return _make(out, (x,), bw, "maxpool2x2")


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Per-channel normalization of a channel-major batch (C, N, H, W)."""
    if x.ndim != 4 or gamma.shape != (x.shape[0],) or beta.shape != (x.shape[0],):
        raise DimensionError(f"batchnorm2d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    c, n, h, w = x.shape
    m = n * h * w
    flat = x.data.reshape(c, m)
    if train:
        if n < 2:
            raise ConfigError("batchnorm2d in train mode needs a batch of at least 2")
        mu = flat.mean(axis=1)
        centered = flat - mu[:, None]
        var = np.einsum("cm,cm->c", centered, centered) / m
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * var * m / (m - 1)
    else:
        mu, var = state.running_mean, state.running_var
        centered = flat - mu[:, None]
    inv_std = 1.0 / np.sqrt(var + state.eps)
    scale = gamma.data * inv_std
    out = centered * scale[:, None]
    out += beta.data[:, None]

    def bw(g):
        g = g.reshape(c, m)
        xhat = centered * inv_std[:, None]
        gbeta = g.sum(axis=1)
        ggamma = np.einsum("cm,cm->c", g, xhat)
        if not train:
            return ((g * scale[:, None]).reshape(x.shape), ggamma, gbeta)
        gx = g - (gbeta / m)[:, None]
        gx -= xhat * (ggamma / m)[:, None]
        gx *= scale[:, None]
        return (gx.reshape(x.shape), ggamma, gbeta)

    return _make(out.reshape(x.shape), (x, gamma, beta), bw, "batchnorm2d")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; x is (d,) or (B, d)."""
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layernorm needs at least 2 features, got shape {x.shape}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def bw(g):
        dxhat = g * gamma.data
        gx = (inv_std / d) * (
            d * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _make(out, (x, gamma, beta), bw, "layernorm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity map when not training."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes."""
    return mean(x, axis=(-2, -1))


def transpose(a: Tensor) -> Tensor:
    """Swap the two axes of a matrix."""
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


class Tape:
    """Recorded operations reachable from a root, in topological order."""

    def __init__(self, root: Tensor):
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The graph is released afterwards; calling again on the same loss raises.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StateError("graph already consumed by a previous backward call")
    if not loss.requires_grad:
        raise StateError("loss is not connected to any tensor that requires grad")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in tape.nodes:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._consumed = True


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> float:
    """Largest |analytic - central difference| / max(1, |analytic|) over coordinates of x.

    ``indices`` restricts the comparison to selected flat coordinates.
    """
    if h <= 0:
        raise ConfigError("finite-difference step must be positive")
    x.requires_grad = True
    x.grad = None
    backward(f(x))
    analytic = x.grad.reshape(-1).copy() if x.grad is not None else np.zeros(x.size)
    x.grad = None
    flat = x.data.reshape(-1)
    coords = range(x.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = f(x).item()
            flat[i] = orig - h
            down = f(x).item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    return worst


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

MAGIC = b"DSTN"
FORMAT_VERSION = 1


def tensor_to_bytes(arr) -> bytes:
    """Little-endian block: magic, version, rank, extents, raw float64 values."""
    arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype=np.float64)
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).astype("<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one block starting at ``offset``; returns (array, next offset)."""
    if buf[offset : offset + 4] != MAGIC:
        raise StateError("bad tensor block magic")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise StateError(f"unsupported tensor format version {version}")
    offset += 12
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    end = offset + 8 * count
    if end > len(buf):
        raise StateError("truncated tensor block")
    arr = np.frombuffer(buf[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
    return arr, end


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr, _ = tensor_from_bytes(fh.read())
    return arr
