"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything trainable in this package runs through the tape defined here.
Arrays are plain numpy float64; a Tensor is tracked when it carries a node
id into the active Tape. Ops on untracked tensors are pure numpy and record
nothing, which is the inference path.
"""

from __future__ import annotations

import zlib

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


class AutodiffError(RuntimeError):
    """Raised on tape misuse (non-scalar loss, mixed tapes, ...)."""


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        raise TypeError("expected raw array-like, got Tensor")
    return np.asarray(x, dtype=np.float64)


class Tape:
    """Records ops so that backward() can replay them in reverse."""

    def __init__(self):
        # per node: (tuple of parent node ids, backward fn or None for leaves)
        self._parents: list[tuple[int, ...]] = []
        self._backwards: list = []

    def __len__(self) -> int:
        return len(self._parents)

    def watch(self, t: "Tensor") -> "Tensor":
        """Register a leaf tensor (parameter or input) on this tape."""
        t.tape = self
        t.node = self._push((), None)
        return t

    def leaf(self, data) -> "Tensor":
        return self.watch(Tensor(data))

    def _push(self, parent_ids: tuple[int, ...], backward) -> int:
        self._parents.append(parent_ids)
        self._backwards.append(backward)
        return len(self._parents) - 1


def _record(parents: list["Tensor"], out_data: np.ndarray, backward) -> "Tensor":
    """Create the op output, recording on the tape if any parent is tracked.

    `backward(grad_out)` must return one gradient array per parent, aligned
    with `parents`; entries for untracked parents are ignored.
    """
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is None:
                tape = p.tape
            elif tape is not p.tape:
                raise AutodiffError("operands recorded on different tapes")
    out = Tensor(out_data)
    if tape is None:
        return out
    parent_ids = tuple(p.node if p.tape is not None else -1 for p in parents)
    out.tape = tape
    out.node = tape._push(parent_ids, backward)
    return out


class Tensor:
    """A row-major float64 array, optionally tracked on a gradient tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape: Tape | None = None
        self.node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        tag = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return take(self, key)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` to undo numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# -- elementwise arithmetic ------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record([a, b], out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _record([a, b], out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record([a, b], out, backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record([a, b], out, backward)


def neg(a: Tensor) -> Tensor:
    return _record([a], -a.data, lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record([a, b], out, backward)


# -- shape manipulation ------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _record([a], out, backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record([a], a.data.transpose(axes), lambda g: (g.transpose(inv),))


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(list(tensors), out, backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return _record([a], out, backward)


def take(a: Tensor, key) -> Tensor:
    out = a.data[key]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out, dtype=np.float64)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return _record([a], out, backward)


# -- reductions --------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _record([a], np.asarray(out), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- nonlinearities ----------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return _record([a], out, lambda g: (g * mask,))


_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def sigmoid(a: Tensor) -> Tensor:
    # split by sign for numerical stability; clamp keeps the output in the
    # open interval (0, 1) even where exp() underflows
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = np.clip(out, _SIG_LO, _SIG_HI)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _record([a], out, backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record([a], out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record([a], np.log(a.data), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record([a], out, lambda g: (g / (2.0 * out),))


def tabs(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    sign = np.sign(a.data)
    return _record([a], out, lambda g: (g * sign,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record([a], out, backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _record([a], out, backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if a.shape[-1] != gamma.shape[-1] or a.shape[-1] != beta.shape[-1]:
        raise ShapeError(
            f"layer_norm: feature dim {a.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = d * inv

    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def backward(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        return gx, dgamma, dbeta

    return _record([a, gamma, beta], out, backward)


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Elementwise binary cross-entropy on raw logits (numerically stable)."""
    _check_broadcast(logits, targets, "bce_with_logits")
    x = logits.data
    y = targets.data
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    p = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        gx = _unbroadcast(g * (p - y), logits.shape)
        gy = _unbroadcast(g * (-x), targets.shape)
        return gx, gy

    return _record([logits, targets], out, backward)


# -- grid sampling -----------------------------------------------------------

def bilinear_sample(grid: Tensor, points: Tensor) -> Tensor:
    """Sample a (H, W, D) feature grid at (P, 2) normalized (x, y) points.

    x spans the W axis and y the H axis; (0, 0) is the center of cell
    (row 0, col 0) and (1, 1) the center of cell (H-1, W-1). Out-of-range
    points clamp to the border. Differentiable in both grid and points.
    """
    if grid.data.ndim != 3:
        raise ShapeError(f"bilinear_sample: grid must be (H, W, D), got {grid.shape}")
    if points.data.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"bilinear_sample: points must be (P, 2), got {points.shape}")
    H, W, D = grid.shape
    if H < 2 or W < 2:
        raise ShapeError(f"bilinear_sample: grid must be at least 2x2, got {grid.shape}")

    px = points.data[:, 0]
    py = points.data[:, 1]
    inside_x = (px > 0.0) & (px < 1.0)
    inside_y = (py > 0.0) & (py < 1.0)
    x = np.clip(px, 0.0, 1.0) * (W - 1)
    y = np.clip(py, 0.0, 1.0) * (H - 1)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, W - 2)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, H - 2)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]

    g = grid.data
    v00 = g[y0, x0]
    v01 = g[y0, x0 + 1]
    v10 = g[y0 + 1, x0]
    v11 = g[y0 + 1, x0 + 1]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    out = top * (1.0 - fy) + bot * fy

    def backward(go):
        ggrid = np.zeros_like(g)
        w00 = (1.0 - fx) * (1.0 - fy)
        w01 = fx * (1.0 - fy)
        w10 = (1.0 - fx) * fy
        w11 = fx * fy
        np.add.at(ggrid, (y0, x0), go * w00)
        np.add.at(ggrid, (y0, x0 + 1), go * w01)
        np.add.at(ggrid, (y0 + 1, x0), go * w10)
        np.add.at(ggrid, (y0 + 1, x0 + 1), go * w11)

        dx = ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy) * go
        dy = ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx) * go
        gpts = np.zeros_like(points.data)
        gpts[:, 0] = dx.sum(axis=1) * (W - 1) * inside_x
        gpts[:, 1] = dy.sum(axis=1) * (H - 1) * inside_y
        return ggrid, gpts

    return _record([grid, points], out, backward)


# -- backward pass -----------------------------------------------------------

class Gradients:
    """Gradient arrays keyed by tape node id, produced by backward()."""

    def __init__(self, grads: dict[int, np.ndarray], tape: Tape):
        self._grads = grads
        self._tape = tape

    def of(self, t: Tensor) -> np.ndarray:
        """Gradient for a tracked tensor; zeros if the loss never reached it."""
        if t.tape is not self._tape or t.node is None:
            raise AutodiffError("tensor is not tracked on the tape that was differentiated")
        g = self._grads.get(t.node)
        if g is None:
            return np.zeros(t.shape, dtype=np.float64)
        return g


def backward(loss: Tensor) -> Gradients:
    """Reverse-accumulate gradients of a scalar loss over its tape."""
    if loss.tape is None or loss.node is None:
        raise AutodiffError("loss is not connected to a tape")
    if loss.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    pending: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape, dtype=np.float64)}
    done: dict[int, np.ndarray] = {}
    for nid in range(loss.node, -1, -1):
        g = pending.pop(nid, None)
        if g is None:
            continue
        done[nid] = g
        fn = tape._backwards[nid]
        if fn is None:
            continue  # leaf
        parent_grads = fn(g)
        for pid, pg in zip(tape._parents[nid], parent_grads):
            if pid < 0:
                continue
            acc = pending.get(pid)
            pending[pid] = pg if acc is None else acc + pg
    return Gradients(done, tape)


# -- deterministic randomness -------------------------------------------------

def _key_int(k) -> int:
    if isinstance(k, int):
        return k
    return zlib.crc32(str(k).encode("utf-8"))


class SeededRng:
    """Counter-based deterministic RNG (Philox) with derivable substreams."""

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = _key
        ss = np.random.SeedSequence(self.seed, spawn_key=_key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *key) -> "SeededRng":
        """Independent stream addressed by (seed, key); order-insensitive."""
        return SeededRng(self.seed, self._key + tuple(_key_int(k) for k in key))

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self, shape=()) -> np.ndarray:
        return self._gen.random(size=shape)
