"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: only the operations the models in this package need,
each with a hand-written backward pass.  Values are row-major numpy
float64 arrays throughout; calling ``backward()`` on a scalar result
accumulates gradients into the ``grad`` buffer of every reachable tensor
that has ``requires_grad`` set.
"""

from __future__ import annotations

import logging
import warnings

import numpy as np

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """A tensor that must be finite contains NaN or Inf."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy-backed node in a reverse-mode autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        if self.grad is None:
            self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        out_data = self.data + other.data

        def bw(g):
            _acc(self, _unbroadcast(g, self.data.shape))
            _acc(other, _unbroadcast(g, other.data.shape))

        return _make(out_data, (self, other), bw)

    __radd__ = __add__

    def __mul__(self, other):
        other = _wrap(other)
        out_data = self.data * other.data

        def bw(g):
            _acc(self, _unbroadcast(g * other.data, self.data.shape))
            _acc(other, _unbroadcast(g * self.data, other.data.shape))

        return _make(out_data, (self, other), bw)

    __rmul__ = __mul__

    def __neg__(self):
        def bw(g):
            _acc(self, -g)

        return _make(-self.data, (self,), bw)

    def __sub__(self, other):
        other = _wrap(other)
        out_data = self.data - other.data

        def bw(g):
            _acc(self, _unbroadcast(g, self.data.shape))
            _acc(other, _unbroadcast(-g, other.data.shape))

        return _make(out_data, (self, other), bw)

    def __rsub__(self, other):
        return _wrap(other) - self

    def __truediv__(self, other):
        other = _wrap(other)
        out_data = self.data / other.data

        def bw(g):
            _acc(self, _unbroadcast(g / other.data, self.data.shape))
            _acc(other, _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape))

        return _make(out_data, (self, other), bw)

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ShapeError("power supports scalar exponents only")
        out_data = self.data ** p

        def bw(g):
            _acc(self, g * p * self.data ** (p - 1))

        return _make(out_data, (self,), bw)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape --------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out_data = self.data.reshape(shape)

        def bw(g):
            _acc(self, g.reshape(old))

        return _make(out_data, (self,), bw)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.data.ndim)))
        inv = tuple(np.argsort(axes))

        def bw(g):
            _acc(self, g.transpose(inv))

        return _make(self.data.transpose(axes), (self,), bw)

    # -- elementwise --------------------------------------------------------

    def relu(self):
        keep = self.data > 0
        out_data = np.where(keep, self.data, 0.0)

        def bw(g):
            _acc(self, g * keep)

        return _make(out_data, (self,), bw)

    def exp(self):
        out_data = np.exp(self.data)

        def bw(g):
            _acc(self, g * out_data)

        return _make(out_data, (self,), bw)

    def log(self):
        def bw(g):
            _acc(self, g / self.data)

        return _make(np.log(self.data), (self,), bw)

    def abs(self):
        sign = np.sign(self.data)

        def bw(g):
            _acc(self, g * sign)

        return _make(np.abs(self.data), (self,), bw)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def bw(g):
            if axis is None:
                _acc(self, np.broadcast_to(g, shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            _acc(self, np.broadcast_to(g, shape).copy())

        return _make(out_data, (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.data.shape[a] for a in ax]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def check_finite(t: Tensor, name: str = "tensor") -> Tensor:
    """Raise NonFiniteError if ``t`` contains NaN or Inf."""
    if not np.isfinite(t.data).all():
        raise NonFiniteError(f"{name} contains non-finite values")
    return t


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2D tensors or two stacked 3D tensors."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim == 2 and b.data.ndim == 2:
        if a.data.shape[1] != b.data.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {a.data.shape} x {b.data.shape}")
    elif a.data.ndim == 3 and b.data.ndim == 3:
        if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
            raise ShapeError(f"batched matmul shapes differ: {a.data.shape} x {b.data.shape}")
    else:
        raise ShapeError(f"matmul supports 2D or batched 3D operands, got {a.data.ndim}D and {b.data.ndim}D")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _acc(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(out_data, (a, b), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis``."""
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _acc(t, piece)

    return _make(out_data, tuple(tensors), bw)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer index; gradient scatters back."""
    table = _wrap(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(f"index out of range for table with {table.data.shape[0]} rows")
    out_data = table.data[idx]

    def bw(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx.ravel(), g.reshape(-1, *table.data.shape[1:]))
            _acc(table, gt)

    return _make(out_data, (table,), bw)


embedding_lookup = take_rows


# -- softmax family ----------------------------------------------------------


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Row softmax over visible positions only; invisible entries are exactly 0.

    ``mask`` is a 0/1 array broadcastable to ``scores``; the row maximum used
    for numerical stability is taken over visible entries, so an all-visible
    mask reproduces a dense softmax bit for bit.
    """
    scores = _wrap(scores)
    vis = np.broadcast_to(np.asarray(mask) != 0, scores.data.shape)
    if not vis.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has no visible entries")
    row_max = np.where(vis, scores.data, -np.inf).max(axis=-1, keepdims=True)
    e = np.where(vis, np.exp(scores.data - row_max), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if scores.requires_grad:
            dot = (g * p).sum(axis=-1, keepdims=True)
            _acc(scores, p * (g - dot))

    return _make(p, (scores,), bw)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``."""
    t = _wrap(t)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if t.requires_grad:
            dot = (g * p).sum(axis=axis, keepdims=True)
            _acc(t, p * (g - dot))

    return _make(p, (t,), bw)


def cross_entropy_logits(logits: Tensor, targets, ignore_index=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax.

    Positions whose target equals ``ignore_index`` are excluded from the
    mean; if every position is ignored the loss is defined as 0.
    """
    logits = _wrap(logits)
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (logits.data.shape[0],):
        raise ShapeError(f"targets shape {t.shape} does not match logits rows {logits.data.shape[0]}")
    keep = np.ones(t.shape, dtype=bool) if ignore_index is None else t != ignore_index
    valid = t[keep]
    if valid.size and (valid.min() < 0 or valid.max() >= logits.data.shape[1]):
        raise IndexError(f"target id out of range for vocabulary of {logits.data.shape[1]}")
    n_kept = int(keep.sum())
    if n_kept == 0:
        warnings.warn("cross_entropy_logits: every position ignored, loss is 0")
        return Tensor(0.0)
    mx = logits.data.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(logits.data - mx).sum(axis=1))
    rows = np.arange(t.shape[0])
    nll = lse - logits.data[rows, np.where(keep, t, 0)]
    out_data = np.asarray((nll * keep).sum() / n_kept)

    def bw(g):
        if logits.requires_grad:
            p = np.exp(logits.data - lse[:, None])
            p[rows[keep], t[keep]] -= 1.0
            p[~keep] = 0.0
            _acc(logits, p * (float(g) / n_kept))

    return _make(out_data, (logits,), bw)


# -- normalization -----------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance; then affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.data.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over an empty axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gain.data * xhat + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            _acc(gain, (g * xhat).sum(axis=lead))
        if bias.requires_grad:
            _acc(bias, g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gain.data
            dvar = (dxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv ** 3
            dmu = (-dxhat * inv).sum(axis=-1, keepdims=True) + dvar * (-2.0) * xc.mean(axis=-1, keepdims=True)
            _acc(x, dxhat * inv + dvar * 2.0 * xc / d + dmu / d)

    return _make(out_data, (x, gain, bias), bw)


class BatchNormState:
    """Running statistics for batch normalization, one value per channel."""

    def __init__(self, num_channels: int, momentum: float = 0.1):
        self.running_mean = np.zeros(num_channels)
        self.running_var = np.ones(num_channels)
        self.momentum = momentum
        self.updates = 0


def batch_norm(x: Tensor, gain: Tensor, bias: Tensor, state: BatchNormState,
               training: bool, channel_axis: int = 0, eps: float = 1e-5) -> Tensor:
    """Normalize per channel across every other axis (population variance).

    Training mode uses batch statistics and folds them into the running
    stats with ``state.momentum``; eval mode normalizes with the running
    stats (warned once if never updated).
    """
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    axes = tuple(a for a in range(x.data.ndim) if a != channel_axis)
    cshape = [1] * x.data.ndim
    cshape[channel_axis] = x.data.shape[channel_axis]
    gain_b = gain.data.reshape(cshape)
    bias_b = bias.data.reshape(cshape)
    n = int(np.prod([x.data.shape[a] for a in axes])) if axes else 1

    if training:
        if n < 1:
            raise ShapeError("batch_norm training mode needs at least one element per channel")
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu.reshape(-1)
        state.running_var = (1 - m) * state.running_var + m * var.reshape(-1)
        state.updates += 1
    else:
        if state.updates == 0:
            log.warning("batch_norm eval before any training update: using initialized stats")
        mu = state.running_mean.reshape(cshape)
        xc = x.data - mu
        var = state.running_var.reshape(cshape)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gain_b * xhat + bias_b

    def bw(g):
        if gain.requires_grad:
            _acc(gain, (g * xhat).sum(axis=axes))
        if bias.requires_grad:
            _acc(bias, g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gain_b
            if training:
                dvar = (dxhat * xc).sum(axis=axes, keepdims=True) * (-0.5) * inv ** 3
                dmu = (-dxhat * inv).sum(axis=axes, keepdims=True) + dvar * (-2.0) * xc.mean(axis=axes, keepdims=True)
                _acc(x, dxhat * inv + dvar * 2.0 * xc / n + dmu / n)
            else:
                _acc(x, dxhat * inv)

    return _make(out_data, (x, gain, bias), bw)


# -- convolution -------------------------------------------------------------


def conv2d_3x3(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation with zero same-padding.

    ``x`` is [c_in, H, W], ``weights`` is [c_out, c_in, 3, 3]; output keeps
    the spatial shape, [c_out, H, W].
    """
    x, weights = _wrap(x), _wrap(weights)
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d_3x3 input must be [c_in, H, W], got {x.data.shape}")
    if weights.data.ndim != 4 or weights.data.shape[2:] != (3, 3) or weights.data.shape[1] != x.data.shape[0]:
        raise ShapeError(f"conv2d_3x3 weights must be [c_out, {x.data.shape[0]}, 3, 3], got {weights.data.shape}")
    c_in, h, w = x.data.shape
    c_out = weights.data.shape[0]
    xp = np.zeros((c_in, h + 2, w + 2))
    xp[:, 1:h + 1, 1:w + 1] = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    cols = win.transpose(1, 2, 0, 3, 4).reshape(h * w, c_in * 9)
    w_mat = weights.data.reshape(c_out, c_in * 9)
    y = (cols @ w_mat.T).T.reshape(c_out, h, w)
    parents = [x, weights]
    if bias is not None:
        bias = _wrap(bias)
        y = y + bias.data[:, None, None]
        parents.append(bias)

    def bw(g):
        g_mat = g.reshape(c_out, h * w)
        if weights.requires_grad:
            _acc(weights, (g_mat @ cols).reshape(weights.data.shape))
        if bias is not None and bias.requires_grad:
            _acc(bias, g.sum(axis=(1, 2)))
        if x.requires_grad:
            dcols = (g_mat.T @ w_mat).reshape(h, w, c_in, 3, 3)
            dxp = np.zeros((c_in, h + 2, w + 2))
            for di in range(3):
                for dj in range(3):
                    dxp[:, di:di + h, dj:dj + w] += dcols[:, :, :, di, dj].transpose(2, 0, 1)
            _acc(x, dxp[:, 1:h + 1, 1:w + 1])

    return _make(y, tuple(parents), bw)
