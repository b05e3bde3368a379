"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every operation records its parents and a closure mapping the output
gradient to parent gradients. ``backward`` walks the tape in reverse
topological order. The graph is rebuilt on each forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

# below this norm a feature vector is treated as dead by cosine similarity
COSINE_EPS = 1e-12


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    # --------------------------------------------------------------- operators
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> None:
        backward(self)


def _raise_not_scalar():
    raise ValueError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), fn)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)) without overflow for large |a|."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(-x),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1: 0.5 d^2/beta inside |d| < beta, |d| - 0.5 beta outside."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"smooth_l1 shape mismatch: {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    ad = np.abs(d)
    inside = ad < beta
    out = np.where(inside, 0.5 * d * d / beta, ad - 0.5 * beta)
    dd = np.where(inside, d / beta, np.sign(d))
    return _make(out, (pred, target), lambda g: (g * dd, -g * dd))


# ---------------------------------------------------------------- reductions
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / max(n, 1))


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal element."""
    a = as_tensor(a)
    if axis is None:
        flat = int(np.argmax(a.data))
        out = a.data.reshape(-1)[flat]

        def fn(g):
            grad = np.zeros(a.size)
            grad[flat] = g
            return (grad.reshape(a.shape),)

        return _make(np.asarray(out), (a,), fn)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros(a.shape)
        np.put_along_axis(grad, np.expand_dims(idx, axis), g, axis=axis)
        return (grad,)

    return _make(out, (a,), fn)


# --------------------------------------------------------------------- shape
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def fn(g):
        grad = np.zeros(a.shape)
        np.add.at(grad, index, g)
        return (grad,)

    return _make(np.array(a.data[index]), (a,), fn)


def take_rows(a, idx) -> Tensor:
    """Gather rows ``a[idx]`` along the first axis; repeated indices accumulate."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def fn(g):
        grad = np.zeros(a.shape)
        np.add.at(grad, idx, g)
        return (grad,)

    return _make(a.data[idx], (a,), fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return _make(np.stack([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# ------------------------------------------------------------ sparse / dense
def segment_max(values, segment_ids, num_segments: int) -> Tensor:
    """Per-segment channel max of ``values`` (N, C), floored at zero.

    Empty segments are zero. The floor means only non-negative inputs are
    reduced exactly; callers pass rectified features.
    """
    values = as_tensor(values)
    seg = np.asarray(segment_ids, dtype=np.int64)
    n, c = values.shape
    out = np.zeros((num_segments, c))
    winner = np.full((num_segments, c), -1, dtype=np.int64)
    if n:
        order = np.argsort(seg, kind="stable")
        sseg = seg[order]
        svals = values.data[order]
        starts = np.flatnonzero(np.r_[True, sseg[1:] != sseg[:-1]])
        segs = sseg[starts]
        smax = np.maximum.reduceat(svals, starts, axis=0)
        counts = np.diff(np.r_[starts, n])
        hit = svals == np.repeat(smax, counts, axis=0)
        # first row (in input order) attaining the max wins the gradient
        pos = np.where(hit, order[:, None], n)
        first = np.minimum.reduceat(pos, starts, axis=0)
        keep = smax > 0
        out[segs] = np.where(keep, smax, 0.0)
        winner[segs] = np.where(keep, first, -1)

    def fn(g):
        grad = np.zeros((n, c))
        s, ch = np.nonzero(winner >= 0)
        np.add.at(grad, (winner[s, ch], ch), g[s, ch])
        return (grad,)

    return _make(out, (values,), fn)


def scatter_rows(values, idx, num_rows: int) -> Tensor:
    """Place rows of ``values`` into a zero matrix with ``num_rows`` rows."""
    values = as_tensor(values)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((num_rows,) + values.shape[1:])
    np.add.at(out, idx, values.data)
    return _make(out, (values,), lambda g: (g[idx],))


def conv2d(x, weight, bias=None) -> Tensor:
    """Same-padded stride-1 convolution of a channel-last map.

    x: (H, W, Cin); weight: (kh, kw, Cin, Cout) with odd kernel sizes.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    h, w, cin = x.shape
    kh, kw, _, cout = weight.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(0, 1))
    # win: (H, W, Cin, kh, kw) -> cols: (H*W, kh*kw*Cin)
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(h, w, cout)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def fn(g):
        g2 = g.reshape(h * w, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gcols = (g2 @ wmat.T).reshape(h, w, kh, kw, cin)
        gpad = np.zeros(padded.shape)
        for i in range(kh):
            for j in range(kw):
                gpad[i:i + h, j:j + w] += gcols[:, :, i, j]
        gx = gpad[ph:ph + h, pw:pw + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, fn)


# ---------------------------------------------------------------- similarity
def cosine_sim(a, b) -> Tensor:
    """Cosine similarity of two vectors; zero (with zero gradient) for dead inputs."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 1 or a.shape[0] < 1:
        raise ValueError(f"cosine_sim expects equal-length vectors, got {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a.data), np.linalg.norm(b.data)
    if na < COSINE_EPS or nb < COSINE_EPS:
        return _make(np.asarray(0.0), (a, b), lambda g: (np.zeros(a.shape), np.zeros(b.shape)))
    dot = float(a.data @ b.data)
    out = dot / (na * nb)

    def fn(g):
        ga = g * (b.data / (na * nb) - out * a.data / (na * na))
        gb = g * (a.data / (na * nb) - out * b.data / (nb * nb))
        return ga, gb

    return _make(np.asarray(out), (a, b), fn)


def cosine_matrix(x) -> Tensor:
    """Pairwise cosine similarities between the rows of ``x`` (n, C).

    Rows with norm below ``COSINE_EPS`` give zero similarity and no gradient,
    matching ``cosine_sim``.
    """
    x = as_tensor(x)
    norms = np.linalg.norm(x.data, axis=1)
    alive = norms >= COSINE_EPS
    inv = np.where(alive, 1.0 / np.where(alive, norms, 1.0), 0.0)
    u = x.data * inv[:, None]
    out = u @ u.T

    def fn(g):
        gs = g + g.T
        gu = gs @ u
        # project out the radial component: d(u)/dx = (I - u u^T)/|x|
        radial = np.sum(gu * u, axis=1, keepdims=True)
        return ((gu - radial * u) * inv[:, None],)

    return _make(out, (x,), fn)


# ------------------------------------------------------------------ backward
def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(p.shape)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -------------------------------------------------------------- grad checking
@dataclass
class GradReport:
    max_abs_err: float
    max_rel_err: float
    table: list = field(default_factory=list)  # (flat index, analytic, numeric)


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5,
                      rel_floor: float = 1e-3, indices: Optional[Sequence[int]] = None) -> GradReport:
    """Compare backward() gradients of scalar ``f`` at ``x`` with central differences.

    Relative error is |a - n| / max(|a|, |n|, rel_floor). ``indices`` restricts
    the check to those flat coordinates (all of them by default).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    backward(out)
    analytic = np.zeros(base.shape) if xt.grad is None else xt.grad
    flat = base.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices, dtype=np.int64).reshape(-1)
    numeric = np.zeros(len(idx))
    for j, i in enumerate(idx):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += eps
        lo[i] -= eps
        fh = f(Tensor(hi.reshape(base.shape))).data
        fl = f(Tensor(lo.reshape(base.shape))).data
        if not (np.all(np.isfinite(fh)) and np.all(np.isfinite(fl))):
            raise FloatingPointError(f"non-finite function value while perturbing element {i}")
        numeric[j] = (float(fh) - float(fl)) / (2 * eps)
    a = analytic.reshape(-1)[idx]
    abs_err = np.abs(a - numeric)
    rel_err = abs_err / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), rel_floor)
    table = [(int(i), float(a[j]), float(numeric[j])) for j, i in enumerate(idx)]
    return GradReport(
        max_abs_err=float(abs_err.max()) if a.size else 0.0,
        max_rel_err=float(rel_err.max()) if a.size else 0.0,
        table=table,
    )
