"""Dense float64 tensors with reverse-mode differentiation.

Only the handful of operations the toy BEV networks and the distillation
losses need are provided. Every op records its parents and a closure that
pushes the output gradient back to them; :func:`backward` walks the
resulting DAG in reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Tensor:
    """A float64 array plus the bookkeeping needed for backprop.

    Tensors built from external data are checked for NaN/Inf. Tensors built
    by ops skip the check; the training loop guards the loss instead.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = None
        out.op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._from_op(self.data, (), "detach")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # arithmetic -----------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(as_tensor(other), self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __pow__(self, p: float) -> "Tensor":
        return power(self, p)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return tmean(self, axis)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._from_op(np.asarray(x, dtype=np.float64), (), "const")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._from_op(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        out._backward = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._from_op(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        out._backward = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._from_op(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        out._backward = lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )
    return out


def power(a: Tensor, p: float) -> Tensor:
    out = Tensor._from_op(a.data**p, (a,), "pow")
    if out.requires_grad:
        out._backward = lambda g: (g * p * a.data ** (p - 1),)
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor._from_op(a.data * a.data, (a,), "square")
    if out.requires_grad:
        out._backward = lambda g: (2.0 * g * a.data,)
    return out


def tabs(a: Tensor) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    out = Tensor._from_op(np.abs(a.data), (a,), "abs")
    if out.requires_grad:
        out._backward = lambda g: (g * np.sign(a.data),)
    return out


def tsum(a: Tensor, axis=None) -> Tensor:
    out = Tensor._from_op(np.asarray(a.data.sum(axis=axis)), (a,), "sum")
    if out.requires_grad:
        def _bw(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape),)
        out._backward = _bw
    return out


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor._from_op(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: (g.reshape(a.shape),)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat")
    if out.requires_grad:
        bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
        out._backward = lambda g: tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))
    return out


def relu(a: Tensor) -> Tensor:
    """Elementwise max(x, 0). The gradient at exactly 0 is 0."""
    pos = a.data > 0
    out = Tensor._from_op(np.where(pos, a.data, 0.0), (a,), "relu")
    if out.requires_grad:
        out._backward = lambda g: (g * pos,)
    return out


def gather_cells(a: Tensor, src_index: np.ndarray) -> Tensor:
    """Pick spatial cells of a C x H x W tensor by flat source index.

    ``src_index`` has shape H_out x W_out; entries < 0 produce zeros.
    """
    c = a.shape[0]
    flat = a.data.reshape(c, -1)
    idx = src_index.reshape(-1)
    valid = idx >= 0
    out_flat = np.zeros((c, idx.size))
    out_flat[:, valid] = flat[:, idx[valid]]
    out = Tensor._from_op(out_flat.reshape((c,) + src_index.shape), (a,), "gather")
    if out.requires_grad:
        def _bw(g):
            ga = np.zeros((flat.shape[1], c))
            np.add.at(ga, idx[valid], g.reshape(c, -1)[:, valid].T)
            return (ga.T.reshape(a.shape),)
        out._backward = _bw
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of a C_in x H x W map with a k x k kernel."""
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects [C,H,W] input and [O,C,k,k] weight, got {x.shape}, {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise ValueError(f"kernel must be 1x1 or 3x3, got {k}x{k2}")
    if c_in != x.shape[0]:
        raise ValueError(f"weight expects {c_in} input channels, input has {x.shape[0]}")
    if padding not in (0, (k - 1) // 2):
        raise ValueError(f"padding must be 0 or {(k - 1) // 2} for k={k}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} does not match {c_out} output channels")
    _, h, w = x.shape
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    if ho < 1 or wo < 1:
        raise ValueError("input smaller than kernel")
    if k == 1:
        col = x.data.reshape(c_in, -1)
    else:
        if padding:
            xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
            xp[:, padding:padding + h, padding:padding + w] = x.data
        else:
            xp = x.data
        col = np.empty((c_in, k, k, ho, wo))
        for i in range(k):
            for j in range(k):
                col[:, i, j] = xp[:, i:i + ho, j:j + wo]
        col = col.reshape(c_in * k * k, -1)
    w2 = weight.data.reshape(c_out, -1)
    out = w2 @ col
    if bias is not None:
        out += bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)
    res = Tensor._from_op(out.reshape(c_out, ho, wo), parents, "conv2d")
    if res.requires_grad:
        def _bw(g):
            g2 = g.reshape(c_out, -1)
            gw = (g2 @ col.T).reshape(weight.shape) if weight.requires_grad else None
            gx = None
            if x.requires_grad:
                gcol = w2.T @ g2
                if k == 1:
                    gx = gcol.reshape(x.shape)
                else:
                    gcol = gcol.reshape(c_in, k, k, ho, wo)
                    gxp = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
                    for i in range(k):
                        for j in range(k):
                            gxp[:, i:i + ho, j:j + wo] += gcol[:, i, j]
                    gx = gxp[:, padding:padding + h, padding:padding + w]
            if bias is None:
                return gx, gw
            return gx, gw, g2.sum(axis=1)
        res._backward = _bw
    return res


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool) -> Tensor:
    """Per-channel normalization over the spatial cells of one sample.

    In training mode the batch statistics are used and the running buffers
    are updated in place with momentum 0.1 (unbiased variance, as usual).
    """
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm affine params must have shape ({c},)")
    flat = x.data.reshape(c, -1)
    n = flat.shape[1]
    if training:
        mu = flat.mean(axis=1)
        var = flat.var(axis=1)
        running_mean *= 1 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mu
        running_var *= 1 - BN_MOMENTUM
        running_var += BN_MOMENTUM * (var * n / max(n - 1, 1))
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (flat - mu[:, None]) * inv[:, None]
    out = gamma.data[:, None] * xhat + beta.data[:, None]
    res = Tensor._from_op(out.reshape(x.shape), (x, gamma, beta), "batchnorm")
    if res.requires_grad:
        def _bw(g):
            g2 = g.reshape(c, -1)
            gx = g2 * gamma.data[:, None]
            if training:
                gx = inv[:, None] * (gx - gx.mean(axis=1, keepdims=True)
                                     - xhat * (gx * xhat).mean(axis=1, keepdims=True))
            else:
                gx = gx * inv[:, None]
            return gx.reshape(x.shape), (g2 * xhat).sum(axis=1), g2.sum(axis=1)
        res._backward = _bw
    return res


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor!r}")
    if factor == 1:
        return x
    c, h, w = x.shape
    out = Tensor._from_op(x.data.repeat(factor, axis=1).repeat(factor, axis=2), (x,), "upsample")
    if out.requires_grad:
        out._backward = lambda g: (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)
    return out


def avg_pool(x: Tensor, factor: int = 2) -> Tensor:
    c, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"cannot pool {h}x{w} by {factor}")
    ho, wo = h // factor, w // factor
    out = Tensor._from_op(x.data.reshape(c, ho, factor, wo, factor).mean(axis=(2, 4)), (x,), "avgpool")
    if out.requires_grad:
        scale = 1.0 / (factor * factor)
        out._backward = lambda g: ((g * scale).repeat(factor, axis=1).repeat(factor, axis=2),)
    return out


def softmax_scaled(values: Tensor, tau: float) -> Tensor:
    """Softmax of ``values / tau`` over a flat vector, max-subtracted."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if values.data.ndim != 1:
        raise ValueError("softmax_scaled expects a flat vector")
    z = values.data / tau
    e = np.exp(z - z.max())
    p = e / e.sum()
    out = Tensor._from_op(p, (values,), "softmax")
    if out.requires_grad:
        out._backward = lambda g: (p * (g - np.dot(g, p)) / tau,)
    return out


# graph traversal -------------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, every input before its consumer."""
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


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Gradients accumulate into ``.grad`` of every requires-grad leaf and are
    also returned keyed by leaf. Leaves without ``requires_grad`` are omitted.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node._accumulate(g)
                leaves[node] = node.grad
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + gp if key in grads else gp
    return leaves


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# numerical checking ------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
               kink_inputs: Sequence[Tensor] = ()) -> float:
    """Max relative error between backprop and central differences.

    ``f`` rebuilds the scalar loss from the current contents of ``inputs``.
    Coordinates of tensors listed in ``kink_inputs`` with ``|x| < 10 h`` are
    skipped (relu/abs kinks).
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    for t in inputs:
        t.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    kink_ids = {id(t) for t in kink_inputs}
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            x0 = flat[i]
            if id(t) in kink_ids and abs(x0) < 10 * h:
                continue
            flat[i] = x0 + h
            fp = f().item()
            flat[i] = x0 - h
            fm = f().item()
            flat[i] = x0
            num = (fp - fm) / (2 * h)
            err = abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), 1e-8)
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
