"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Operations executed inside an active :class:`Graph` are recorded in creation
order, which is already a topological order, so :meth:`Graph.backward` simply
walks the tape in reverse. Outside a graph, ops run as plain numpy forward
passes and nothing is recorded.

Image tensors use NHWC layout throughout.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "NumericContractError",
    "ShapeError",
    "GraphError",
    "as_tensor",
    "record_op",
    "matmul",
    "add",
    "mul",
    "relu",
    "conv2d",
    "batchnorm2d",
    "global_avg_pool",
    "reshape",
    "concat",
    "l2_normalize_rows",
    "scalar_mul",
    "sum_all",
    "softmax_cross_entropy",
    "backward",
    "numerical_grad",
    "grad_rel_error",
]


class NumericContractError(ValueError):
    """A tensor would contain NaN or Inf."""


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    """n-dimensional float64 array with an optional gradient slot.

    The data array is made read-only on construction. Only optimizers rebind
    ``data`` (see :meth:`assign`); ``grad`` is filled by :meth:`Graph.backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericContractError(
                f"non-finite values in tensor {name or ''} of shape {arr.shape}"
            )
        arr.flags.writeable = False
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def assign(self, new_data: np.ndarray) -> None:
        """Rebind the value (optimizer use). Shape must not change."""
        new = Tensor(new_data, name=self.name).data
        if new.shape != self.data.shape:
            raise ShapeError(f"assign: shape {new.shape} != {self.data.shape}")
        self.data = new

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        g = Graph.current()
        if g is None:
            raise GraphError("backward() outside an active Graph; use Graph.backward")
        g.backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Operation tape. Use as a context manager to enable recording.

    >>> with Graph() as g:
    ...     loss = sum_all(mul(x, x))
    >>> g.backward(loss)
    """

    _local = threading.local()

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    @classmethod
    def current(cls) -> "Graph | None":
        stack = getattr(cls._local, "stack", None)
        return stack[-1] if stack else None

    def __enter__(self) -> "Graph":
        stack = getattr(Graph._local, "stack", None)
        if stack is None:
            stack = Graph._local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Graph._local.stack.pop()

    def record(self, node: Node) -> None:
        if self._consumed:
            raise GraphError("graph already differentiated; build a new Graph")
        self.nodes.append(node)

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
        """Fill ``grad`` of every leaf that requires grad with d(loss)/d(leaf).

        ``params`` listed here always receive a gradient array, zeros when the
        loss does not depend on them.
        """
        if self._consumed:
            raise GraphError("double backward is not supported")
        if loss.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(n.output) for n in self.nodes}
        if id(loss) not in produced and not loss.requires_grad:
            raise GraphError("loss was not produced by this graph")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            in_grads = node.vjp(g_out)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if id(t) not in produced:
                    leaves[key] = t
        if loss.requires_grad and id(loss) not in produced:
            leaves[id(loss)] = loss
        for key, t in leaves.items():
            t.grad = grads[key].reshape(t.shape)
        for p in params:
            if p.grad is None or id(p) not in leaves:
                p.grad = np.zeros_like(p.data)
        self.nodes = []


def backward(graph: Graph, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    graph.backward(loss, params)


def record_op(kind: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``out_data`` as a Tensor and record it on the active graph.

    ``vjp`` maps the output cotangent to one cotangent (or None) per input.
    """
    needs = any(t.requires_grad for t in inputs)
    try:
        out = Tensor(out_data, requires_grad=needs)
    except NumericContractError as exc:
        raise NumericContractError(f"{kind}: {exc}") from None
    g = Graph.current()
    if g is not None and needs:
        g.record(Node(kind, tuple(inputs), out, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ----------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return record_op("matmul", A @ B, (a, b), vjp)


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting (used for biases and skips)."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = np.add(a.data, b.data)
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    sa, sb = a.shape, b.shape

    def vjp(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return record_op("add", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return (g * B if a.requires_grad else None, g * A if b.requires_grad else None)

    return record_op("mul", A * B, (a, b), vjp)


def scalar_mul(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return record_op("scalar_mul", x.data * c, (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record_op("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    total = np.sum(x.data.reshape(-1))
    return record_op("sum", np.array(total), (x,), lambda g: (np.full(shape, float(g)),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return record_op("reshape", out, (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence) -> Tensor:
    """Concatenate along the batch (first) axis."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    tail = ts[0].shape[1:]
    for t in ts[1:]:
        if t.shape[1:] != tail:
            raise ShapeError(f"concat: trailing shapes differ, {ts[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[0] for t in ts])
    out = np.concatenate([t.data for t in ts], axis=0)

    def vjp(g):
        return [g[bounds[i]:bounds[i + 1]] for i in range(len(ts))]

    return record_op("concat", out, ts, vjp)


def l2_normalize_rows(x, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: need a matrix, got {x.shape}")
    norm = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def vjp(g):
        return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / norm,)

    return record_op("l2_normalize_rows", y, (x,), vjp)


def global_avg_pool(x) -> Tensor:
    """(N, H, W, C) -> (N, C)."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: need NHWC input, got {x.shape}")
    n, h, w, c = x.shape

    def vjp(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), (n, h, w, c)).copy(),)

    return record_op("global_avg_pool", x.data.mean(axis=(1, 2)), (x,), vjp)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # rows are (kh, kw, C) patches, matching the weight layout used in conv2d
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((n, ho, wo, kh * kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i * kw + j, :] = xp[:, i : i + stride * ho : stride,
                                              j : j + stride * wo : stride, :]
    return cols.reshape(-1, kh * kw * c)


def conv2d(x, weight, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution via im2col.

    x: (N, H, W, Cin); weight: (Cout, Cin, kh, kw). Zero padding.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[3] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: bad stride={stride} pad={pad}")
    n, h, w, cin = x.shape
    cout, _, kh, kw = weight.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gw = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            wt = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += (
                        (g2 @ wt[i, j]).reshape(n, ho, wo, cin)
                    )
            gx = gxp[:, pad : pad + h, pad : pad + w, :] if pad else gxp
        return gx, gw

    return record_op("conv2d", out, (x, weight), vjp)


def batchnorm2d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W) of an NHWC tensor.

    In training mode the running buffers are updated in place as
    ``running = momentum * running + (1 - momentum) * batch_stat``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 4 or gamma.shape != (x.shape[3],) or beta.shape != (x.shape[3],):
        raise ShapeError(
            f"batchnorm2d: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}"
        )
    X, G = x.data, gamma.data
    if training:
        m = X.shape[0] * X.shape[1] * X.shape[2]
        mean = X.mean(axis=(0, 1, 2))
        xc = X - mean
        var = (xc * xc).mean(axis=(0, 1, 2))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var * m / max(m - 1, 1)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * unbiased

        def vjp(g):
            gg = np.sum(g * xhat, axis=(0, 1, 2))
            gb = np.sum(g, axis=(0, 1, 2))
            gx = None
            if x.requires_grad:
                gxhat = g * G
                gx = inv * (gxhat - gxhat.mean(axis=(0, 1, 2))
                            - xhat * np.mean(gxhat * xhat, axis=(0, 1, 2)))
            return gx, gg, gb
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (X - running_mean) * inv

        def vjp(g):
            return (g * G * inv if x.requires_grad else None,
                    np.sum(g * xhat, axis=(0, 1, 2)),
                    np.sum(g, axis=(0, 1, 2)))

    return record_op("batchnorm2d", xhat * G + beta.data, (x, gamma, beta), vjp)


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be n x K, got {logits.shape}")
    n, k = logits.shape
    if k < 2:
        raise ShapeError(f"softmax_cross_entropy: need K >= 2 classes, got {k}")
    if t.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: {n} logit rows vs {t.shape[0]} targets")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ValueError(f"softmax_cross_entropy: targets must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsum - z[rows, t])

    def vjp(g):
        p = np.exp(z - logsum[:, None])
        p[rows, t] -= 1.0
        return (p * (float(g) / n),)

    return record_op("softmax_cross_entropy", np.array(loss), (logits,), vjp)


# ------------------------------------------------------------ gradient checks


def numerical_grad(f: Callable[[], Tensor], t: Tensor, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``t``.

    ``f`` is re-evaluated with ``t.data`` perturbed one entry at a time; it must
    be side-effect free apart from reading ``t``.
    """
    base = t.data.copy()
    out = np.zeros(base.size)
    flat = base.reshape(-1)
    try:
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            t.data = flat.reshape(base.shape).copy()
            fp = f().item()
            flat[i] = orig - step
            t.data = flat.reshape(base.shape).copy()
            fm = f().item()
            flat[i] = orig
            out[i] = (fp - fm) / (2 * step)
    finally:
        t.data = base
        t.data.flags.writeable = False
    return out.reshape(base.shape)


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), 0 when both vanish."""
    a = np.asarray(analytic, dtype=float).reshape(-1)
    b = np.asarray(numeric, dtype=float).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
