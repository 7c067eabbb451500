"""Dense tensors with reverse-mode automatic differentiation.

Values are stored as float32 by default (float64 is supported so numerical
checks can run with extra headroom). Shapes are explicit everywhere; the only
implicit broadcast is scalar-with-tensor. Every op validates that its output
is finite, so NaN/Inf surfaces at the op that produced it instead of three
layers downstream.
"""

from __future__ import annotations

import numpy as np

EPS_LOG = 1e-12  # clamp for logs inside kl_div; spike-derived maps contain exact zeros

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (teacher/eval passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {op}")


class Tensor:
    """N-dimensional value container and node of the backward graph.

    A tensor produced by an op keeps references to its parents and a rule
    that maps the output gradient to parent gradients. ``backward`` walks
    the graph once in reverse topological order, so each use of an input
    contributes to its gradient exactly once per call; repeated calls
    accumulate into ``.grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None
        self._op = "leaf"

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
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable tensor that requires grad."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        # per-call flow map so repeated backward() calls add into .grad cleanly
        flow: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flow.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g
            if node._grad_fn is None:
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = flow.get(id(parent))
                flow[id(parent)] = pg if prev is None else prev + pg

    # ----- operator sugar -----
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn, op: str) -> Tensor:
    _check_finite(data, op)
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = req
    out._parents = parents if req else ()
    out._grad_fn = grad_fn if req else None
    out._op = op
    return out


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    # only scalar-with-tensor may broadcast
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # fold a full-shape gradient back onto a scalar operand
    if grad.shape == shape:
        return grad
    return grad.sum().reshape(shape) if shape else np.asarray(grad.sum())


# ----- elementwise arithmetic -----

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "add")

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "sub")

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "mul")

    def grad_fn(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "div")

    def grad_fn(g):
        ga = _reduce_to(g / b.data, a.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), grad_fn, "div")


def relu(x) -> Tensor:
    x = _coerce(x)
    mask = x.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0), (x,), grad_fn, "relu")


def exp(x) -> Tensor:
    x = _coerce(x)
    out_data = np.exp(x.data)

    def grad_fn(g):
        return (g * out_data,)

    return _make(out_data, (x,), grad_fn, "exp")


def log(x) -> Tensor:
    x = _coerce(x)

    def grad_fn(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), grad_fn, "log")


# ----- reductions and shape ops -----

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = _coerce(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, x.shape).astype(x.dtype),)

    return _make(np.asarray(out_data), (x,), grad_fn, "sum")


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = _coerce(x)
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else x.size // np.asarray(out_data).size

    def grad_fn(g):
        if axis is None:
            g2 = g
        else:
            g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, x.shape).astype(x.dtype),)

    return _make(np.asarray(out_data), (x,), grad_fn, "mean")


def reshape(x, shape) -> Tensor:
    x = _coerce(x)
    out_data = x.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _make(out_data, (x,), grad_fn, "reshape")


def flatten(x) -> Tensor:
    """Collapse everything but the leading (batch) axis."""
    x = _coerce(x)
    return reshape(x, (x.shape[0], -1))


def narrow(x, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along axis 0."""
    x = _coerce(x)
    out_data = np.ascontiguousarray(x.data[start:stop])

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _make(out_data, (x,), grad_fn, "narrow")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn, "concat")


def repeat_batch(x, times: int) -> Tensor:
    """Tile along a new leading axis and merge it into axis 0 ([N,...] -> [times*N,...])."""
    x = _coerce(x)
    out_data = np.tile(x.data, (times,) + (1,) * (x.ndim - 1))

    def grad_fn(g):
        return (g.reshape((times,) + x.shape).sum(axis=0),)

    return _make(out_data, (x,), grad_fn, "repeat_batch")


def gather_rows(x, index) -> Tensor:
    """Pick one entry per row of a 2-D tensor: out[n] = x[n, index[n]]."""
    x = _coerce(x)
    idx = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ValueError(f"gather_rows: expected [N,K] and index [N], got {x.shape} and {idx.shape}")
    rows = np.arange(x.shape[0])

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _make(x.data[rows, idx], (x,), grad_fn, "gather_rows")


# ----- linear algebra -----

def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), grad_fn, "matmul")


def linear(x, weight, bias) -> Tensor:
    """Affine map out[N,O] = x[N,F] @ weight[O,F].T + bias[O]."""
    x, weight, bias = _coerce(x), _coerce(weight), _coerce(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match out features {weight.shape[0]}")

    def grad_fn(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _make(x.data @ weight.data.T + bias.data, (x, weight, bias), grad_fn, "linear")


# ----- convolution and pooling -----

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c, h, w = xp.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, (n, c, kh, kw, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride)
    )
    # (N, C*kh*kw, ho*wo), contiguous copy so matmul is fast
    return np.ascontiguousarray(windows).reshape(n, c * kh * kw, ho * wo)


def _col2im(gcols: np.ndarray, xshape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = xshape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    g6 = gcols.reshape(n, c, kh, kw, ho, wo)
    gx = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g6[:, :, i, j]
    if padding:
        gx = gx[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(gx)


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with kernel[O,C,kh,kw]."""
    x, kernel = _coerce(x), _coerce(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if c != ck:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {ck}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"conv2d: spatial dims {(h, w)} too small for kernel {(kh, kw)} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride)  # (N, C*kh*kw, P)
    w2 = kernel.data.reshape(o, -1)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out_data = np.matmul(w2, cols).reshape(n, o, ho, wo)

    def grad_fn(g):
        g2 = g.reshape(n, o, -1)
        gw = np.einsum("nop,nkp->ok", g2, cols).reshape(kernel.shape)
        gcols = np.matmul(w2.T, g2)  # (N, C*kh*kw, P)
        gx = _col2im(gcols, x.shape, kh, kw, stride, padding)
        return gx, gw

    return _make(out_data, (x, kernel), grad_fn, "conv2d")


def avg_pool2d(x, kernel: int, stride: int | None = None) -> Tensor:
    """Non-overlapping average pooling; spatial dims must be divisible by the window."""
    x = _coerce(x)
    if stride is None:
        stride = kernel
    if stride != kernel:
        raise ValueError("avg_pool2d: only stride == kernel is supported")
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ValueError(f"avg_pool2d: dims {(h, w)} not divisible by window {kernel}")
    ho, wo = h // kernel, w // kernel
    out_data = x.data.reshape(n, c, ho, kernel, wo, kernel).mean(axis=(3, 5))

    def grad_fn(g):
        g6 = np.broadcast_to(
            g[:, :, :, None, :, None] / (kernel * kernel), (n, c, ho, kernel, wo, kernel)
        )
        return (g6.reshape(x.shape).astype(x.dtype),)

    return _make(out_data, (x,), grad_fn, "avg_pool2d")


# ----- probabilistic ops -----

def softmax(x, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Temperature softmax with per-slice max subtraction for stability."""
    x = _coerce(x)
    if temperature <= 0:
        raise ValueError(f"softmax: temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((g - dot) * out_data / temperature,)

    return _make(out_data, (x,), grad_fn, "softmax")


def kl_div(p, q) -> Tensor:
    """Sum of p * log(p/q) over all elements, with 0*log(0) = 0.

    Both arguments are clamped at EPS_LOG inside the logs; q is expected to
    be a (near-)simplex but exact zeros survive thanks to the clamp.
    """
    p, q = _coerce(p), _coerce(q)
    if p.shape != q.shape:
        raise ValueError(f"kl_div: shape mismatch {p.shape} vs {q.shape}")
    pc = np.maximum(p.data, EPS_LOG)
    qc = np.maximum(q.data, EPS_LOG)
    log_ratio = np.log(pc) - np.log(qc)
    out_data = np.asarray((p.data * log_ratio).sum(), dtype=p.dtype)

    def grad_fn(g):
        gp = g * (log_ratio + p.data / pc)
        gq = g * (-p.data / qc) * (q.data >= EPS_LOG)
        return gp, gq

    return _make(out_data, (p, q), grad_fn, "kl_div")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _coerce(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_data = z - lse
    soft = np.exp(out_data)

    def grad_fn(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out_data, (x,), grad_fn, "log_softmax")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = _coerce(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: expected logits [N,K] and labels [N], got {logits.shape} and {labels.shape}")
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cross_entropy: label out of range [0,{k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out_data = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def grad_fn(g):
        soft = np.exp(logp)
        soft[np.arange(n), labels] -= 1.0
        return (g * soft / n,)

    return _make(out_data, (logits,), grad_fn, "cross_entropy")


# ----- batch normalization -----

def batch_norm2d(x, weight, bias, running_mean, running_var, training: bool,
                 momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Channel-wise batch norm over [N,C,H,W].

    In training mode statistics come from the batch (biased variance) and
    the supplied running buffers are updated in place; in eval mode the
    running buffers are used as constants.
    """
    x, weight, bias = _coerce(x), _coerce(weight), _coerce(bias)
    if x.ndim != 4:
        raise ValueError(f"batch_norm2d: expected 4-D input, got {x.shape}")
    c = x.shape[1]
    if weight.shape != (c,) or bias.shape != (c,):
        raise ValueError("batch_norm2d: weight/bias do not match channel count")
    axes = (0, 2, 3)
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = xhat * weight.data[None, :, None, None] + bias.data[None, :, None, None]

    def grad_fn(g):
        gw = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        if training:
            gx = (weight.data * inv_std)[None, :, None, None] / m * (
                m * g - gb[None, :, None, None] - xhat * gw[None, :, None, None]
            )
        else:
            gx = g * (weight.data * inv_std)[None, :, None, None]
        return gx.astype(x.dtype), gw, gb

    return _make(out_data.astype(x.dtype), (x, weight, bias), grad_fn, "batch_norm2d")
