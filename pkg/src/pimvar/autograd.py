"""Dense tensors and a small reverse-mode gradient engine.

Tensors wrap numpy arrays and double as graph nodes: each op returns a new
Tensor holding its forward value, references to its parents, and a backward
closure. Ops with nonstandard gradients (the quantize/perturb nodes) are
built through :func:`custom_op`, which is how straight-through rules are
attached. No broadcasting except bias-add; shapes are explicit everywhere.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "custom_op",
    "backward",
    "set_debug_checks",
    "debug_checks_enabled",
    "matmul",
    "transpose",
    "conv2d",
    "add_bias",
    "relu",
    "maxpool2d",
    "avgpool2d",
    "flatten",
    "softmax_cross_entropy",
    "add",
    "mul",
    "tsum",
    "im2col",
    "col2im",
]

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle finiteness checks on every op output (slow; for tests/debug)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class Tensor:
    """A dense array plus its slot in the computation graph.

    Leaves are built directly; interior nodes come out of the ops below.
    ``grad`` is populated on leaves with ``requires_grad`` by
    :func:`backward`. Data is immutable by convention once an op has
    consumed it.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("Tensor(data) expects an array-like, not a Tensor")
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return f"Tensor(op={self._op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def custom_op(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    """Build a graph node with an explicit gradient rule.

    ``backward_fn(upstream)`` must return one gradient array per parent (or
    None for parents that do not need one). The node only retains the graph
    if some parent requires grad, so inference passes stay closure-free.
    """
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op {op!r}")
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out.grad = None
    out.name = None
    out._op = op
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Visits each node once in reverse topological order; a node's gradient is
    the sum over its consumers. Gradients accumulate into ``.grad`` of
    requires-grad leaves, so zero them between steps.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    # Iterative topological sort (post-order DFS).
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        elif node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def tsum(x) -> Tensor:
    """Sum of all elements, as a scalar node."""
    x = _as_tensor(x)
    shape, dtype = x.data.shape, x.data.dtype
    return custom_op(
        np.asarray(x.data.sum(), dtype=dtype),
        (x,),
        lambda g: (np.full(shape, g, dtype=dtype),),
        "sum",
    )


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data
    return custom_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got shape {x.data.shape}")
    return custom_op(x.data.T, (x,), lambda g: (g.T,), "transpose")


def add_bias(x, b) -> Tensor:
    """Bias add: the one sanctioned broadcast. (N,K)+(K,) or (N,F,H,W)+(F,)."""
    x, b = _as_tensor(x), _as_tensor(b)
    xd, bd = x.data, b.data
    if bd.ndim != 1:
        raise ShapeError(f"add_bias: bias must be 1-D, got shape {bd.shape}")
    if xd.ndim == 2:
        if xd.shape[1] != bd.shape[0]:
            raise ShapeError(f"add_bias: shape mismatch {xd.shape} + {bd.shape}")
        return custom_op(xd + bd, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")
    if xd.ndim == 4:
        if xd.shape[1] != bd.shape[0]:
            raise ShapeError(f"add_bias: shape mismatch {xd.shape} + {bd.shape}")
        return custom_op(
            xd + bd.reshape(1, -1, 1, 1),
            (x, b),
            lambda g: (g, g.sum(axis=(0, 2, 3))),
            "add_bias",
        )
    raise ShapeError(f"add_bias: expected 2-D or 4-D input, got shape {xd.shape}")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return custom_op(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),), "relu")


def flatten(x) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"flatten: expected batched input, got shape {x.data.shape}")
    shape = x.data.shape
    out = x.data.reshape(shape[0], -1)
    return custom_op(out, (x,), lambda g: (g.reshape(shape),), "flatten")


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold (N,C,H,W) into patch rows of shape (N*OH*OW, C*kh*kw).

    Row p holds the receptive field of output position p in row-major
    (n, oh, ow) order, which is the layout conv2d's matmul consumes.
    """
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c, oh, ow, kh, kw), zero-copy view
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def col2im(cols: np.ndarray, xshape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back to (N,C,H,W)."""
    n, c, h, w = xshape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w] if pad else xp


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (N,C,H,W) with filters (F,C,kh,kw), via im2col+matmul.

    No flipping of the kernel (the usual deep-learning convention). Output is
    (N, F, OH, OW); bias is deliberately separate (see add_bias) so the raw
    MVM result stays accessible for output correction.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {xd.shape} (x) and {wd.shape} (w)")
    n, c, h, wdt = xd.shape
    f, _, kh, kw = wd.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wdt + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {wd.shape} does not fit input {xd.shape} (stride={stride}, pad={pad})")

    cols = im2col(xd, kh, kw, stride, pad)          # (N*OH*OW, C*kh*kw)
    wmat = wd.reshape(f, -1)                        # (F, C*kh*kw)
    out = (cols @ wmat.T).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    def _backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)
        dw = (g2.T @ cols).reshape(wd.shape)
        dcols = g2 @ wmat
        dx = col2im(dcols, xd.shape, kh, kw, stride, pad)
        return (dx, dw)

    return custom_op(out, (x, w), _backward, "conv2d")


def _pool_prep(x: Tensor, size: int, stride, op: str):
    if stride is None:
        stride = size
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"{op}: expected (N,C,H,W) input, got shape {xd.shape}")
    if stride != size:
        raise ShapeError(f"{op}: only stride == window supported (got size={size}, stride={stride})")
    n, c, h, w = xd.shape
    if h % size or w % size:
        raise ShapeError(f"{op}: input {xd.shape} not divisible by window {size}")
    return xd, n, c, h // size, w // size


def maxpool2d(x, size: int, stride: int | None = None) -> Tensor:
    x = _as_tensor(x)
    xd, n, c, oh, ow = _pool_prep(x, size, stride, "maxpool2d")
    s = size
    if not x.requires_grad:
        # inference fast path: same values, no window copy or argmax
        out = xd.reshape(n, c, oh, s, ow, s).max(axis=(3, 5))
        return custom_op(out, (x,), None, "maxpool2d")
    windows = xd.reshape(n, c, oh, s, ow, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, s * s)
    idx = windows.argmax(axis=-1)  # first max wins: deterministic tie-break
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        dwin = np.zeros_like(windows)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, oh, ow, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(xd.shape)
        return (dx,)

    return custom_op(out, (x,), _backward, "maxpool2d")


def avgpool2d(x, size: int, stride: int | None = None) -> Tensor:
    x = _as_tensor(x)
    xd, n, c, oh, ow = _pool_prep(x, size, stride, "avgpool2d")
    s = size
    out = xd.reshape(n, c, oh, s, ow, s).mean(axis=(3, 5))

    def _backward(g):
        dx = np.repeat(np.repeat(g, s, axis=2), s, axis=3) / (s * s)
        return (dx,)

    return custom_op(out, (x,), _backward, "avgpool2d")


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of (N,K) logits against integer labels (N,).

    Numerically stable log-sum-exp; the gradient (softmax - onehot)/N sums
    to zero over classes for every sample.
    """
    logits = _as_tensor(logits)
    ld = logits.data
    labels = np.asarray(labels)
    if ld.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got shape {ld.shape}")
    if labels.shape != (ld.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: labels shape {labels.shape} does not match logits {ld.shape}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError("softmax_cross_entropy: labels must be integers")
    n, k = ld.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"softmax_cross_entropy: label outside [0, {k})")

    shifted = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = np.asarray((lse - shifted[np.arange(n), labels]).mean(), dtype=ld.dtype)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)

    def _backward(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return custom_op(loss, (logits,), _backward, "softmax_cross_entropy")
