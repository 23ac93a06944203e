"""Dense float64 tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array and remembers the operation that
produced it. Calling :meth:`Tensor.backward` on a scalar walks the recorded
graph once in reverse topological order and fills ``grad`` on every tensor
created with ``requires_grad=True``.

Ops accept either a single image ``[C, H, W]`` or a batch ``[N, C, H, W]``
where it matters (convolution, pooling, upsampling, channel softmax).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "GraphError",
    "NonFiniteError",
    "conv2d",
    "global_average_pool",
    "bilinear_upsample",
    "bilinear_weights",
    "relu",
    "sigmoid",
    "softmax",
    "add",
    "mul",
    "linear",
    "sum",
    "mean",
    "masked_nll",
    "reverse_mode_gradients",
    "gradient_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (e.g. backward twice)."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


def _dtype_of(data):
    # extended precision passes through (used by gradient_check); all else is float64
    return np.longdouble if getattr(data, "dtype", None) == np.longdouble else np.float64


class Tensor:
    """N-d float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=_dtype_of(data))
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        reverse_mode_gradients(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and wire up its backward rule."""
    if not np.all(np.isfinite(data)) and all(np.all(np.isfinite(p.data)) for p in parents):
        raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out._op = op
    tracked = tuple(p for p in parents if p.requires_grad)
    out.requires_grad = bool(tracked)
    if tracked:
        out._parents = tuple(parents)

        def _bw(g: np.ndarray) -> None:
            grads = backward(g)
            for p, pg in zip(parents, grads):
                if p.requires_grad and pg is not None:
                    p.grad = pg if p.grad is None else p.grad + pg

        out._backward = _bw
    else:
        out._parents = ()
        out._backward = None
    return out


class Graph:
    """Topologically ordered record of the ops that produced a scalar loss.

    ``nodes`` lists every tensor requiring grad, inputs before consumers.
    """

    def __init__(self, root: Tensor):
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {root.shape}")
        if root._backward is None:
            raise GraphError("no recorded forward pass leads to this tensor")
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.root = root
        self.nodes = order

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]

    def backward(self) -> None:
        if self.root._consumed:
            raise GraphError("backward already ran for this forward pass")
        for n in self.nodes:
            if not n.is_leaf:
                n.grad = None
        self.root.grad = np.ones_like(self.root.data)
        for n in reversed(self.nodes):
            if n._backward is not None and n.grad is not None:
                n._backward(n.grad)
        # intermediate buffers are not needed once the leaves are filled
        for n in self.nodes:
            if not n.is_leaf:
                n.grad = None
        self.root._consumed = True


def reverse_mode_gradients(loss: Tensor) -> list[Tensor]:
    """Accumulate d(loss)/d(leaf) into every leaf that requires grad.

    Returns the leaves that were reached. Leaf grads accumulate, so callers
    zero them between steps.
    """
    graph = Graph(loss)
    graph.backward()
    return graph.leaves


# --------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(a.data + b.data, (a, b), "add",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(a.data * b.data, (a, b), "mul",
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.result_type(z.dtype, np.float64))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    """Softmax along ``axis`` with max-subtraction."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), "softmax", bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _result(np.asarray(x.data.sum()), (x,), "sum",
                   lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(np.asarray(x.data.mean()), (x,), "mean",
                   lambda g: (np.full(x.shape, float(g) / n),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``[K]`` or ``[N, K]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data
        gw = np.outer(g, x.data) if g.ndim == 1 else g.T @ x.data
        if bias is None:
            return gx, gw
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gw, gb

    return _result(out, parents, "linear", bw)


# --------------------------------------------------------------------------
# spatial


def _batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op}: expected [C,H,W] or [N,C,H,W], got {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding."""
    xb, single = _batched(x, "conv2d")
    w = kernel.data
    if w.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be [Cout,Cin,kh,kw], got {kernel.shape}")
    n, cin, h, wd = xb.shape
    cout, kcin, kh, kw = w.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input {x.shape} has {cin} channels, kernel {kernel.shape} expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: stride must be >= 1 and pad >= 0 (stride={stride}, pad={pad})")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape} (pad={pad})")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    # channel-major im2col: rows (cin, kh, kw), columns (n, ho, wo)
    xp = xb.transpose(1, 0, 2, 3)
    if pad:
        xp = np.pad(xp, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((cin, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(cin * kh * kw, n * ho * wo)
    wflat = w.reshape(cout, -1)
    out = (wflat @ cols).reshape(cout, n, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        gb = g if not single else g[None]
        gc = np.ascontiguousarray(gb.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        gw = (gc @ cols.T).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (wflat.T @ gc).reshape(cin, kh, kw, n, ho, wo)
            gxp = np.zeros((cin, n, h + 2 * pad, wd + 2 * pad))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gx = np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3))
            if single:
                gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gc.sum(axis=1))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out[0] if single else out, parents, "conv2d", bw)


def global_average_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: ``[C,H,W] -> [C]`` or ``[N,C,H,W] -> [N,C]``."""
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"global_average_pool: expected [C,H,W] or [N,C,H,W], got {x.shape}")
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1))
    return _result(out, (x,), "gap",
                   lambda g: (np.broadcast_to(g[..., None, None] / (h * w), x.shape).copy(),))


def bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    """``[n_out, n_in]`` align-corners interpolation matrix along one axis."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - i0
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - frac
    m[rows, i0 + 1] += frac
    return m


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize of the last two axes to ``out_h x out_w``."""
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"bilinear_upsample: expected [C,h,w] or [N,C,h,w], got {x.shape}")
    h, w = x.shape[-2:]
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample: target {out_h}x{out_w} smaller than input {h}x{w}")
    ah = bilinear_weights(h, out_h)
    aw = bilinear_weights(w, out_w)
    out = np.matmul(np.matmul(ah, x.data), aw.T)
    return _result(out, (x,), "upsample", lambda g: (np.matmul(np.matmul(ah.T, g), aw),))


# --------------------------------------------------------------------------
# losses


def masked_nll(probs: Tensor, labels: np.ndarray, ignore_index: int = 255,
               eps: float = 1e-12) -> Tensor:
    """Mean of ``-log p[label]`` over pixels whose label is not ``ignore_index``.

    ``probs`` is ``[K, H, W]`` (or ``[N, K, H, W]`` with ``labels`` ``[N, H, W]``)
    and already normalised over ``K``. Probabilities are clamped at ``eps``.
    The mean runs over all labelled pixels of the whole input, so a batch
    counts as one image here; callers that want per-image normalisation
    call this once per image. With no labelled pixel the result is 0.
    """
    p = probs.data if probs.data.ndim == 4 else probs.data[None]
    lab = np.asarray(labels)
    lab = lab if lab.ndim == 3 else lab[None]
    if lab.shape != (p.shape[0],) + p.shape[2:]:
        raise ShapeError(f"masked_nll: labels {np.asarray(labels).shape} do not match scores {probs.shape}")
    valid = lab != ignore_index
    count = int(valid.sum())
    if count == 0:
        return _result(np.asarray(0.0), (probs,), "nll", lambda g: (np.zeros(probs.shape),))
    if lab[valid].max() >= p.shape[1]:
        raise ShapeError(f"masked_nll: label {int(lab[valid].max())} out of range for {p.shape[1]} classes")
    ni, yi, xi = np.nonzero(valid)
    ci = lab[valid].astype(int)
    picked = p[ni, ci, yi, xi]
    clamped = np.maximum(picked, eps)
    loss = -np.log(clamped).sum() / count

    def bw(g):
        gp = np.zeros_like(p)
        gp[ni, ci, yi, xi] = np.where(picked > eps, -float(g) / (count * picked), 0.0)
        return (gp if probs.data.ndim == 4 else gp[0],)

    return _result(np.asarray(loss), (probs,), "nll", bw)


# --------------------------------------------------------------------------
# numerical validation


def gradient_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                   n_checks: int = 64, seed: int = 0, floor: float = 1e-12,
                   extended: bool = True) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the graph from ``params`` and returns a scalar.
    ``n_checks`` entries are sampled uniformly across all parameters (all of
    them if there are fewer). The relative error of one entry is
    ``|a - n| / max(|a|, |n|, floor)``.

    The analytic side is always float64. With ``extended`` the
    finite-difference side runs in ``np.longdouble``: in float64 a loss of
    order 1 is only resolved to about ``1e-16 / eps``, which swamps
    gradient entries below ``1e-6``. Where ``longdouble`` is plain double
    this changes nothing.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    reverse_mode_gradients(loss)
    analytic = [p.grad.copy() for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = np.arange(total) if total <= n_checks else rng.choice(total, size=n_checks, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    originals = [p.data for p in params]
    ftype = np.longdouble if extended else np.float64
    step = ftype(eps)
    worst = 0.0
    try:
        for p in params:
            p.data = p.data.astype(ftype)
        for k in flat:
            pi = int(np.searchsorted(offsets, k, side="right") - 1)
            idx = np.unravel_index(int(k - offsets[pi]), params[pi].shape)
            p = params[pi]
            orig = p.data[idx]
            p.data[idx] = orig + step
            up = ftype(loss_fn().data)
            p.data[idx] = orig - step
            down = ftype(loss_fn().data)
            p.data[idx] = orig
            num = float((up - down) / (2 * step))
            a = float(analytic[pi][idx])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    finally:
        for p, data in zip(params, originals):
            p.data = data
    return worst
