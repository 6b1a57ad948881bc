"""Reverse-mode automatic differentiation over dense numpy tensors.

A deliberately small engine: exactly the operations the acquisition ->
beamforming -> reconstruction pipeline needs, on float64 / complex128
arrays, with a plain tape-free graph of ``Node`` objects.

Conventions
-----------
* Node values are numpy arrays (float64 or complex128), row-major.
* The gradient of a complex node is stored packed as ``dL/dRe + 1j*dL/dIm``:
  two real partial derivatives per entry, no Wirtinger calculus.
* ``backward(root)`` requires a real scalar root produced by an op. It first
  clears every gradient in the root's graph, so repeated calls on the same
  graph are bit-identical.
* Subgradient choices at kinks (documented, deterministic): relu'(0) = 0,
  sqrt'(0) = 0, grad of ``magnitude`` at z = 0 is 0, grad of ``l2_norm`` at
  the origin is 0, and ``clamp`` passes gradient only strictly inside its
  interval.
* Values are validated (finite, supported dtype) when entering the graph via
  ``tensor``/``leaf``/``constant``; op outputs are not re-checked.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""


class GraphError(RuntimeError):
    """Backward called on an unsuitable node."""


def tensor(data, dtype=None) -> np.ndarray:
    """Validate and normalize external data to float64 or complex128."""
    arr = np.asarray(data)
    if dtype is None:
        dtype = np.complex128 if np.iscomplexobj(arr) else np.float64
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor: non-finite entries rejected")
    return arr


class Node:
    """One vertex of the computation graph: cached value, parents, grad slot."""

    __slots__ = ("value", "op", "parents", "_vjp", "grad", "learnable", "name")

    def __init__(self, value, op="leaf", parents=(), vjp=None,
                 learnable=False, name=None):
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self._vjp = vjp
        self.grad = None
        self.learnable = learnable
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_complex(self):
        return np.iscomplexobj(self.value)

    def __repr__(self):
        tag = self.name or self.op
        return f"Node({tag}, shape={self.value.shape}, dtype={self.value.dtype})"

    # arithmetic sugar; every overload routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def leaf(data, learnable=False, name=None) -> Node:
    return Node(tensor(data), op="leaf", learnable=learnable, name=name)


def param(data, name=None) -> Node:
    return leaf(data, learnable=True, name=name)


def constant(x) -> Node:
    """Lift a raw array/scalar to a non-learnable leaf (Nodes pass through)."""
    if isinstance(x, Node):
        return x
    return leaf(x)


# ---------------------------------------------------------------------------
# graph plumbing

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over the axes numpy broadcasting introduced or stretched."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _cast_like(parent: Node, g: np.ndarray) -> np.ndarray:
    """Match the gradient dtype kind to the parent (pair-packed for complex)."""
    if parent.is_complex:
        return np.asarray(g, dtype=np.complex128)
    if np.iscomplexobj(g):
        return np.ascontiguousarray(g.real, dtype=np.float64)
    return np.asarray(g, dtype=np.float64)


def _grad_to(parent: Node, g: np.ndarray) -> np.ndarray:
    return _cast_like(parent, _unbroadcast(g, parent.value.shape))


def _require_real(op: str, *nodes: Node):
    for n in nodes:
        if n.is_complex:
            raise ShapeError(f"{op}: real operand required, got complex "
                             f"with shape {n.value.shape}")


def backward(root: Node) -> dict:
    """Reverse sweep from a real scalar root.

    Fills ``.grad`` on every node of the root's graph and returns a map of the
    learnable leaves it reached to their gradients. Deterministic: the same
    graph always yields bit-identical gradients.
    """
    if root.op == "leaf":
        raise GraphError("backward on detached graph: root is a leaf, "
                         "not the result of an op")
    if root.value.size != 1 or np.iscomplexobj(root.value):
        raise GraphError(f"backward root must be a real scalar, got shape "
                         f"{root.value.shape} dtype {root.value.dtype}")

    topo, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))

    for n in topo:
        n.grad = None
    root.grad = np.ones_like(root.value, dtype=np.float64)

    for node in reversed(topo):
        if node.grad is None or node._vjp is None:
            continue
        pgrads = node._vjp(node.grad)
        for parent, pg in zip(node.parents, pgrads):
            if pg is None:
                continue
            if pg.shape != parent.value.shape:
                raise GraphError(f"{node.op}: gradient shape {pg.shape} does "
                                 f"not match value shape {parent.value.shape}")
            parent.grad = pg if parent.grad is None else parent.grad + pg

    out = {}
    for n in topo:
        if n.learnable:
            if n.grad is None:
                n.grad = np.zeros_like(n.value)
            out[n] = n.grad
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic (broadcasting, mixed real/complex)

def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeError(f"{op}: operand shapes {a.value.shape} and "
                         f"{b.value.shape} do not broadcast") from None


def add(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_broadcast("add", a, b)
    val = a.value + b.value

    def vjp(g):
        return _grad_to(a, g), _grad_to(b, g)

    return Node(val, "add", (a, b), vjp)


def sub(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_broadcast("sub", a, b)
    val = a.value - b.value

    def vjp(g):
        return _grad_to(a, g), _grad_to(b, -g)

    return Node(val, "sub", (a, b), vjp)


def neg(a) -> Node:
    a = constant(a)

    def vjp(g):
        return (_grad_to(a, -g),)

    return Node(-a.value, "neg", (a,), vjp)


def mul(a, b) -> Node:
    """Elementwise product. For complex operands the gradient of each side is
    ``conj(other) * g`` under the packed-pair convention."""
    a, b = constant(a), constant(b)
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value
    val = av * bv

    def vjp(g):
        return _grad_to(a, np.conj(bv) * g), _grad_to(b, np.conj(av) * g)

    return Node(val, "mul", (a, b), vjp)


def div(a, b) -> Node:
    """Elementwise quotient; the denominator must be real."""
    a, b = constant(a), constant(b)
    _require_real("div", b)
    _check_broadcast("div", a, b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise ValueError("div: zero denominator")
    val = av / bv

    def vjp(g):
        ga = g / bv
        gb = -(np.conj(av) * g).real / (bv * bv)
        return _grad_to(a, ga), _grad_to(b, gb)

    return Node(val, "div", (a, b), vjp)


# ---------------------------------------------------------------------------
# contractions

def matmul(a, b) -> Node:
    """Matrix product, 2-D @ 2-D or 2-D @ 1-D, real or complex."""
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim not in (1, 2) or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: operand shapes {av.shape} and {bv.shape} "
                         "do not conform")
    val = av @ bv

    def vjp(g):
        if bv.ndim == 1:
            ga = np.outer(g, np.conj(bv))
            gb = np.conj(av).T @ g
        else:
            ga = g @ np.conj(bv).T
            gb = np.conj(av).T @ g
        return _grad_to(a, ga), _grad_to(b, gb)

    return Node(val, "matmul", (a, b), vjp)


def _contract(spec: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """np.einsum with hand-dispatched fast paths for the beamformer patterns
    (np.einsum refuses to use BLAS for them; batched matmul is ~8x faster)."""
    if spec == "bkm,kmq->bkq":
        return np.matmul(x.transpose(1, 0, 2), y).transpose(1, 0, 2)
    if spec == "bkq,kmq->bkm":
        return np.matmul(x.transpose(1, 0, 2),
                         y.transpose(0, 2, 1)).transpose(1, 0, 2)
    if spec == "bkm,bkq->kmq":
        return np.matmul(x.transpose(1, 2, 0), y.transpose(1, 0, 2))
    if spec == "km,kmq->kq":
        return np.matmul(x[:, None, :], y)[:, 0, :]
    if spec == "kq,kmq->km":
        return np.matmul(x[:, None, :], y.transpose(0, 2, 1))[:, 0, :]
    if spec == "km,kq->kmq":
        return x[:, :, None] * y[:, None, :]
    return np.einsum(spec, x, y, optimize=True)


def einsum2(spec: str, a, b) -> Node:
    """Two-operand einsum (no repeated index within an operand, no ellipsis).

    Generalizes matmul and multiply-then-sum contractions; gradients are the
    transposed einsums with the non-differentiated operand conjugated.
    """
    a, b = constant(a), constant(b)
    try:
        ins, zout = spec.replace(" ", "").split("->")
        xs, ys = ins.split(",")
    except ValueError:
        raise ShapeError(f"einsum2: bad spec {spec!r}") from None
    if len(set(xs)) != len(xs) or len(set(ys)) != len(ys):
        raise ShapeError(f"einsum2: repeated index within an operand in {spec!r}")
    if not (set(xs) <= set(zout) | set(ys) and set(ys) <= set(zout) | set(xs)):
        raise ShapeError(f"einsum2: dangling index in {spec!r}")
    if len(xs) != a.value.ndim or len(ys) != b.value.ndim:
        raise ShapeError(f"einsum2: spec {spec!r} does not match operand "
                         f"shapes {a.value.shape} and {b.value.shape}")
    av, bv = a.value, b.value
    val = _contract(f"{xs},{ys}->{zout}", av, bv)

    def vjp(g):
        ga = _contract(f"{zout},{ys}->{xs}", g, np.conj(bv))
        gb = _contract(f"{xs},{zout}->{ys}", np.conj(av), g)
        return _grad_to(a, ga), _grad_to(b, gb)

    return Node(val, "einsum2", (a, b), vjp)


# ---------------------------------------------------------------------------
# reductions and reshaping

def tsum(a, axis=None, keepdims=False) -> Node:
    a = constant(a)
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (_grad_to(a, np.broadcast_to(g, a.value.shape)),)

    return Node(np.asarray(val), "sum", (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Node:
    a = constant(a)
    val = a.value.mean(axis=axis, keepdims=keepdims)
    count = a.value.size if axis is None else a.value.shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (_grad_to(a, np.broadcast_to(g / count, a.value.shape)),)

    return Node(np.asarray(val), "mean", (a,), vjp)


def max_reduce(a, axes: tuple, keepdims=True) -> Node:
    """Max over trailing axes; subgradient routed to the first max entry."""
    a = constant(a)
    _require_real("max_reduce", a)
    av = a.value
    axes = tuple(sorted(ax % av.ndim for ax in axes))
    if axes != tuple(range(av.ndim - len(axes), av.ndim)):
        raise ShapeError(f"max_reduce: axes {axes} must be the trailing axes "
                         f"of shape {av.shape}")
    val = av.max(axis=axes, keepdims=keepdims)
    lead = av.shape[:av.ndim - len(axes)]
    flat = av.reshape(lead + (-1,))
    hit = flat == flat.max(axis=-1, keepdims=True)
    first = hit & (np.cumsum(hit, axis=-1) == 1)
    mask = first.reshape(av.shape).astype(np.float64)

    def vjp(g):
        if not keepdims:
            g = g.reshape(lead + (1,) * len(axes))
        return (_grad_to(a, mask * g),)

    return Node(val, "max_reduce", (a,), vjp)


def reshape(a, shape) -> Node:
    a = constant(a)
    val = a.value.reshape(shape)

    def vjp(g):
        return (_grad_to(a, g.reshape(a.value.shape)),)

    return Node(val, "reshape", (a,), vjp)


def concat(nodes, axis=0) -> Node:
    nodes = [constant(n) for n in nodes]
    val = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    offs = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for n, lo, hi in zip(nodes, offs[:-1], offs[1:]):
            sl[axis] = slice(lo, hi)
            outs.append(_grad_to(n, g[tuple(sl)]))
        return tuple(outs)

    return Node(val, "concat", tuple(nodes), vjp)


def gather(a, indices, axis=0) -> Node:
    """Take along an axis with constant integer indices (duplicates allowed;
    the backward pass scatter-adds)."""
    a = constant(a)
    idx = np.asarray(indices, dtype=np.intp)
    val = np.take(a.value, idx, axis=axis)

    def vjp(g):
        out = np.zeros(a.value.shape,
                       dtype=np.complex128 if np.iscomplexobj(g) else np.float64)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (_grad_to(a, out),)

    return Node(val, "gather", (a,), vjp)


# ---------------------------------------------------------------------------
# real elementwise nonlinearities

def relu(a) -> Node:
    a = constant(a)
    _require_real("relu", a)
    mask = (a.value > 0).astype(np.float64)

    def vjp(g):
        return (_grad_to(a, g * mask),)

    return Node(np.maximum(a.value, 0.0), "relu", (a,), vjp)


def clamp(a, lo: float, hi: float) -> Node:
    a = constant(a)
    _require_real("clamp", a)
    mask = ((a.value > lo) & (a.value < hi)).astype(np.float64)

    def vjp(g):
        return (_grad_to(a, g * mask),)

    return Node(np.clip(a.value, lo, hi), "clamp", (a,), vjp)


def clamp_min(a, lo: float) -> Node:
    a = constant(a)
    _require_real("clamp_min", a)
    mask = (a.value > lo).astype(np.float64)

    def vjp(g):
        return (_grad_to(a, g * mask),)

    return Node(np.maximum(a.value, lo), "clamp_min", (a,), vjp)


def sigmoid(a) -> Node:
    a = constant(a)
    _require_real("sigmoid", a)
    x = a.value
    val = np.empty_like(x)
    pos = x >= 0
    val[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    val[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (_grad_to(a, g * val * (1.0 - val)),)

    return Node(val, "sigmoid", (a,), vjp)


def log(a) -> Node:
    a = constant(a)
    _require_real("log", a)
    if np.any(a.value <= 0):
        raise ValueError("log: non-positive input")
    val = np.log(a.value)

    def vjp(g):
        return (_grad_to(a, g / a.value),)

    return Node(val, "log", (a,), vjp)


def exp(a) -> Node:
    a = constant(a)
    _require_real("exp", a)
    val = np.exp(a.value)

    def vjp(g):
        return (_grad_to(a, g * val),)

    return Node(val, "exp", (a,), vjp)


def sqrt(a) -> Node:
    """Real square root; derivative at 0 is taken as 0 (subgradient choice)."""
    a = constant(a)
    _require_real("sqrt", a)
    if np.any(a.value < 0):
        raise ValueError("sqrt: negative input")
    val = np.sqrt(a.value)

    def vjp(g):
        d = np.divide(0.5, val, out=np.zeros_like(val), where=val > 0)
        return (_grad_to(a, g * d),)

    return Node(val, "sqrt", (a,), vjp)


def softmax(a, axis=-1) -> Node:
    a = constant(a)
    _require_real("softmax", a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * val).sum(axis=axis, keepdims=True)
        return (_grad_to(a, val * (g - inner)),)

    return Node(val, "softmax", (a,), vjp)


def normal_cdf(a) -> Node:
    """Standard normal CDF; derivative is the closed-form pdf."""
    a = constant(a)
    _require_real("normal_cdf", a)
    val = ndtr(a.value)
    pdf = np.exp(-0.5 * a.value ** 2) / np.sqrt(2.0 * np.pi)

    def vjp(g):
        return (_grad_to(a, g * pdf),)

    return Node(np.asarray(val), "normal_cdf", (a,), vjp)


# ---------------------------------------------------------------------------
# complex-aware ops

def magnitude(a) -> Node:
    """|z| elementwise; gradient at z = 0 is 0 by convention."""
    a = constant(a)
    val = np.abs(a.value)

    def vjp(g):
        ratio = np.divide(a.value, val,
                          out=np.zeros_like(a.value), where=val > 0)
        return (_grad_to(a, ratio * g),)

    return Node(val, "magnitude", (a,), vjp)


def real(a) -> Node:
    a = constant(a)
    val = np.ascontiguousarray(a.value.real)

    def vjp(g):
        return (_grad_to(a, g.astype(np.complex128) if a.is_complex else g),)

    return Node(val, "real", (a,), vjp)


def imag(a) -> Node:
    a = constant(a)
    if a.is_complex:
        val = np.ascontiguousarray(a.value.imag)
    else:
        val = np.zeros_like(a.value)

    def vjp(g):
        if a.is_complex:
            return (1j * g.astype(np.complex128),)
        return (np.zeros_like(a.value),)

    return Node(val, "imag", (a,), vjp)


def phasor(a) -> Node:
    """exp(1j * x) for real x: the unit-modulus steering phase builder."""
    a = constant(a)
    _require_real("phasor", a)
    val = np.exp(1j * a.value)

    def vjp(g):
        return (_grad_to(a, np.imag(np.conj(val) * g)),)

    return Node(val, "phasor", (a,), vjp)


def idft(a, axis=-1) -> Node:
    """Inverse DFT along one axis, 1/N convention; the adjoint under the
    packed-pair gradient convention is the forward DFT scaled by 1/N."""
    a = constant(a)
    n = a.value.shape[axis]
    val = np.fft.ifft(a.value, axis=axis)

    def vjp(g):
        return (_grad_to(a, np.fft.fft(g, axis=axis) / n),)

    return Node(val, "idft", (a,), vjp)


def l2_norm(a, axis=None) -> Node:
    """Euclidean norm of a real tensor, over all entries (axis=None) or over
    the given axes per remaining index; gradient at the origin is 0."""
    a = constant(a)
    _require_real("l2_norm", a)
    norm_keep = np.sqrt((a.value ** 2).sum(axis=axis, keepdims=True))
    val = np.squeeze(norm_keep, axis=axis) if axis is not None \
        else np.asarray(norm_keep.reshape(()))

    def vjp(g):
        gk = np.asarray(g).reshape(norm_keep.shape)
        ratio = np.divide(a.value, norm_keep,
                          out=np.zeros_like(a.value),
                          where=np.broadcast_to(norm_keep, a.value.shape) > 0)
        return (_grad_to(a, ratio * gk),)

    return Node(np.ascontiguousarray(val), "l2_norm", (a,), vjp)


# ---------------------------------------------------------------------------
# image ops (real, channels-first, batched: (B, C, H, W))

def _check_4d(op, a):
    if a.value.ndim != 4:
        raise ShapeError(f"{op}: expected (B, C, H, W), got {a.value.shape}")
    _require_real(op, a)


def pad_hw(a, pad_h: int, pad_w: int) -> Node:
    """Zero-pad the bottom/right of the trailing two axes."""
    a = constant(a)
    _check_4d("pad_hw", a)
    val = np.pad(a.value, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))
    h, w = a.value.shape[2:]

    def vjp(g):
        return (_grad_to(a, g[:, :, :h, :w]),)

    return Node(val, "pad_hw", (a,), vjp)


def crop_hw(a, h: int, w: int) -> Node:
    """Keep the top-left (h, w) window of the trailing two axes."""
    a = constant(a)
    _check_4d("crop_hw", a)
    H, W = a.value.shape[2:]
    if h > H or w > W:
        raise ShapeError(f"crop_hw: window ({h}, {w}) exceeds {a.value.shape}")
    val = a.value[:, :, :h, :w]

    def vjp(g):
        return (_grad_to(a, np.pad(g, ((0, 0), (0, 0), (0, H - h), (0, W - w)))),)

    return Node(np.ascontiguousarray(val), "crop_hw", (a,), vjp)


def avgpool2(a) -> Node:
    a = constant(a)
    _check_4d("avgpool2", a)
    B, C, H, W = a.value.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avgpool2: spatial dims must be even, got {(H, W)}")
    val = a.value.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        gg = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (_grad_to(a, gg),)

    return Node(val, "avgpool2", (a,), vjp)


def upsample2(a) -> Node:
    """Nearest-neighbour 2x upsampling of the trailing two axes."""
    a = constant(a)
    _check_4d("upsample2", a)
    val = np.repeat(np.repeat(a.value, 2, axis=2), 2, axis=3)

    def vjp(g):
        B, C, H2, W2 = g.shape
        gg = g.reshape(B, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5))
        return (_grad_to(a, gg),)

    return Node(val, "upsample2", (a,), vjp)


def conv2d(x, k, b) -> Node:
    """2-D cross-correlation, stride 1, zero 'same' padding, odd kernel.

    x: (B, C, H, W), k: (O, C, kh, kw), b: (O,) -> (B, O, H, W).
    Implemented as one wide GEMM plus shifted accumulation (fast for the few
    output channels this pipeline uses); the backward pass reuses the same
    layout.
    """
    x, k, b = constant(x), constant(k), constant(b)
    for n in (x, k, b):
        _require_real("conv2d", n)
    if x.value.ndim != 4 or k.value.ndim != 4 or b.value.ndim != 1:
        raise ShapeError(f"conv2d: operand shapes {x.value.shape}, "
                         f"{k.value.shape}, {b.value.shape} malformed")
    B, C, H, W = x.value.shape
    O, Ck, kh, kw = k.value.shape
    if Ck != C or b.value.shape[0] != O:
        raise ShapeError(f"conv2d: operand shapes {x.value.shape}, "
                         f"{k.value.shape}, {b.value.shape} do not conform")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be odd, got ({kh}, {kw})")
    ph, pw = kh // 2, kw // 2
    Hp, Wp = H + 2 * ph, W + 2 * pw

    xp = np.pad(x.value, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    xl = np.ascontiguousarray(np.moveaxis(xp, 1, 3)).reshape(-1, C)
    km = k.value.transpose(1, 0, 2, 3).reshape(C, O * kh * kw)
    yy = (xl @ km).reshape(B, Hp, Wp, O, kh, kw)
    out = np.zeros((B, H, W, O))
    for u in range(kh):
        for v in range(kw):
            out += yy[:, u:u + H, v:v + W, :, u, v]
    val = np.ascontiguousarray(np.moveaxis(out, 3, 1)) + b.value[None, :, None, None]

    def vjp(g):
        gm = np.moveaxis(g, 1, 3)  # (B, H, W, O)
        gg = np.zeros((B, Hp, Wp, O, kh, kw))
        for u in range(kh):
            for v in range(kw):
                gg[:, u:u + H, v:v + W, :, u, v] += gm
        gflat = gg.reshape(-1, O * kh * kw)
        gk = (xl.T @ gflat).reshape(C, O, kh, kw).transpose(1, 0, 2, 3)
        gxp = (gflat @ km.T).reshape(B, Hp, Wp, C)
        gx = np.moveaxis(gxp, 3, 1)[:, :, ph:ph + H, pw:pw + W]
        gb = g.sum(axis=(0, 2, 3))
        return (_grad_to(x, np.ascontiguousarray(gx)),
                _grad_to(k, gk), _grad_to(b, gb))

    return Node(val, "conv2d", (x, k, b), vjp)
