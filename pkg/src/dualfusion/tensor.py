"""Dense float64 tensors with reverse-mode autodiff, plus a deterministic RNG.

Everything runs in double precision on numpy arrays. Ops are pure (inputs are
never mutated) and every forward result is checked for NaN/Inf. Gradients are
accumulated on tracked leaf tensors by `backward`.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (sampling, frozen encoders)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data, op):
    # one reduction pass: any NaN/Inf drives the sum non-finite, and finite
    # float64 payloads at this scale cannot overflow the accumulator
    if not math.isfinite(float(np.add.reduce(data, axis=None, dtype=np.float64))):
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "tensor construction")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are allowed on either side
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(scale(self, -1.0), -other) if np.isscalar(other) else sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, backward_fn):
    """Wrap an op result; attach the tape node when tracking is on."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def backward(loss):
    """Accumulate d(loss)/d(leaf) into .grad of every tracked leaf.

    Repeated calls keep accumulating until grads are cleared.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            # tracked leaf: persist the accumulated gradient
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in node._backward_fn(g):
            if not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# elementwise ops


def _binary_shapes(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a, b):
    a = as_tensor(a)
    if np.isscalar(b):
        s = float(b)
        return _make(a.data + s, "add", (a,), lambda g: [(a, g)])
    b = as_tensor(b)
    _binary_shapes(a, b, "add")
    return _make(a.data + b.data, "add", (a, b), lambda g: [(a, g), (b, g)])


def sub(a, b):
    a = as_tensor(a)
    if np.isscalar(b):
        s = float(b)
        return _make(a.data - s, "sub", (a,), lambda g: [(a, g)])
    b = as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b), lambda g: [(a, g), (b, -g)])


def mul(a, b):
    a = as_tensor(a)
    if np.isscalar(b):
        return scale(a, b)
    b = as_tensor(b)
    _binary_shapes(a, b, "mul")
    return _make(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: [(a, g * b.data), (b, g * a.data)],
    )


def scale(a, s):
    a = as_tensor(a)
    s = float(s)
    if s == 1.0:
        # identity case: reuse the buffer, keep grad flow
        return _make(a.data, "scale", (a,), lambda g: [(a, g)])
    return _make(a.data * s, "scale", (a,), lambda g: [(a, g * s)])


# ---------------------------------------------------------------------------
# linear ops


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: nonconforming shapes {a.data.shape} @ {b.data.shape}")
    return _make(
        a.data @ b.data,
        "matmul",
        (a, b),
        lambda g: [(a, g @ b.data.T), (b, a.data.T @ g)],
    )


def add_bias(x, b):
    """(N, D) + (D,) broadcast over rows."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.data.shape != (x.data.shape[1],):
        raise ShapeError(f"add_bias: shapes {x.data.shape} and {b.data.shape}")
    return _make(
        x.data + b.data,
        "add_bias",
        (x, b),
        lambda g: [(x, g), (b, g.sum(axis=0))],
    )


def tile_rows(v, n):
    """(F,) -> (n, F); gradient sums over rows."""
    v = as_tensor(v)
    if v.data.ndim != 1:
        raise ShapeError(f"tile_rows expects a vector, got shape {v.data.shape}")
    return _make(
        np.broadcast_to(v.data, (int(n),) + v.data.shape).copy(),
        "tile_rows",
        (v,),
        lambda g: [(v, g.sum(axis=0))],
    )


def _conv_input(x, op):
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects NCHW input, got shape {x.data.shape}")


def _to_rows(x):
    """(N,C,H,W) -> (N*H*W, C) contiguous."""
    n, c, h, w = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1).reshape(n * h * w, c))


def _from_rows(rows, n, h, w):
    """(N*H*W, O) -> (N,O,H,W) contiguous."""
    o = rows.shape[1]
    return np.ascontiguousarray(rows.reshape(n, h, w, o).transpose(0, 3, 1, 2))


def conv2d_k1(x, w, b=None):
    """Pointwise convolution: x (N,C,H,W), w (O,C), optional bias (O,)."""
    x, w = as_tensor(x), as_tensor(w)
    _conv_input(x, "conv2d_k1")
    if w.data.ndim != 2 or w.data.shape[1] != x.data.shape[1]:
        raise ShapeError(f"conv2d_k1: weight {w.data.shape} against input {x.data.shape}")
    n, c, h, wd = x.data.shape
    rows = _to_rows(x.data)
    out_rows = rows @ w.data.T
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (w.data.shape[0],):
            raise ShapeError(f"conv2d_k1: bias shape {b.data.shape}")
        out_rows += b.data
    out = _from_rows(out_rows, n, h, wd)
    parents = [x, w] + ([b] if b is not None else [])

    def bw(g):
        g_rows = _to_rows(g)
        grads = [
            (x, _from_rows(g_rows @ w.data, n, h, wd)),
            (w, g_rows.T @ rows),
        ]
        if b is not None:
            grads.append((b, g_rows.sum(axis=0)))
        return grads

    return _make(out, "conv2d_k1", parents, bw)


def _im2col3(xp, h, w):
    """Padded (N,C,H+2,W+2) -> (N*H*W, C*9) patch matrix."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        xp.shape[0] * h * w, xp.shape[1] * 9
    )


def conv2d_k3_same(x, w, b=None):
    """3x3 same convolution via zero padding: x (N,C,H,W), w (O,C,3,3).

    Forward is one im2col matrix product; the patch matrix stays on the tape
    for the weight gradient, and the input gradient runs as nine small matrix
    products accumulated in a padded NHWC scratch buffer.
    """
    x, w = as_tensor(x), as_tensor(w)
    _conv_input(x, "conv2d_k3_same")
    if w.data.ndim != 4 or w.data.shape[1:] != (x.data.shape[1], 3, 3):
        raise ShapeError(f"conv2d_k3_same: weight {w.data.shape} against input {x.data.shape}")
    n, c, h, wd = x.data.shape
    o = w.data.shape[0]
    xp = np.zeros((n, c, h + 2, wd + 2), dtype=np.float64)
    xp[:, :, 1 : h + 1, 1 : wd + 1] = x.data
    w_mat = w.data.reshape(o, c * 9)
    cols = _im2col3(xp, h, wd)
    out_rows = cols @ w_mat.T
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (o,):
            raise ShapeError(f"conv2d_k3_same: bias shape {b.data.shape}")
        out_rows += b.data
    out = _from_rows(out_rows, n, h, wd)
    parents = [x, w] + ([b] if b is not None else [])

    def bw(g):
        g_rows = _to_rows(g)
        gw = (g_rows.T @ cols).reshape(o, c, 3, 3)
        gxp = np.zeros((n, h + 2, wd + 2, c), dtype=np.float64)
        w3 = w.data.reshape(o, c, 9)
        for k in range(9):
            di, dj = divmod(k, 3)
            gxp[:, di : di + h, dj : dj + wd, :] += (g_rows @ w3[:, :, k]).reshape(n, h, wd, c)
        gx = np.ascontiguousarray(gxp[:, 1 : h + 1, 1 : wd + 1, :].transpose(0, 3, 1, 2))
        grads = [(x, gx), (w, gw)]
        if b is not None:
            grads.append((b, g_rows.sum(axis=0)))
        return grads

    return _make(out, "conv2d_k3_same", parents, bw)


def downsample2x(x):
    """2x2 mean pooling; spatial extents must be even."""
    x = as_tensor(x)
    _conv_input(x, "downsample2x")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample2x requires even extents, got {x.data.shape}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return [(x, gx)]

    return _make(out, "downsample2x", (x,), bw)


def upsample2x_nearest(x):
    x = as_tensor(x)
    _conv_input(x, "upsample2x_nearest")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        n, c, h2, w2 = g.shape
        return [(x, g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))]

    return _make(out, "upsample2x_nearest", (x,), bw)


# ---------------------------------------------------------------------------
# reductions


def _spatial(x, op):
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"{op} expects (C,H,W) or (N,C,H,W), got {x.data.shape}")
    if x.data.shape[-1] * x.data.shape[-2] == 0:
        raise ShapeError(f"{op}: empty reduction domain {x.data.shape}")


def channel_mean(x):
    """Per-channel mean over the spatial axes."""
    x = as_tensor(x)
    _spatial(x, "channel_mean")
    hw = x.data.shape[-1] * x.data.shape[-2]
    out = x.data.mean(axis=(-2, -1))

    def bw(g):
        return [(x, np.broadcast_to(g[..., None, None] / hw, x.data.shape).copy())]

    return _make(out, "channel_mean", (x,), bw)


def channel_var(x):
    """Per-channel population variance over the spatial axes."""
    x = as_tensor(x)
    _spatial(x, "channel_var")
    hw = x.data.shape[-1] * x.data.shape[-2]
    mu = x.data.mean(axis=(-2, -1), keepdims=True)
    centered = x.data - mu
    out = (centered * centered).mean(axis=(-2, -1))

    def bw(g):
        return [(x, 2.0 / hw * centered * g[..., None, None])]

    return _make(out, "channel_var", (x,), bw)


def tsum(x):
    x = as_tensor(x)
    return _make(
        np.asarray(x.data.sum()),
        "sum",
        (x,),
        lambda g: [(x, np.broadcast_to(g, x.data.shape).copy())],
    )


def tmean(x):
    x = as_tensor(x)
    n = x.data.size
    if n == 0:
        raise ShapeError("mean: empty reduction domain")
    return _make(
        np.asarray(x.data.mean()),
        "mean",
        (x,),
        lambda g: [(x, np.broadcast_to(g / n, x.data.shape).copy())],
    )


def concat_channels(parts):
    """Concatenate along the channel axis of (...,C,H,W) tensors, order preserved."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    nd = parts[0].data.ndim
    if nd not in (3, 4):
        raise ShapeError(f"concat_channels expects (C,H,W) or (N,C,H,W), got {parts[0].data.shape}")
    ref = parts[0].data.shape
    for p in parts[1:]:
        s = p.data.shape
        if p.data.ndim != nd or s[:-3] != ref[:-3] or s[-2:] != ref[-2:]:
            raise ShapeError(f"concat_channels: non-channel extents differ, {ref} vs {s}")
    axis = nd - 3
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        slicer = [slice(None)] * nd
        grads = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            slicer[axis] = slice(lo, hi)
            grads.append((p, g[tuple(slicer)]))
        return grads

    return _make(out, "concat_channels", tuple(parts), bw)


# ---------------------------------------------------------------------------
# activations


def _sigmoid(x):
    with np.errstate(over="ignore"):
        z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def silu(x):
    x = as_tensor(x)
    sig = _sigmoid(x.data)

    def bw(g):
        return [(x, g * sig * (1.0 + x.data * (1.0 - sig)))]

    return _make(x.data * sig, "silu", (x,), bw)


def normalize_channels(x, eps=1e-5):
    """Zero-mean unit-variance normalization per group.

    Groups: each channel's spatial map for (N,C,H,W)/(C,H,W), each row for
    (N,D), the whole vector for (D,). Population variance, epsilon guard.
    """
    x = as_tensor(x)
    nd = x.data.ndim
    if nd in (3, 4):
        axes = (-2, -1)
        group = x.data.shape[-1] * x.data.shape[-2]
    elif nd == 2:
        axes = (-1,)
        group = x.data.shape[-1]
    elif nd == 1:
        axes = (-1,)
        group = x.data.shape[-1]
    else:
        raise ShapeError(f"normalize_channels: unsupported rank {nd}")
    if group < 2:
        raise ShapeError(f"normalize_channels needs >= 2 elements per group, got {group}")
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * y).mean(axis=axes, keepdims=True)
        return [(x, inv * (g - gm - y * gym))]

    return _make(y, "normalize_channels", (x,), bw)


def scale_channels(h, s):
    """h (N,C,H,W) scaled per channel by s (N,C)."""
    h, s = as_tensor(h), as_tensor(s)
    if h.data.ndim != 4 or s.data.shape != h.data.shape[:2]:
        raise ShapeError(f"scale_channels: shapes {h.data.shape} and {s.data.shape}")
    sb = s.data[:, :, None, None]

    def bw(g):
        return [(h, g * sb), (s, (g * h.data).sum(axis=(2, 3)))]

    return _make(h.data * sb, "scale_channels", (h, s), bw)


def shift_channels(h, s):
    """h (N,C,H,W) shifted per channel by s (N,C)."""
    h, s = as_tensor(h), as_tensor(s)
    if h.data.ndim != 4 or s.data.shape != h.data.shape[:2]:
        raise ShapeError(f"shift_channels: shapes {h.data.shape} and {s.data.shape}")

    def bw(g):
        return [(h, g), (s, g.sum(axis=(2, 3)))]

    return _make(h.data + s.data[:, :, None, None], "shift_channels", (h, s), bw)


# ---------------------------------------------------------------------------
# deterministic random generation


class Rng:
    """Counter-based random stream with a documented scalar pipeline.

    Bits come from Philox-4x64 keyed by the 64-bit seed (counter starts at
    zero). Uniforms take the top 53 bits of each 64-bit word, scaled by 2^-53,
    giving values in [0, 1). Normals are Box-Muller pairs:

        r = sqrt(-2 ln(1 - u1)),  z = (r cos(2 pi u2), r sin(2 pi u2))

    Identical seed + identical call sequence reproduces the same scalars on
    every platform.
    """

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bits = np.random.Philox(key=np.array([self.seed, 0], dtype=np.uint64))
        self.draws = 0  # 64-bit words consumed

    def _raw(self, n):
        self.draws += int(n)
        return self._bits.random_raw(int(n))

    def uniform(self, shape=()):
        """Uniforms in [0, 1) with 53-bit resolution."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape) if shape else float(u[0])

    def normal(self, shape=()):
        """Standard normals via Box-Muller over paired uniforms."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        m = (n + 1) // 2
        u = (self._raw(2 * m) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        u1, u2 = u[:m], u[m:]
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape) if shape else float(z[0])

    def integers(self, low, high, shape=()):
        """Uniform integers in [low, high) as floor(low + u * (high - low))."""
        u = self.uniform(shape)
        out = np.floor(low + u * (high - low)).astype(np.int64)
        return out if isinstance(u, np.ndarray) else int(out)

    def normal_tensor(self, shape, requires_grad=False):
        return Tensor(self.normal(shape), requires_grad=requires_grad)
