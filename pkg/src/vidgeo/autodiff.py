"""Reverse-mode automatic differentiation over numpy arrays.

Tensors are plain C-contiguous numpy float arrays (float64 unless float32 is
opted into via set_default_dtype). A DiffValue wraps one such array; while a
Graph is active every op that touches a grad-requiring input is recorded on
the tape, and backward() replays the tape once in reverse creation order so
gradient accumulation order is deterministic. The tape is freed after
backward; leaf gradients accumulate in .grad across graphs until zeroed.

Gradient ground truth for every primitive is central finite differences
(finite_diff_grad, h=1e-5); agreement is judged by max_rel_error, i.e.
max|a-f| / max(1, max|a|, max|f|).
"""

import threading

import numpy as np
from scipy import special as _sp

_DTYPE = np.float64
_TLS = threading.local()


def set_default_dtype(name):
    """Opt into 'float32' or back to 'float64' for newly created tensors."""
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ContractError("dtype must be float32 or float64, got %r" % (name,))
    _DTYPE = np.float32 if name == "float32" else np.float64


def default_dtype():
    return _DTYPE


def as_tensor(x, dtype=None):
    """Coerce to a C-contiguous float array of the default (or given) dtype.
    0-d input stays 0-d."""
    return np.asarray(x, dtype=dtype or _DTYPE, order="C")


class ContractError(ValueError):
    """A caller broke an operation's contract (shape, domain, or state)."""


class DimensionError(ContractError):
    """Shape mismatch; the message names both offending shapes."""


class Graph:
    """Tape of recorded operations. Use as a context manager around one
    forward+backward pass; nesting is not allowed."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if getattr(_TLS, "graph", None) is not None:
            raise ContractError("Graph contexts do not nest")
        _TLS.graph = self
        return self

    def __exit__(self, *exc):
        _TLS.graph = None
        return False


def active_graph():
    return getattr(_TLS, "graph", None)


class DiffValue:
    """A tensor plus autodiff bookkeeping. Leaves (parameters) carry
    requires_grad and accumulate into .grad; recorded intermediates carry a
    tape position and a backward closure."""

    __slots__ = ("value", "requires_grad", "grad", "node_id", "_parents", "_bwd")

    def __init__(self, value, requires_grad=False):
        self.value = as_tensor(value)
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = None
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = "leaf" if self.node_id is None else "node%d" % self.node_id
        return "DiffValue(%s, shape=%s, grad=%s)" % (
            tag, self.value.shape, self.requires_grad)

    # operator sugar; scalars and ndarrays coerce to constants
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)


def leaf(value, requires_grad=True):
    """Create a parameter leaf."""
    return DiffValue(value, requires_grad=requires_grad)


def constant(value):
    return DiffValue(value, requires_grad=False)


def _coerce(x):
    if isinstance(x, DiffValue):
        return x
    return DiffValue(x)


def _record(value, parents, bwd):
    """Create the output DiffValue of an op; put it on the tape when a graph
    is active and any parent requires grad."""
    g = active_graph()
    req = g is not None and any(p.requires_grad for p in parents)
    out = DiffValue(value, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._bwd = bwd
        out.node_id = len(g.nodes)
        g.nodes.append(out)
    return out


def backward(root):
    """Reverse sweep from a scalar root.

    Walks the active graph's tape once in reverse creation order (so the
    order in which a value's consumers contribute to its gradient is fixed),
    accumulates into leaf .grad, frees the tape, and returns {leaf: grad}
    for every grad-requiring leaf reached.
    """
    g = active_graph()
    if g is None:
        raise ContractError("backward() needs an active Graph")
    if root.node_id is None:
        raise ContractError("backward root was not recorded on the active graph")
    if root.value.size != 1:
        raise ContractError("backward root must be scalar, got shape %s"
                            % (root.value.shape,))
    grads = [None] * (root.node_id + 1)
    grads[root.node_id] = np.ones_like(root.value)
    touched = []
    for nid in range(root.node_id, -1, -1):
        node = g.nodes[nid]
        gout = grads[nid]
        grads[nid] = None
        if gout is None:
            continue
        for p, pg in zip(node._parents, node._bwd(gout)):
            if pg is None or not p.requires_grad:
                continue
            if p.node_id is not None:
                if grads[p.node_id] is None:
                    grads[p.node_id] = pg
                else:
                    grads[p.node_id] = grads[p.node_id] + pg
            else:
                if p.grad is None:
                    p.grad = pg.astype(p.value.dtype, copy=True)
                    touched.append(p)
                else:
                    p.grad = p.grad + pg
    # free the tape: closures pin every intermediate otherwise
    for node in g.nodes:
        node._parents = ()
        node._bwd = None
        node.node_id = None
    g.nodes.clear()
    return {p: p.grad for p in touched}


def _unbroadcast(g, shape):
    # reduce a broadcast gradient back down to `shape`
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape))
                 if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = _coerce(a), _coerce(b)
    return _record(a.value + b.value, (a, b), lambda go: (
        _unbroadcast(go, a.value.shape), _unbroadcast(go, b.value.shape)))


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    return _record(a.value - b.value, (a, b), lambda go: (
        _unbroadcast(go, a.value.shape), _unbroadcast(-go, b.value.shape)))


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    return _record(a.value * b.value, (a, b), lambda go: (
        _unbroadcast(go * b.value, a.value.shape),
        _unbroadcast(go * a.value, b.value.shape)))


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    return _record(a.value / b.value, (a, b), lambda go: (
        _unbroadcast(go / b.value, a.value.shape),
        _unbroadcast(-go * a.value / (b.value * b.value), b.value.shape)))


def neg(a):
    return _record(-a.value, (a,), lambda go: (-go,))


def matmul(a, b):
    """2-D (m,k)@(k,n) or batched 3-D (B,m,k)@(B,k,n); anything else is a
    dimension error naming both shapes."""
    a, b = _coerce(a), _coerce(b)
    sa, sb = a.value.shape, b.value.shape
    ok = (len(sa) == len(sb) and len(sa) in (2, 3) and sa[-1] == sb[-2]
          and (len(sa) == 2 or sa[0] == sb[0]))
    if not ok:
        raise DimensionError("matmul shapes incompatible: %s vs %s" % (sa, sb))
    val = a.value @ b.value
    if len(sa) == 2:
        def bwd(go):
            return go @ b.value.T, a.value.T @ go
    else:
        def bwd(go):
            return (go @ b.value.transpose(0, 2, 1),
                    a.value.transpose(0, 2, 1) @ go)
    return _record(val, (a, b), bwd)


# ------------------------------------------------------------- shape plumbing

def reshape(a, shape):
    a = _coerce(a)
    old = a.value.shape
    return _record(a.value.reshape(shape), (a,), lambda go: (go.reshape(old),))


def transpose(a, axes):
    a = _coerce(a)
    inv = tuple(np.argsort(axes))
    return _record(a.value.transpose(axes), (a,),
                   lambda go: (go.transpose(inv),))


def concat(parts, axis=0):
    parts = [_coerce(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(go):
        return tuple(np.ascontiguousarray(g)
                     for g in np.split(go, splits, axis=axis))
    return _record(np.concatenate([p.value for p in parts], axis=axis),
                   parts, bwd)


def getitem(a, key):
    a = _coerce(a)
    val = a.value[key]
    shape = a.value.shape

    def bwd(go):
        g = np.zeros(shape, dtype=go.dtype)
        g[key] = go          # basic indexing: slices never repeat elements
        return (g,)
    return _record(val, (a,), bwd)


def take(a, idx, axis=0):
    """Gather along an axis; backward scatter-adds with np.add.at, which is
    deterministic for repeated indices."""
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.value.shape

    def bwd(go):
        g = np.zeros(shape, dtype=go.dtype)
        if axis == 0:
            np.add.at(g, idx, go)
        else:
            gm = np.moveaxis(g, axis, 0)
            np.add.at(gm, idx, np.moveaxis(go, axis, 0))
        return (g,)
    return _record(np.take(a.value, idx, axis=axis), (a,), bwd)


# ----------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims=False):
    a = _coerce(a)
    shape = a.value.shape

    def bwd(go):
        g = go
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _record(a.value.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean_(a, axis=None, keepdims=False):
    a = _coerce(a)
    n = a.value.size if axis is None else np.prod(
        [a.value.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * float(1.0 / n)


# ---------------------------------------------------------------- elementwise

def exp(a):
    a = _coerce(a)
    val = np.exp(a.value)
    return _record(val, (a,), lambda go: (go * val,))


def log(a):
    a = _coerce(a)
    return _record(np.log(a.value), (a,), lambda go: (go / a.value,))


def sqrt(a):
    a = _coerce(a)
    val = np.sqrt(a.value)
    return _record(val, (a,), lambda go: (go * (0.5 / val),))


def sigmoid(a):
    a = _coerce(a)
    val = _sp.expit(a.value)
    return _record(val, (a,), lambda go: (go * val * (1.0 - val),))


def softplus(a):
    a = _coerce(a)
    return _record(np.logaddexp(0.0, a.value), (a,),
                   lambda go: (go * _sp.expit(a.value),))


def relu(a):
    a = _coerce(a)
    mask = a.value > 0
    return _record(np.where(mask, a.value, 0.0), (a,),
                   lambda go: (go * mask,))


def abs_(a):
    a = _coerce(a)
    return _record(np.abs(a.value), (a,), lambda go: (go * np.sign(a.value),))


def erf(a):
    a = _coerce(a)
    c = 2.0 / np.sqrt(np.pi)
    return _record(_sp.erf(a.value), (a,),
                   lambda go: (go * (c * np.exp(-a.value * a.value)),))


def tanh(a):
    a = _coerce(a)
    val = np.tanh(a.value)
    return _record(val, (a,), lambda go: (go * (1.0 - val * val),))


def huber_elem(r, delta=1.0):
    """Elementwise Huber: 0.5 r^2 inside |r|<=delta, delta(|r|-delta/2)
    outside; gradient is clip(r, -delta, delta)."""
    r = _coerce(r)
    ar = np.abs(r.value)
    val = np.where(ar <= delta, 0.5 * r.value * r.value,
                   delta * (ar - 0.5 * delta))
    return _record(val, (r,),
                   lambda go: (go * np.clip(r.value, -delta, delta),))


def l2norm_lastdim(a, tiny=1e-30):
    """Euclidean norm over the last axis. Backward guards the v/||v|| factor
    with max(||v||, tiny) so an exactly zero vector yields zero gradient
    instead of NaN."""
    a = _coerce(a)
    val = np.sqrt(np.sum(a.value * a.value, axis=-1))
    safe = np.maximum(val, tiny)
    return _record(val, (a,),
                   lambda go: (go[..., None] * (a.value / safe[..., None]),))


# -------------------------------------------------------- normalizing layers

def softmax_lastdim(a):
    """Stable softmax over the last axis."""
    a = _coerce(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    val = e / e.sum(axis=-1, keepdims=True)

    def bwd(go):
        dot = (go * val).sum(axis=-1, keepdims=True)
        return (val * (go - dot),)
    return _record(val, (a,), bwd)


def layer_norm(x, gain=None, bias=None, eps=1e-5):
    """Normalize over the last axis to zero mean / unit variance (biased
    variance), then scale and shift. gain/bias are optional (C,) leaves.
    A constant vector collapses to zeros thanks to the eps guard."""
    x = _coerce(x)
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    val = xhat
    if gain is not None:
        val = val * gain.value
    if bias is not None:
        val = val + bias.value

    parents = [x] + ([gain] if gain is not None else []) \
                  + ([bias] if bias is not None else [])

    def bwd(go):
        lead = tuple(range(go.ndim - 1))
        dxhat = go * gain.value if gain is not None else go
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = ivar * (dxhat - m1 - xhat * m2)
        out = [dx]
        if gain is not None:
            out.append((go * xhat).sum(axis=lead))
        if bias is not None:
            out.append(go.sum(axis=lead))
        return tuple(out)
    return _record(val, tuple(parents), bwd)


# ------------------------------------------------------------- temporal conv

def conv1d_temporal(x, kernel, stride=1, padding="same"):
    """1-D convolution along axis 0 of x (time, channels).

    kernel is (k, c_in, c_out), or a 1-D (k,) tap vector applied per channel.
    padding 'same' reflect-pads (odd k only); 'causal' zero-pads k-1 steps on
    the left so tap k-1 reads the current step and earlier taps look back.
    Output rows: floor((t_padded - k)/stride) + 1.
    """
    x = _coerce(x)
    if x.value.ndim != 2:
        raise DimensionError("conv1d_temporal wants (t, c), got %s"
                             % (x.value.shape,))
    t, cin = x.value.shape
    kern = _coerce(kernel)
    if kern.value.ndim == 1:
        k = kern.value.shape[0]
        eye = np.eye(cin, dtype=x.value.dtype)
        kern = reshape(kern, (k, 1, 1)) * constant(eye[None])
    k, kcin, cout = kern.value.shape
    if kcin != cin:
        raise DimensionError("kernel c_in %d vs input %s" % (kcin, x.value.shape))

    if padding == "same":
        if k % 2 == 0:
            raise ContractError("symmetric padding needs odd kernel, got %d" % k)
        p = (k - 1) // 2
        if p > 0:
            if t < p + 1:
                raise DimensionError(
                    "kernel %d too long to reflect-pad input of %d steps" % (k, t))
            idx = np.concatenate([np.arange(p, 0, -1),
                                  np.arange(t),
                                  np.arange(t - 2, t - 2 - p, -1)])
            xp = take(x, idx, axis=0)
        else:
            xp = x
    elif padding == "causal":
        zeros = constant(np.zeros((k - 1, cin), dtype=x.value.dtype))
        xp = concat([zeros, x], axis=0) if k > 1 else x
    else:
        raise ContractError("padding must be 'same' or 'causal', got %r"
                            % (padding,))

    tp = xp.value.shape[0]
    if tp < k:
        raise DimensionError("kernel %d longer than padded input %d" % (k, tp))
    tout = (tp - k) // stride + 1
    win = (np.arange(tout)[:, None] * stride + np.arange(k)[None]).ravel()
    cols = reshape(take(xp, win, axis=0), (tout, k * cin))
    return matmul(cols, reshape(kern, (k * cin, cout)))


# --------------------------------------------------------- gradient checking

def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = float(f(x))
        flat[i] = keep - h
        fm = float(f(x))
        flat[i] = keep
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(a, b):
    """max|a-b| / max(1, max|a|, max|b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / denom


def check_grad(build, arrays, h=1e-5, coords=None, rng=None):
    """Compare autodiff grads of scalar build(*leaves) against central
    differences for each array in `arrays`.

    With coords=None every element is probed; for big tensors pass coords=K
    to probe K seeded random elements per array. Returns the worst
    max_rel_error-style relative error over all probed elements.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [leaf(a.copy()) for a in arrays]
    with Graph():
        out = build(*leaves)
        backward(out)
    grads = [lf.grad if lf.grad is not None else np.zeros_like(lf.value)
             for lf in leaves]

    def evaluate():
        vals = [leaf(a, requires_grad=False) for a in arrays]
        return float(build(*vals).value)

    worst = 0.0
    for ai, base in enumerate(arrays):
        flat = base.ravel()
        if coords is None:
            probe = range(flat.size)
        else:
            rr = rng or np.random.default_rng(0)
            probe = rr.choice(flat.size, size=min(coords, flat.size),
                              replace=False)
        ga = grads[ai].ravel()
        fd = np.zeros_like(ga)
        picked = list(probe)
        for i in picked:
            keep = flat[i]
            flat[i] = keep + h
            fp = evaluate()
            flat[i] = keep - h
            fm = evaluate()
            flat[i] = keep
            fd[i] = (fp - fm) / (2.0 * h)
        sub = np.asarray(picked, dtype=np.intp)
        worst = max(worst, max_rel_error(ga[sub], fd[sub]))
    return worst
