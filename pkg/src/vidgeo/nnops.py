"""Differentiable building blocks assembled from the tape primitives:
linear maps over trailing channels, GELU/SiLU, multi-head attention,
zero-padded strided 2-D convolution, nearest and bilinear resampling, and
the temporal duplication + causal mixing pair used by upsamplers.

Spatial ops take (T, H, W, C) values and fold every leading axis into one
gather + one matmul, so a whole clip costs the same op count as a frame.
"""

import numpy as np

from . import autodiff as ad


def _dv(x):
    return x if isinstance(x, ad.DiffValue) else ad.constant(x)


def linear(x, w, b=None):
    """(..., c_in) @ (c_in, c_out) + b, any number of leading axes."""
    x = _dv(x)
    lead, cin = x.shape[:-1], x.shape[-1]
    y = ad.matmul(x.reshape((int(np.prod(lead, dtype=np.int64)), cin)), w)
    if b is not None:
        y = y + b
    return y.reshape(lead + (w.shape[-1],))


def gelu(x):
    x = _dv(x)
    return x * (ad.erf(x * (1.0 / np.sqrt(2.0))) + 1.0) * 0.5


def silu(x):
    x = _dv(x)
    return x * ad.sigmoid(x)


def mlp(x, w1, b1, w2, b2, act=gelu):
    return linear(act(linear(x, w1, b1)), w2, b2)


def shift(x, beta):
    """Pure additive feature shift; the shapes must agree exactly."""
    x, beta = _dv(x), _dv(beta)
    if x.shape != beta.shape:
        raise ad.DimensionError("shift %s vs features %s" % (beta.shape, x.shape))
    return x + beta


def attention(x, wq, wk, wv, wo, heads):
    """Multi-head softmax self-attention over one token sequence (N, c)."""
    n, c = x.shape
    if c % heads:
        raise ad.DimensionError("width %d not divisible by %d heads" % (c, heads))
    dh = c // heads

    def split(v):
        return ad.transpose(v.reshape((n, heads, dh)), (1, 0, 2))

    q, k, v = (split(ad.matmul(x, w)) for w in (wq, wk, wv))
    att = ad.softmax_lastdim(ad.matmul(q, ad.transpose(k, (0, 2, 1))) * dh ** -0.5)
    out = ad.transpose(ad.matmul(att, v), (1, 0, 2)).reshape((n, c))
    return ad.matmul(out, wo)


def conv2d(x, w, b=None, stride=1, pad=None):
    """2-D convolution of (T, H, W, c_in) with (kh, kw, c_in, c_out); the
    default padding keeps 'same' extents at stride 1. Out-of-frame taps read
    a zero row appended to the flattened pixel table."""
    x = _dv(x)
    T, H, W, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ad.DimensionError("kernel c_in %d vs input %s" % (wcin, x.shape))
    p = (kh - 1) // 2 if pad is None else pad
    ho = (H + 2 * p - kh) // stride + 1
    wo = (W + 2 * p - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ad.DimensionError("conv output empty for input %s" % (x.shape,))
    ii = np.arange(ho)[:, None] * stride - p + np.arange(kh)[None]   # (ho, kh)
    jj = np.arange(wo)[:, None] * stride - p + np.arange(kw)[None]   # (wo, kw)
    inside = (((ii >= 0) & (ii < H))[:, None, :, None]
              & ((jj >= 0) & (jj < W))[None, :, None, :])            # (ho,wo,kh,kw)
    cell = ii[:, None, :, None] * W + jj[None, :, None, :]
    idx = np.arange(T)[:, None, None, None, None] * (H * W) + cell[None]
    idx = np.where(inside[None], idx, T * H * W)                     # the zero row
    flat = x.reshape((T * H * W, cin))
    padded = ad.concat([flat, ad.constant(np.zeros((1, cin)))], axis=0)
    cols = ad.take(padded, idx.ravel(), axis=0)
    y = ad.matmul(cols.reshape((T * ho * wo, kh * kw * cin)),
                  w.reshape((kh * kw * cin, cout)))
    if b is not None:
        y = y + b
    return y.reshape((T, ho, wo, cout))


def _nearest_idx(n_in, n_out):
    s = (np.arange(n_out) + 0.5) * (n_in / n_out)
    return np.minimum(s.astype(np.intp), n_in - 1)


def resize_nearest(x, hw):
    """Nearest-neighbor spatial resample of (T, H, W, C), half-pixel grid."""
    x = _dv(x)
    y = ad.take(x, _nearest_idx(x.shape[1], hw[0]), axis=1)
    return ad.take(y, _nearest_idx(y.shape[2], hw[1]), axis=2)


def resize_bilinear(x, hw):
    """Bilinear spatial resample of (T, H, W, C), half-pixel grid, edges
    clamped; separable, so two gathers per axis."""
    x = _dv(x)
    for axis, n_out in ((1, hw[0]), (2, hw[1])):
        n_in = x.shape[axis]
        s = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
        i0 = np.minimum(s.astype(np.intp), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        w1 = (s - i0).reshape([n_out if a == axis else 1 for a in range(4)])
        x = ad.take(x, i0, axis=axis) * (1.0 - w1) + ad.take(x, i1, axis=axis) * w1
    return x


def temporal_dup(x):
    """(t, ...) -> (2t-1, ...) with out[j] = in[ceil(j/2)]: each source step
    is doubled except the first, so slot 0 stays aligned and no output looks
    ahead of its own source step."""
    x = _dv(x)
    return ad.take(x, (np.arange(2 * x.shape[0] - 1) + 1) // 2, axis=0)


def causal_conv_time(x, w, b=None):
    """Causal temporal mixing of (t, S, c_in) with kernel (k, c_in, c_out):
    tap k-1 reads the current step and earlier taps look back, so output j
    never depends on inputs after j."""
    x = _dv(x)
    t, S, cin = x.shape
    k, wcin, cout = w.shape
    if wcin != cin:
        raise ad.DimensionError("kernel c_in %d vs input %s" % (wcin, x.shape))
    xp = ad.concat([ad.constant(np.zeros((k - 1, S, cin))), x], axis=0) if k > 1 else x
    y = None
    for m in range(k):
        ym = ad.matmul(xp[m:m + t].reshape((t * S, cin)), w[m])
        y = ym if y is None else y + ym
    y = y.reshape((t, S, cout))
    return y if b is None else y + b
