"""Independent brute-force reference implementations used to check the kernels.

Everything here is deliberately written as plain nested loops or direct
formula translations, with no shared code paths with the package under test.
"""

import numpy as np


def conv2d_ref(x, weight, bias, stride, padding):
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, out_h, out_w), dtype=np.float64)
    for b in range(n):
        for o in range(c_out):
            for y in range(out_h):
                for xx in range(out_w):
                    acc = float(bias[o])
                    for c in range(c_in):
                        for i in range(kh):
                            for j in range(kw):
                                acc += weight[o, c, i, j] * xp[b, c, y * stride + i, xx * stride + j]
                    out[b, o, y, xx] = acc
    return out


def maxpool2d_ref(x, window=2, stride=2):
    n, c, h, w = x.shape
    oh, ow = h // window, w // window
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for y in range(oh):
                for xx in range(ow):
                    out[b, ch, y, xx] = x[b, ch,
                                          y * stride : y * stride + window,
                                          xx * stride : xx * stride + window].max()
    return out


def batchnorm_ref(x, gamma, beta, eps):
    """Two-pass per-channel normalization with population variance."""
    n, c, h, w = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for ch in range(c):
        vals = x[:, ch].astype(np.float64)
        mu = vals.sum() / vals.size
        var = ((vals - mu) ** 2).sum() / vals.size
        out[:, ch] = gamma[ch] * (vals - mu) / np.sqrt(var + eps) + beta[ch]
    return out


def global_avg_pool_ref(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c), dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            out[b, ch] = x[b, ch].astype(np.float64).sum() / (h * w)
    return out


def softmax_ce_ref(logits, labels):
    n, k = logits.shape
    losses = []
    probs = np.zeros((n, k), dtype=np.float64)
    for i in range(n):
        row = logits[i].astype(np.float64)
        e = np.exp(row - row.max())
        probs[i] = e / e.sum()
        losses.append(-np.log(probs[i, labels[i]]))
    return float(np.mean(losses)), probs


def numeric_grad(f, x, eps=1e-3):
    """Central finite differences of a scalar function with respect to array x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def rel_err(a, n):
    """max |a - n| / max(|a|, |n|, 1e-6) over all elements."""
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
    return float((np.abs(a - n) / denom).max())
