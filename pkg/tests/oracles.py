"""Slow, loop-based reference implementations used only by the tests."""

import math

import numpy as np


def matmul_loop(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv2d_loop(x, k, b=None, stride=1, padding=0):
    cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.zeros((cin, h + 2 * padding, w + 2 * padding))
    xp[:, padding:padding + h, padding:padding + w] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((cout, oh, ow))
    for o in range(cout):
        for i in range(oh):
            for j in range(ow):
                s = 0.0
                for c in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            s += xp[c, i * stride + u, j * stride + v] * k[o, c, u, v]
                out[o, i, j] = s + (0.0 if b is None else b[o])
    return out


def softmax_row(r):
    m = max(r)
    e = [math.exp(v - m) for v in r]
    s = sum(e)
    return [v / s for v in e]


def attention_loop(q, k, v, heads):
    """Plain multi-head attention on 2-D token arrays."""
    nq, d = q.shape
    nk = k.shape[0]
    dv = v.shape[1]
    dh, dvh = d // heads, dv // heads
    out = np.zeros((nq, dv))
    for hd in range(heads):
        for i in range(nq):
            scores = []
            for j in range(nk):
                s = 0.0
                for t in range(dh):
                    s += q[i, hd * dh + t] * k[j, hd * dh + t]
                scores.append(s / math.sqrt(dh))
            p = softmax_row(scores)
            for c in range(dvh):
                out[i, hd * dvh + c] = sum(p[j] * v[j, hd * dvh + c] for j in range(nk))
    return out


def projected_attention_loop(store, prefix, x, ctx, heads, bias_q=None, bias_k=None):
    xq = x if bias_q is None else x + bias_q
    ck = ctx if bias_k is None else ctx + bias_k
    q = matmul_loop(xq, store[prefix + ".wq"])
    k = matmul_loop(ck, store[prefix + ".wk"])
    v = matmul_loop(ctx, store[prefix + ".wv"])
    return matmul_loop(attention_loop(q, k, v, heads), store[prefix + ".wo"]) + store[prefix + ".bo"]


def bilinear_point(img, y, x):
    """Bilinear lookup of ``img[c, y, x]`` with the coordinate clamped to the image."""
    c, h, w = img.shape
    y = min(max(y, 0.0), h - 1)
    x = min(max(x, 0.0), w - 1)
    y0 = min(int(math.floor(y)), max(h - 2, 0))
    x0 = min(int(math.floor(x)), max(w - 2, 0))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    return np.array([(img[ch, y0, x0] * (1 - fx) + img[ch, y0, x1] * fx) * (1 - fy)
                     + (img[ch, y1, x0] * (1 - fx) + img[ch, y1, x1] * fx) * fy for ch in range(c)])


def ssim_window_loop(a, b, win=11, sigma=1.5, k1=0.01, k2=0.03):
    """SSIM evaluated window by window on a single-channel image."""
    r = np.arange(win) - (win - 1) / 2.0
    g1 = np.exp(-r ** 2 / (2 * sigma ** 2))
    g1 /= g1.sum()
    g = np.outer(g1, g1)
    c1, c2 = k1 ** 2, k2 ** 2
    h, w = a.shape
    vals = []
    for i in range(h - win + 1):
        for j in range(w - win + 1):
            pa = a[i:i + win, j:j + win]
            pb = b[i:i + win, j:j + win]
            ma, mb = (g * pa).sum(), (g * pb).sum()
            va = (g * (pa - ma) ** 2).sum()
            vb = (g * (pb - mb) ** 2).sum()
            cov = (g * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))
