"""Independent brute-force oracles used to validate the vectorized paths.

Everything here is deliberately naive: nested Python loops, sequential
accumulation, no numpy vectorization beyond indexing.  These stay separate
from the implementations they check.
"""

import math

import numpy as np


def naive_conv2d(x, kernel, bias, stride=1, padding=0):
    b, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((b, cout, oh, ow), dtype=x.dtype)
    for bi in range(b):
        for co in range(cout):
            for oi in range(oh):
                for oj in range(ow):
                    acc = bias[co] if bias is not None else 0.0
                    for ci in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[bi, ci, oi * stride + i, oj * stride + j] * kernel[co, ci, i, j]
                    out[bi, co, oi, oj] = acc
    return out


def naive_maxpool2d(x, window, stride):
    b, c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((b, c, oh, ow), dtype=x.dtype)
    for bi in range(b):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    best = -math.inf
                    for i in range(window):
                        for j in range(window):
                            v = x[bi, ci, oi * stride + i, oj * stride + j]
                            if v > best:
                                best = v
                    out[bi, ci, oi, oj] = best
    return out


def naive_linear(x, w):
    b, m = x.shape
    _, c = w.shape
    out = np.zeros((b, c), dtype=x.dtype)
    for bi in range(b):
        for ci in range(c):
            acc = 0.0
            for k in range(m):
                acc += x[bi, k] * w[k, ci]
            out[bi, ci] = acc
    return out


def naive_sliding_sq_l2(feature, template):
    b, d, h, w = feature.shape
    td, th, tw = template.shape
    assert td == d
    oh = h - th + 1
    ow = w - tw + 1
    out = np.zeros((b, oh, ow), dtype=feature.dtype)
    for bi in range(b):
        for oi in range(oh):
            for oj in range(ow):
                acc = 0.0
                for ci in range(d):
                    for i in range(th):
                        for j in range(tw):
                            diff = feature[bi, ci, oi + i, oj + j] - template[ci, i, j]
                            acc += diff * diff
                out[bi, oi, oj] = acc
    return out


def naive_cross_entropy(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        p = np.exp(row) / np.exp(row).sum()
        total += -math.log(p[y])
    return total / len(labels)


def naive_class_min_distance(dmaps, labels, class_ids, correct):
    """Mean over the batch of the min distance over the class-restricted set."""
    total = 0.0
    for bi, y in enumerate(labels):
        best = math.inf
        for j, cj in enumerate(class_ids):
            if (cj == y) != correct:
                continue
            for oi in range(dmaps.shape[2]):
                for oj in range(dmaps.shape[3]):
                    best = min(best, dmaps[bi, j, oi, oj])
        total += best
    return total / len(labels)


def naive_weighted_average(tensors, sizes):
    """Per-element weighted sum with explicit float weights."""
    total = sum(sizes)
    weights = [s / total for s in sizes]
    out = np.zeros_like(tensors[0])
    for t, w in zip(tensors, weights):
        out = out + w * t
    return out


def naive_bilinear(src, out_h, out_w):
    """Corner-aligned bilinear interpolation of a 2-d map."""
    h, w = src.shape
    out = np.zeros((out_h, out_w), dtype=src.dtype)
    for oi in range(out_h):
        for oj in range(out_w):
            fy = oi * (h - 1) / (out_h - 1) if out_h > 1 else 0.0
            fx = oj * (w - 1) / (out_w - 1) if out_w > 1 else 0.0
            y0, x0 = int(math.floor(fy)), int(math.floor(fx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            dy, dx = fy - y0, fx - x0
            out[oi, oj] = (
                src[y0, x0] * (1 - dy) * (1 - dx)
                + src[y0, x1] * (1 - dy) * dx
                + src[y1, x0] * dy * (1 - dx)
                + src[y1, x1] * dy * dx
            )
    return out
