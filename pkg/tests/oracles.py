"""Independent reference implementations used as test oracles.

Everything here is deliberately naive — nested loops, Fraction
arithmetic, scalar math — and shares no code with the package. These are
the ground truth the fast implementations are checked against.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def conv2d_loops(x, w, b, stride=1, padding="same"):
    """Quadruple-nested-loop convolution over N,H,W,C input and kh,kw,Cin,Cout weights."""
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    if padding == "same":
        oh = math.ceil(h / stride)
        ow = math.ceil(wd / stride)
        pt = max((oh - 1) * stride + kh - h, 0) // 2
        pl = max((ow - 1) * stride + kw - wd, 0) // 2
    else:
        oh = (h - kh) // stride + 1
        ow = (wd - kw) // stride + 1
        pt = pl = 0
    out = np.zeros((n, oh, ow, cout), dtype=np.float64)
    for bi in range(n):
        for oc in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for a in range(kh):
                        for c in range(kw):
                            for ic in range(cin):
                                ii = i * stride + a - pt
                                jj = j * stride + c - pl
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += float(x[bi, ii, jj, ic]) * float(w[a, c, ic, oc])
                    out[bi, i, j, oc] = acc + float(b[oc])
    return out


def maxpool2d_loops(x, k=2, s=2):
    n, h, w, c = x.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    out = np.zeros((n, oh, ow, c), dtype=np.float64)
    for bi in range(n):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    best = -math.inf
                    for a in range(k):
                        for d in range(k):
                            v = float(x[bi, i * s + a, j * s + d, ci])
                            if v > best:
                                best = v
                    out[bi, i, j, ci] = best
    return out


def matmul_loops(x, w, b):
    n, din = x.shape
    dout = w.shape[1]
    out = np.zeros((n, dout), dtype=np.float64)
    for i in range(n):
        for j in range(dout):
            acc = 0.0
            for kk in range(din):
                acc += float(x[i, kk]) * float(w[kk, j])
            out[i, j] = acc + float(b[j])
    return out


def softmax_direct(row):
    """Exponent-ratio softmax at float64, no stabilisation tricks."""
    e = [math.exp(float(v)) for v in row]
    s = sum(e)
    return [v / s for v in e]


def cross_entropy_direct(probs, labels, eps=1e-7):
    n = len(probs)
    total = 0.0
    for p_row, y_row in zip(probs, labels):
        for p, y in zip(p_row, y_row):
            pc = min(max(float(p), eps), 1.0 - eps)
            total += -float(y) * math.log(pc)
    return total / n


def bilinear_resize_scalar(src, out_h, out_w):
    """Half-pixel-centred bilinear resize of an H,W,C u8 array, one sample at a time."""
    h, w, c = src.shape
    out = np.zeros((out_h, out_w, c), dtype=np.uint8)
    for oy in range(out_h):
        sy = min(max((oy + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for ox in range(out_w):
            sx = min(max((ox + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            for ci in range(c):
                v = (float(src[y0, x0, ci]) * (1 - fy) * (1 - fx)
                     + float(src[y0, x1, ci]) * (1 - fy) * fx
                     + float(src[y1, x0, ci]) * fy * (1 - fx)
                     + float(src[y1, x1, ci]) * fy * fx)
                out[oy, ox, ci] = int(round(v))
    return out


def metrics_fractions(counts):
    """Exact accuracy / per-class precision, recall, F1 via Fraction arithmetic.

    Zero denominators yield metric 0, mirroring the documented convention.
    Returns a dict of Fractions (per-class lists plus macro and accuracy).
    """
    counts = [[int(v) for v in row] for row in counts]
    c = len(counts)
    total = sum(sum(row) for row in counts)
    precision, recall, f1 = [], [], []
    for k in range(c):
        tp = counts[k][k]
        fp = sum(counts[t][k] for t in range(c)) - tp
        fn = sum(counts[k][p] for p in range(c)) - tp
        p = Fraction(tp, tp + fp) if tp + fp > 0 else Fraction(0)
        r = Fraction(tp, tp + fn) if tp + fn > 0 else Fraction(0)
        f = 2 * p * r / (p + r) if p + r > 0 else Fraction(0)
        precision.append(p)
        recall.append(r)
        f1.append(f)
    return {
        "accuracy": Fraction(sum(counts[k][k] for k in range(c)), total),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "macro_precision": sum(precision) / c,
        "macro_recall": sum(recall) / c,
        "macro_f1": sum(f1) / c,
    }


def largest_remainder_fractions(n, fracs):
    """Largest-remainder apportionment with ties going to the earlier bucket."""
    exact = [Fraction(n) * Fraction(f).limit_denominator(10**9) for f in fracs]
    base = [int(e) for e in exact]
    seats = n - sum(base)
    order = sorted(range(len(fracs)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:seats]:
        base[i] += 1
    return base
