"""Slow reference implementations, independent of the library code paths."""

import math

import numpy as np


def naive_conv3d(x, w, b, pad=(0, 0, 0)):
    """Seven nested loops over (o, d, h, w, c, i, j, k) -- the direct triple
    sum of the convolution definition plus bias."""
    C, D, H, W = x.shape
    O, C2, kd, kh, kw = w.shape
    assert C == C2
    pd, ph, pw = pad
    xp = np.zeros((C, D + 2 * pd, H + 2 * ph, W + 2 * pw))
    xp[:, pd : pd + D, ph : ph + H, pw : pw + W] = x
    Do, Ho, Wo = xp.shape[1] - kd + 1, xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    out = np.zeros((O, Do, Ho, Wo))
    for o in range(O):
        for z in range(Do):
            for y in range(Ho):
                for xx in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for i in range(kd):
                            for j in range(kh):
                                for k in range(kw):
                                    acc += w[o, c, i, j, k] * xp[c, z + i, y + j, xx + k]
                    out[o, z, y, xx] = acc + b[o]
    return out


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_softmax(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def naive_metrics(C):
    """OA, AA, kappa, macro-F1 and per-class recall/F1 from per-definition loops."""
    C = [[int(v) for v in row] for row in C]
    K = len(C)
    total = sum(sum(r) for r in C)
    correct = sum(C[i][i] for i in range(K))
    row = [sum(C[i][j] for j in range(K)) for i in range(K)]
    col = [sum(C[i][j] for i in range(K)) for j in range(K)]
    recall, f1 = [], []
    for i in range(K):
        r = C[i][i] / row[i] if row[i] else 0.0
        p = C[i][i] / col[i] if col[i] else 0.0
        recall.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    present = [i for i in range(K) if row[i] > 0]
    po = correct / total
    pe = sum(row[i] * col[i] for i in range(K)) / total**2
    kappa = (po - pe) / (1 - pe) if pe != 1 else (1.0 if po == 1 else 0.0)
    return {
        "oa": po,
        "aa": sum(recall[i] for i in present) / len(present),
        "kappa": kappa,
        "f1_macro": sum(f1[i] for i in present) / len(present),
        "recall": recall,
        "f1": f1,
    }


def reference_adam(grad_fn, w0, steps, lr=1e-4, decay=1e-6, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam recurrence written out longhand."""
    w, m, v = float(w0), 0.0, 0.0
    traj = []
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        w = w - (lr / (1 + decay * t)) * mhat / (math.sqrt(vhat) + eps)
        traj.append(w)
    return traj


def independent_param_count(S, B, levels, layers, d, ff, K, filters=32):
    """Hand-derived closed form for the parameter count."""
    total = 0
    for l in range(levels):
        s, b = S // 2**l, B // 2**l
        total += filters * s * s + filters  # conv1
        total += 2 * (d * filters + d)  # conv2 + residual projection
        total += b * d  # positional
        total += layers * (4 * (d * d + d) + d * ff + ff + ff * d + d)
    feat = sum(B // 2**l for l in range(levels)) * d
    return total + feat * K + K
