"""Independent, deliberately naive reference computations used by the tests.

Nothing here imports the package under test.
"""
import math

import numpy as np


def cos_sim(u, v):
    dot = sum(a * b for a, b in zip(u, v))
    return dot / (math.sqrt(sum(a * a for a in u)) * math.sqrt(sum(b * b for b in v)))


def ntxent_anchor(z, i, positives, tau):
    """Average over j in positives of -log(exp(phi_ij/tau) / sum_{k != i} exp(phi_ik/tau))."""
    n = len(z)
    denom = sum(math.exp(cos_sim(z[i], z[k]) / tau) for k in range(n) if k != i)
    total = 0.0
    for j in positives:
        total += -math.log(math.exp(cos_sim(z[i], z[j]) / tau) / denom)
    return total / len(positives)


def syn_loss(z, labels, i, tau):
    c = [j for j in range(len(z)) if j != i and labels[j] == labels[i]]
    return ntxent_anchor(z, i, c, tau)


def total_loss(z, labels, ugc, tau):
    n = len(z)
    acc = 0.0
    for i in range(n):
        if ugc[i]:
            (j,) = [j for j in range(n) if j != i and labels[j] == labels[i]]
            acc += ntxent_anchor(z, i, [j], tau)
        else:
            acc += syn_loss(z, labels, i, tau)
    return acc / n


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


# PQ closed form, scalar
M1, M2 = 2610 / 16384, 2523 / 4096 * 128
C1, C2, C3 = 3424 / 4096, 2413 / 4096 * 32, 2392 / 4096 * 32


def pq_inverse_eotf_scalar(nits):
    y = (nits / 10000.0) ** M1
    return ((C1 + C2 * y) / (1 + C3 * y)) ** M2


def pq_eotf_scalar(code):
    p = code ** (1 / M2)
    return 10000.0 * (max(p - C1, 0.0) / (C2 - C3 * p)) ** (1 / M1)


def ycbcr2020_pixel(y_code, cb_code, cr_code, bits=10, full_range=False):
    """One pixel of BT.2020 NCL Y'CbCr codes to R'G'B' via an explicit 3x3 inverse matrix."""
    maxc = 2 ** bits - 1
    mid = 2 ** (bits - 1)
    if full_range:
        y, cb, cr = y_code / maxc, (cb_code - mid) / maxc, (cr_code - mid) / maxc
    else:
        s = 2 ** (bits - 8)
        y, cb, cr = (y_code - 16 * s) / (219 * s), (cb_code - mid) / (224 * s), (cr_code - mid) / (224 * s)
    kr, kb = 0.2627, 0.0593
    kg = 1 - kr - kb
    forward = np.array([
        [kr, kg, kb],
        [-kr / (2 * (1 - kb)), -kg / (2 * (1 - kb)), 0.5],
        [0.5, -kg / (2 * (1 - kr)), -kb / (2 * (1 - kr))],
    ])
    rgb = np.linalg.solve(forward, np.array([y, cb, cr]))
    return np.clip(rgb, 0, 1)


def lanczos3(x):
    if x == 0:
        return 1.0
    if abs(x) >= 3:
        return 0.0
    px = math.pi * x
    return 3 * math.sin(px) * math.sin(px / 3) / (px * px)


def resize_direct(img, out_w, out_h, kernel=lanczos3, support=3.0):
    """Per-output-pixel 2-D weighted sum with centre alignment, kernel stretching and edge clamping."""
    in_h, in_w = img.shape
    sy, sx = out_h / in_h, out_w / in_w
    fy, fx = max(1.0, 1 / sy), max(1.0, 1 / sx)
    out = np.zeros((out_h, out_w))
    for oy in range(out_h):
        cy = (oy + 0.5) / sy - 0.5
        ys = range(math.floor(cy - support * fy) - 1, math.ceil(cy + support * fy) + 2)
        for ox in range(out_w):
            cx = (ox + 0.5) / sx - 0.5
            xs = range(math.floor(cx - support * fx) - 1, math.ceil(cx + support * fx) + 2)
            num = den = 0.0
            for yy in ys:
                wy = kernel((yy - cy) / fy)
                for xx in xs:
                    w = wy * kernel((xx - cx) / fx)
                    num += w * img[min(max(yy, 0), in_h - 1), min(max(xx, 0), in_w - 1)]
                    den += w
            out[oy, ox] = num / den
    return out


def pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def average_ranks(a):
    order = sorted(range(len(a)), key=lambda i: a[i])
    ranks = [0.0] * len(a)
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and a[order[j + 1]] == a[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks
