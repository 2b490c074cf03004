"""Independent reference implementations used as test oracles.

Everything here recomputes results with plain loops or literal formula
transcriptions, sharing no code with the package's forward/backward paths.
"""

import numpy as np


def conv2d_loops(x, w, b, stride=1, padding=0):
    """Direct nested-loop cross-correlation."""
    bs, c, h, ww = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (ww + 2 * padding - kw) // stride + 1
    xp = np.zeros((bs, c, h + 2 * padding, ww + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + ww] = x
    out = np.zeros((bs, o, oh, ow), dtype=x.dtype)
    for bi in range(bs):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[oi, ci, u, v] * xp[bi, ci, i * stride + u, j * stride + v]
                    out[bi, oi, i, j] = acc + b[oi]
    return out


def mul_loops(a, b):
    out = np.empty_like(a)
    flat_a, flat_b, flat_o = a.reshape(-1), b.reshape(-1), out.reshape(-1)
    for i in range(flat_a.size):
        flat_o[i] = flat_a[i] * flat_b[i]
    return out


def bilinear_loops(x, out_h, out_w):
    """Per-pixel corner-aligned bilinear sampling from the formula."""
    b, c, h, w = x.shape
    out = np.zeros((b, c, out_h, out_w), dtype=x.dtype)
    sy = 0.0 if out_h == 1 else (h - 1) / (out_h - 1)
    sx = 0.0 if out_w == 1 else (w - 1) / (out_w - 1)
    for i in range(out_h):
        for j in range(out_w):
            fy, fx = i * sy, j * sx
            y0, x0 = int(np.floor(fy)), int(np.floor(fx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            ty, tx = fy - y0, fx - x0
            out[:, :, i, j] = ((1 - ty) * (1 - tx) * x[:, :, y0, x0]
                               + (1 - ty) * tx * x[:, :, y0, x1]
                               + ty * (1 - tx) * x[:, :, y1, x0]
                               + ty * tx * x[:, :, y1, x1])
    return out


def max_pool2_loops(x):
    b, c, h, w = x.shape
    out = np.empty((b, c, h // 2, w // 2), dtype=x.dtype)
    for bi in range(b):
        for ci in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[bi, ci, i, j] = max(x[bi, ci, 2 * i, 2 * j], x[bi, ci, 2 * i, 2 * j + 1],
                                            x[bi, ci, 2 * i + 1, 2 * j], x[bi, ci, 2 * i + 1, 2 * j + 1])
    return out


# Offset of the pixel each position receives from, per travel direction.
_PREV = {"right": (0, -1), "left": (0, 1), "down": (-1, 0), "up": (1, 0)}


def scan_repeat(x, alpha, direction):
    """Literal repeated parallel update of the recurrent translation.

    Applies h[i,j] <- max(alpha h[prev] + x[i,j], 0) to every pixel
    simultaneously (Jacobi style, reading only the previous iterate),
    repeated as many times as the traversal axis is long.  Positions
    without an in-bounds predecessor use only their own input.
    """
    b, c, h, w = x.shape
    di, dj = _PREV[direction]
    reps = w if direction in ("left", "right") else h
    cur = x.copy()
    for _ in range(reps):
        new = np.empty_like(cur)
        for i in range(h):
            pi = i + di
            for j in range(w):
                pj = j + dj
                acc = x[:, :, i, j].copy()
                if 0 <= pi < h and 0 <= pj < w:
                    acc = acc + np.einsum("dc,bc->bd", alpha, cur[:, :, pi, pj])
                new[:, :, i, j] = np.maximum(acc, 0.0)
        cur = new
    return cur


def sigmoid_formula(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def weighted_ce_formula(p, y, w_pos, w_neg, eps=1e-7):
    """Literal per-pixel weighted cross entropy, averaged."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(y, dtype=np.float64)
    terms = -w_pos * y * np.log(p) - w_neg * (1 - y) * np.log(1 - p)
    return float(terms.mean())


def balance_loss_formula(p, y):
    n_p = int((y == 1).sum())
    n_n = int(y.size - n_p)
    return weighted_ce_formula(p, y, n_n / (n_p + n_n), n_p / (n_p + n_n))


def hard_class_loss_formula(p, y, tp, tn):
    n_p = int((y == 1).sum())
    n_n = int(y.size - n_p)
    w_pos = 1.0 - tp / n_p if n_p else 0.0
    w_neg = 1.0 - tn / n_n if n_n else 0.0
    return weighted_ce_formula(p, y, w_pos, w_neg)


def confusion_loops(pred, gt, threshold):
    tp = tn = fp = fn = 0
    for pv, gv in zip(pred.reshape(-1), gt.reshape(-1)):
        if gv == 1:
            if pv >= threshold:
                tp += 1
            else:
                fn += 1
        else:
            if pv >= threshold:
                fp += 1
            else:
                tn += 1
    return tp, tn, fp, fn
