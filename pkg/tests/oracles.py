"""Slow reference implementations used as test oracles.

Everything here is written with explicit Python loops over float64 scalars
and deliberately shares no code with the package kernels.
"""

import math

import numpy as np


def conv2d(x, w, b, stride=1, pad=0):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = float(b[oc])
                    for ic in range(c):
                        for dy in range(kh):
                            for dx in range(kw):
                                yy = y * stride + dy - pad
                                xi = xx * stride + dx - pad
                                if 0 <= yy < h and 0 <= xi < wd:
                                    acc += float(x[i, ic, yy, xi]) * float(w[oc, ic, dy, dx])
                    out[i, oc, y, xx] = acc
    return out


def relu(x):
    out = np.array(x, dtype=np.float64)
    for idx in np.ndindex(out.shape):
        if out[idx] < 0:
            out[idx] = 0.0
    return out


def maxpool(x, k=2, stride=2):
    n, c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for i in range(n):
        for ch in range(c):
            for y in range(ho):
                for xx in range(wo):
                    best = -math.inf
                    for dy in range(k):
                        for dx in range(k):
                            best = max(best, float(x[i, ch, y * stride + dy, xx * stride + dx]))
                    out[i, ch, y, xx] = best
    return out


def flatten(x):
    n = x.shape[0]
    out = []
    for i in range(n):
        row = []
        for idx in np.ndindex(x.shape[1:]):
            row.append(float(x[(i,) + idx]))
        out.append(row)
    return np.array(out)


def linear(x, w, b):
    n, d = x.shape
    out = np.zeros((n, w.shape[0]))
    for i in range(n):
        for o in range(w.shape[0]):
            acc = float(b[o])
            for j in range(d):
                acc += float(x[i, j]) * float(w[o, j])
            out[i, o] = acc
    return out


def bilinear(grid, out_h, out_w):
    """Align-corners bilinear interpolation of one h x w grid, straight from the formula."""
    h, w = grid.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        y = 0.0 if out_h == 1 else i * (h - 1) / (out_h - 1)
        y0 = min(int(math.floor(y)), max(h - 2, 0))
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for j in range(out_w):
            x = 0.0 if out_w == 1 else j * (w - 1) / (out_w - 1)
            x0 = min(int(math.floor(x)), max(w - 2, 0))
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            top = (1 - fx) * grid[y0, x0] + fx * grid[y0, x1]
            bot = (1 - fx) * grid[y1, x0] + fx * grid[y1, x1]
            out[i, j] = (1 - fy) * top + fy * bot
    return out


def nearest_rank(values, eta):
    """Full descending sort, element at index floor(eta * S)."""
    ordered = sorted(np.asarray(values).reshape(-1).tolist(), reverse=True)
    return ordered[int(math.floor(eta * len(ordered)))]


def iou(neuron_masks, concept_masks):
    inter = union = 0
    for img_m, img_l in zip(neuron_masks, concept_masks):
        for a, b in zip(np.asarray(img_m).reshape(-1).tolist(), np.asarray(img_l).reshape(-1).tolist()):
            inter += int(a and b)
            union += int(a or b)
    return inter / union if union else 0.0


def masked_mean(act_map, mask):
    """Mean of the upsampled map over the pixels set in mask."""
    up = bilinear(np.asarray(act_map, dtype=np.float64), *mask.shape)
    total = count = 0.0
    for idx in np.ndindex(mask.shape):
        if mask[idx]:
            total += up[idx]
            count += 1
    return total / count


def central_difference(f, x, coords, h=1e-3):
    """d f / d x at the given flat coordinates, f evaluated in float64."""
    x = np.asarray(x, dtype=np.float64)
    out = []
    for c in coords:
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[c] += h
        xm[c] -= h
        out.append((f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h))
    return np.array(out)
