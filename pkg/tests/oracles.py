"""Reference computations kept independent of the engine under test."""

import math

import numpy as np


def central_diff(f, x: np.ndarray, idx, h: float = 1e-4) -> float:
    """Central finite difference of scalar ``f`` w.r.t. ``x[idx]`` (x mutated in place, restored)."""
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def naive_conv2d(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = b[oi]
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[ni, ci, i * stride + di, j * stride + dj] * w[oi, ci, di, dj]
                    out[ni, oi, i, j] = acc
    return out


def naive_bilinear(img, out_h, out_w):
    """Per-output-pixel bilinear sample with half-pixel centers and edge clamping."""
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            sy = max((i + 0.5) * h / out_h - 0.5, 0.0)
            sx = max((j + 0.5) * w / out_w - 0.5, 0.0)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            y0, x0 = min(y0, h - 1), min(x0, w - 1)
            fy, fx = sy - y0, sx - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def boundary_pixels(mask):
    """4-connected inner boundary: foreground pixels with a background (or outside) 4-neighbour."""
    h, w = len(mask), len(mask[0])
    pts = set()
    for i in range(h):
        for j in range(w):
            if not mask[i][j]:
                continue
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ni, nj = i + di, j + dj
                if not (0 <= ni < h and 0 <= nj < w) or not mask[ni][nj]:
                    pts.add((i, j))
                    break
    return pts


def f_measure_enum(pred, gt, radius):
    bp, bg = boundary_pixels(pred), boundary_pixels(gt)
    if not bp and not bg:
        return 1.0
    if not bp or not bg:
        return 0.0

    def near(p, pts):
        return any(max(abs(p[0] - q[0]), abs(p[1] - q[1])) <= radius for q in pts)

    prec = sum(near(p, bg) for p in bp) / len(bp)
    rec = sum(near(q, bp) for q in bg) / len(bg)
    if prec + rec == 0:
        return 0.0
    return 2 * prec * rec / (prec + rec)


def iou_enum(pred, gt):
    inter = union = 0
    for row_p, row_g in zip(pred, gt):
        for p, g in zip(row_p, row_g):
            inter += bool(p) and bool(g)
            union += bool(p) or bool(g)
    return 1.0 if union == 0 else inter / union
