"""Reference S-measure and max E-measure for the frozen 8x8 regression cases.

Written directly from the published MATLAB definitions with numpy, without
consulting the Rust implementation. Run: python3 tools/metrics_oracle.py
"""
import numpy as np

EPS = np.finfo(np.float64).eps


def case_maps(case):
    i, j = np.mgrid[0:8, 0:8]
    if case == 0:
        pred = ((i * 37 + j * 11) % 17) / 16.0
        gt = ((i - 3) ** 2 + (j - 4) ** 2 <= 6).astype(float)
    elif case == 1:
        pred = ((i * 5 + j * 3) % 16) / 15.0
        gt = ((i >= 1) & (i <= 3) & (j >= 4) & (j <= 6)).astype(float)
    elif case == 2:
        gt = ((i + j) >= 9).astype(float)
        pred = np.clip(0.1 + 0.8 * gt - 0.05 * ((i * 3 + j * 7) % 5), 0.0, 1.0)
    else:
        gt = ((i == 6) & (j == 1)).astype(float)
        pred = ((i * j) % 9) / 8.0
    return pred, gt > 0.5


def obj(values):
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + EPS)


def s_object(pred, gt):
    u = gt.mean()
    return u * obj(pred[gt]) + (1 - u) * obj(1.0 - pred[~gt])


def centroid(gt):
    rows, cols = gt.shape
    total = gt.sum()
    if total == 0:
        return int(np.floor(cols / 2 + 0.5)), int(np.floor(rows / 2 + 0.5))
    xs = (gt.sum(axis=0) * np.arange(1, cols + 1)).sum() / total
    ys = (gt.sum(axis=1) * np.arange(1, rows + 1)).sum() / total
    # MATLAB round: half away from zero
    return int(np.floor(xs + 0.5)), int(np.floor(ys + 0.5))


def ssim(p, g):
    n = p.size
    x, y = p.mean(), g.mean()
    sx = ((p - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((g - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((p - x) * (g - y)).sum() / (n - 1 + EPS)
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def s_region(pred, gt):
    X, Y = centroid(gt)
    h, w = gt.shape
    area = h * w
    g = gt.astype(float)
    parts = [
        (pred[:Y, :X], g[:Y, :X], X * Y / area),
        (pred[:Y, X:], g[:Y, X:], (w - X) * Y / area),
        (pred[Y:, :X], g[Y:, :X], X * (h - Y) / area),
    ]
    w4 = 1 - sum(p[2] for p in parts)
    parts.append((pred[Y:, X:], g[Y:, X:], w4))
    return sum(wt * ssim(p, q) for p, q, wt in parts if p.size > 0)


def s_measure(pred, gt):
    y = gt.mean()
    if y == 0:
        return max(1 - pred.mean(), 0.0)
    if y == 1:
        return max(pred.mean(), 0.0)
    return max(0.5 * s_object(pred, gt) + 0.5 * s_region(pred, gt), 0.0)


def e_binary(fm, gt):
    fm = fm.astype(float)
    g = gt.astype(float)
    if g.sum() == 0:
        return (1 - fm).mean()
    if g.sum() == g.size:
        return fm.mean()
    pf, pg = fm - fm.mean(), g - g.mean()
    align = 2 * pf * pg / (pf * pf + pg * pg + EPS)
    return (((1 + align) ** 2) / 4).mean()


def e_max(pred, gt):
    return max(e_binary(pred > k / 255.0, gt) for k in range(256))


if __name__ == "__main__":
    for c in range(4):
        p, g = case_maps(c)
        print(f"case {c}: S = {s_measure(p, g)!r}  Emax = {e_max(p, g)!r}")
