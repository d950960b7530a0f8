"""Independent oracles shared across test modules.

Everything here is deliberately written without reference to the library's
own kernels: plain loops, finite differences, exhaustive scans. Keep it that
way so the tests stay a second, independent route to the same answers.
"""

from __future__ import annotations

import math

import numpy as np

from cmfdet import tensor as T


def finite_difference_grads(fn, arrays, step=1e-4):
    """Central-difference gradients of a scalar function of numpy arrays."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = fn(arrays)
            flat[i] = keep - step
            lo = fn(arrays)
            flat[i] = keep
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def gradcheck(build_loss, arrays, step=1e-4, tol=1e-4):
    """Compare tape gradients against central finite differences.

    ``build_loss`` maps a list of float64 Tensors to a scalar Tensor; the
    numeric twin re-evaluates it on perturbed copies. Relative error uses
    |a - n| / max(1, |a|, |n|) per element.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [T.Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    loss = build_loss(tensors)
    T.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def numeric_eval(arrs):
        ts = [T.Tensor(a.copy(), dtype=np.float64) for a in arrs]
        return build_loss(ts).item()

    numeric = finite_difference_grads(numeric_eval, arrays, step=step)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    assert worst < tol, f"gradient mismatch, worst relative error {worst:.3e}"
    return worst


def matmul_loops(a, b):
    """Naive triple-loop matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def softmax_scalar(values):
    """High-precision softmax of a 1-D sequence via math.exp."""
    mx = max(values)
    es = [math.exp(v - mx) for v in values]
    z = sum(es)
    return [e / z for e in es]


def gelu_scalar(x):
    """Direct evaluation of the tanh-form approximation."""
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def conv2d_loops(x, kernel, stride=1, padding=0):
    """Sliding-window cross-correlation with explicit loops."""
    cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    xp = np.zeros((cin, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((cout, ho, wo), dtype=np.float64)
    for co in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ci in range(cin):
                    for di in range(kh):
                        for dj in range(kw):
                            acc += float(xp[ci, i * stride + di, j * stride + dj]) * float(kernel[co, ci, di, dj])
                out[co, i, j] = acc
    return out


def block_mean_loops(x, p):
    """Adaptive average pooling by direct window means."""
    c, h, w = x.shape
    out = np.zeros((c, p, p), dtype=np.float64)
    for ci in range(c):
        for i in range(p):
            for j in range(p):
                y0, y1 = (i * h) // p, ((i + 1) * h) // p
                x0, x1 = (j * w) // p, ((j + 1) * w) // p
                out[ci, i, j] = float(np.mean(x[ci, y0:y1, x0:x1]))
    return out


def bilinear_loops(x, out_h, out_w):
    """Per-pixel evaluation of the half-pixel-center interpolation formula."""
    c, h, w = x.shape
    out = np.zeros((c, out_h, out_w), dtype=np.float64)
    for ci in range(c):
        for i in range(out_h):
            for j in range(out_w):
                sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
                sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
                y0, x0 = int(math.floor(sy)), int(math.floor(sx))
                y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
                fy, fx = sy - y0, sx - x0
                out[ci, i, j] = (
                    x[ci, y0, x0] * (1 - fy) * (1 - fx)
                    + x[ci, y0, x1] * (1 - fy) * fx
                    + x[ci, y1, x0] * fy * (1 - fx)
                    + x[ci, y1, x1] * fy * fx
                )
    return out


def iou_floats(a, b):
    """Plain-float IoU of two (x1, y1, x2, y2) boxes."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def giou_floats(a, b):
    """Plain-float GIoU: IoU minus enclosing-hull penalty."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    hull = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    return inter / union - (hull - union) / hull
