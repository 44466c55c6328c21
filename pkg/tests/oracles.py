"""Independent reference implementations used as test oracles.

Everything here deliberately avoids the package's vectorized code paths:
convolution is explicit loop nests, the linear solver is hand-rolled
Gauss-Jordan, polygon fill is a classic scanline pass. Slow but obviously
correct at toy scale.
"""

from __future__ import annotations

import math

import numpy as np

from prunetect.nn import (
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool,
    ReLU,
)


# ---------------------------------------------------------------------------
# Naive forward pass (loop nests)
# ---------------------------------------------------------------------------

def naive_conv2d(x, layer):
    n, c, h, w = x.shape
    p, s = layer.padding, layer.stride
    kh, kw = layer.kernel_h, layer.kernel_w
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    xp[:, :, p:p + h, p:p + w] = x
    oh = (h + 2 * p - kh) // s + 1
    ow = (w + 2 * p - kw) // s + 1
    y = np.zeros((n, layer.out_channels, oh, ow))
    for ni in range(n):
        for o in range(layer.out_channels):
            for i in range(oh):
                for j in range(ow):
                    acc = layer.bias[o]
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += layer.weight[o, ci, ki, kj] * xp[ni, ci, i * s + ki, j * s + kj]
                    y[ni, o, i, j] = acc
    return y


def naive_batchnorm(x, layer):
    y = np.zeros_like(x)
    for ci in range(x.shape[1]):
        scale = layer.gamma[ci] / math.sqrt(layer.running_var[ci] + layer.epsilon)
        y[:, ci] = (x[:, ci] - layer.running_mean[ci]) * scale + layer.beta[ci]
    return y


def naive_maxpool(x, layer):
    n, c, h, w = x.shape
    k, s = layer.window, layer.stride
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    y = np.zeros((n, c, oh, ow))
    for ni in range(n):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    y[ni, ci, i, j] = x[ni, ci, i * s:i * s + k, j * s:j * s + k].max()
    return y


def naive_forward(model, batch):
    x = np.asarray(batch, dtype=np.float64)
    for layer in model.layers:
        if isinstance(layer, Conv2D):
            x = naive_conv2d(x, layer)
        elif isinstance(layer, BatchNorm):
            x = naive_batchnorm(x, layer)
        elif isinstance(layer, ReLU):
            x = np.where(x > 0, x, 0.0)
        elif isinstance(layer, MaxPool):
            x = naive_maxpool(x, layer)
        elif isinstance(layer, GlobalAvgPool):
            x = x.mean(axis=(2, 3))
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dense):
            y = np.zeros((x.shape[0], layer.out_features))
            for ni in range(x.shape[0]):
                for o in range(layer.out_features):
                    y[ni, o] = layer.bias[o] + float(np.dot(layer.weight[o], x[ni]))
            x = y
        else:
            raise TypeError(type(layer).__name__)
    return x


# ---------------------------------------------------------------------------
# Finite-difference gradients
# ---------------------------------------------------------------------------

def central_difference(loss_fn, array, flat_index, h=1e-5):
    """d loss / d array[flat_index] by central differences."""
    flat = array.reshape(-1)
    orig = flat[flat_index]
    flat[flat_index] = orig + h
    lp = loss_fn()
    flat[flat_index] = orig - h
    lm = loss_fn()
    flat[flat_index] = orig
    return (lp - lm) / (2 * h)


# ---------------------------------------------------------------------------
# Parameter counting from declared dimensions (never from array sizes)
# ---------------------------------------------------------------------------

def declared_param_count(model):
    total = 0
    for layer in model.layers:
        if isinstance(layer, Conv2D):
            total += layer.out_channels * layer.in_channels * layer.kernel_h * layer.kernel_w
            total += layer.out_channels
        elif isinstance(layer, BatchNorm):
            total += 4 * layer.channels
        elif isinstance(layer, Dense):
            total += layer.out_features * layer.in_features + layer.out_features
    return total


# ---------------------------------------------------------------------------
# Scanline polygon rasterizer (even-odd), pixel centers at (col+.5, row+.5)
# ---------------------------------------------------------------------------

def scanline_polygon_pixels(polygon, height, width):
    """Set of (row, col) pixels whose centers fall inside the polygon."""
    inside = set()
    nv = len(polygon)
    for row in range(height):
        y = row + 0.5
        crossings = []
        for k in range(nv):
            x1, y1 = polygon[k]
            x2, y2 = polygon[(k + 1) % nv]
            if (y1 > y) != (y2 > y):
                crossings.append(x1 + (y - y1) * (x2 - x1) / (y2 - y1))
        crossings.sort()
        for a, b in zip(crossings[::2], crossings[1::2]):
            for col in range(width):
                if a <= col + 0.5 < b:
                    inside.add((row, col))
    return inside


# ---------------------------------------------------------------------------
# Normal-equations solve via hand-rolled Gauss-Jordan (partial pivoting)
# ---------------------------------------------------------------------------

def gauss_solve(a, b):
    a = [list(map(float, row)) for row in a]
    b = list(map(float, b))
    n = len(b)
    for col in range(n):
        pivot = max(range(col, n), key=lambda r: abs(a[r][col]))
        if abs(a[pivot][col]) < 1e-300:
            raise ZeroDivisionError("singular system")
        a[col], a[pivot] = a[pivot], a[col]
        b[col], b[pivot] = b[pivot], b[col]
        inv = 1.0 / a[col][col]
        a[col] = [v * inv for v in a[col]]
        b[col] *= inv
        for r in range(n):
            if r != col and a[r][col] != 0.0:
                f = a[r][col]
                a[r] = [rv - f * cv for rv, cv in zip(a[r], a[col])]
                b[r] -= f * b[col]
    return b


def normal_equations_fit(vectors, labels):
    """OLS coefficients for labels on (1, vector) via explicit normal equations."""
    n = len(vectors)
    d = len(vectors[0]) + 1
    x = [[1.0] + list(map(float, v)) for v in vectors]
    xtx = [[sum(x[r][i] * x[r][j] for r in range(n)) for j in range(d)] for i in range(d)]
    xty = [sum(x[r][i] * float(labels[r]) for r in range(n)) for i in range(d)]
    return gauss_solve(xtx, xty)


# ---------------------------------------------------------------------------
# Rank correlation (3+ points) for the timing-trend check
# ---------------------------------------------------------------------------

def spearman_rho(xs, ys):
    def ranks(vals):
        order = sorted(range(len(vals)), key=lambda i: vals[i])
        r = [0.0] * len(vals)
        i = 0
        while i < len(order):
            j = i
            while j + 1 < len(order) and vals[order[j + 1]] == vals[order[i]]:
                j += 1
            avg = (i + j) / 2.0
            for k in range(i, j + 1):
                r[order[k]] = avg
            i = j + 1
        return r
    rx, ry = ranks(list(xs)), ranks(list(ys))
    mx = sum(rx) / len(rx)
    my = sum(ry) / len(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))
    if den == 0:
        return 0.0
    return num / den
