"""Hot numeric kernels with two interchangeable backends.

Every kernel exists as a numba ``@njit`` loop and as a vectorised numpy
function. The numba path is used when numba imports and ``SVLL_NUMBA`` is not
set to ``0``; ``SVLL_NUMBA=0`` forces pure numpy. Both paths take and return
plain ndarrays, so callers never know which one ran.
"""
import math
import os

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SVLL_NUMBA", "1") != "0"

_GELU_C = math.sqrt(2.0 / math.pi)


# ---------------------------------------------------------------- numpy path

def gelu_forward_np(x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_backward_np(x, g):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def layer_norm_forward_np(x2, gamma, beta, eps):
    mu = x2.mean(axis=1, keepdims=True)
    xc = x2 - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_backward_np(g2, xhat, rstd, gamma):
    dxhat = g2 * gamma
    dx = (dxhat - dxhat.mean(axis=1, keepdims=True)
          - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)) * rstd[:, None]
    dgamma = (g2 * xhat).sum(axis=0)
    dbeta = g2.sum(axis=0)
    return dx, dgamma, dbeta


def bilinear_resize_np(img, out_h, out_w):
    h, w = img.shape[:2]
    # half-pixel centres, edge clamped
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def rank_queries_np(dist, q_ids, g_ids, q_cams, g_cams):
    """Per-query AP and first-hit rank under the cross-camera protocol.

    Returns ``(ap, first_hit, valid)``; ``first_hit`` is the 0-based rank of
    the first relevant entry among valid gallery entries (-1 if none).
    """
    order = np.argsort(dist, axis=1, kind="stable")
    gid = g_ids[order]
    gcam = g_cams[order]
    keep = ~((gid == q_ids[:, None]) & (gcam == q_cams[:, None])) & (gid != -1)
    rel = (gid == q_ids[:, None]) & keep
    n_q = dist.shape[0]
    ap = np.zeros(n_q)
    first = np.full(n_q, -1, dtype=np.int64)
    valid = rel.any(axis=1)
    for i in np.flatnonzero(valid):
        r = rel[i][keep[i]]
        hits = np.flatnonzero(r)
        ap[i] = np.mean(np.arange(1, hits.size + 1) / (hits + 1.0))
        first[i] = hits[0]
    return ap, first, valid


def render_rects_np(canvas, rects, colors):
    for (t, l, h, w), c in zip(rects, colors):
        canvas[t:t + h, l:l + w] = c
    return canvas


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _gelu_forward_nb(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.size):
            v = flat[i]
            out[i] = 0.5 * v * (1.0 + math.tanh(_GELU_C * (v + 0.044715 * v * v * v)))
        return out.reshape(x.shape)

    @njit(cache=True)
    def _gelu_backward_nb(x, g):
        fx = x.ravel()
        fg = g.ravel()
        out = np.empty_like(fx)
        for i in range(fx.size):
            v = fx[i]
            t = math.tanh(_GELU_C * (v + 0.044715 * v * v * v))
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
            out[i] = fg[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
        return out.reshape(x.shape)

    @njit(cache=True)
    def _layer_norm_forward_nb(x2, gamma, beta, eps):
        n, d = x2.shape
        out = np.empty_like(x2)
        xhat = np.empty_like(x2)
        rstd = np.empty(n, dtype=x2.dtype)
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x2[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x2[i, j] - mu
                var += c * c
            var /= d
            r = 1.0 / math.sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                xh = (x2[i, j] - mu) * r
                xhat[i, j] = xh
                out[i, j] = xh * gamma[j] + beta[j]
        return out, xhat, rstd

    @njit(cache=True)
    def _layer_norm_backward_nb(g2, xhat, rstd, gamma):
        n, d = g2.shape
        dx = np.empty_like(g2)
        dgamma = np.zeros(d, dtype=g2.dtype)
        dbeta = np.zeros(d, dtype=g2.dtype)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                dxh = g2[i, j] * gamma[j]
                m1 += dxh
                m2 += dxh * xhat[i, j]
                dgamma[j] += g2[i, j] * xhat[i, j]
                dbeta[j] += g2[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                dx[i, j] = (g2[i, j] * gamma[j] - m1 - xhat[i, j] * m2) * rstd[i]
        return dx, dgamma, dbeta

    @njit(cache=True)
    def _bilinear_resize_nb(img, out_h, out_w):
        h, w, c = img.shape
        out = np.empty((out_h, out_w, c), dtype=np.float64)
        sy = h / out_h
        sx = w / out_w
        for i in range(out_h):
            y = min(max((i + 0.5) * sy - 0.5, 0.0), h - 1.0)
            y0 = int(math.floor(y))
            y1 = min(y0 + 1, h - 1)
            wy = y - y0
            for j in range(out_w):
                x = min(max((j + 0.5) * sx - 0.5, 0.0), w - 1.0)
                x0 = int(math.floor(x))
                x1 = min(x0 + 1, w - 1)
                wx = x - x0
                for k in range(c):
                    top = img[y0, x0, k] * (1 - wx) + img[y0, x1, k] * wx
                    bot = img[y1, x0, k] * (1 - wx) + img[y1, x1, k] * wx
                    out[i, j, k] = top * (1 - wy) + bot * wy
        return out

    @njit(cache=True)
    def _rank_queries_nb(dist, q_ids, g_ids, q_cams, g_cams):
        n_q, n_g = dist.shape
        ap = np.zeros(n_q)
        first = np.full(n_q, -1, dtype=np.int64)
        valid = np.zeros(n_q, dtype=np.bool_)
        for i in range(n_q):
            order = np.argsort(dist[i], kind="mergesort")
            pos = 0
            hits = 0
            acc = 0.0
            for j in range(n_g):
                g = order[j]
                if g_ids[g] == -1:
                    continue
                if g_ids[g] == q_ids[i] and g_cams[g] == q_cams[i]:
                    continue
                pos += 1
                if g_ids[g] == q_ids[i]:
                    hits += 1
                    acc += hits / pos
                    if hits == 1:
                        first[i] = pos - 1
            if hits > 0:
                valid[i] = True
                ap[i] = acc / hits
        return ap, first, valid

    @njit(cache=True)
    def _render_rects_nb(canvas, rects, colors):
        H, W, C = canvas.shape
        for r in range(rects.shape[0]):
            t, l, h, w = rects[r, 0], rects[r, 1], rects[r, 2], rects[r, 3]
            for y in range(max(t, 0), min(t + h, H)):
                for x in range(max(l, 0), min(l + w, W)):
                    for k in range(C):
                        canvas[y, x, k] = colors[r, k]
        return canvas


# ---------------------------------------------------------------- dispatch

def gelu_forward(x):
    if USE_NUMBA:
        return _gelu_forward_nb(np.ascontiguousarray(x))
    return gelu_forward_np(x)


def gelu_backward(x, g):
    if USE_NUMBA:
        return _gelu_backward_nb(np.ascontiguousarray(x), np.ascontiguousarray(g))
    return gelu_backward_np(x, g)


def layer_norm_forward(x2, gamma, beta, eps):
    if USE_NUMBA:
        return _layer_norm_forward_nb(np.ascontiguousarray(x2), gamma, beta, eps)
    return layer_norm_forward_np(x2, gamma, beta, eps)


def layer_norm_backward(g2, xhat, rstd, gamma):
    if USE_NUMBA:
        return _layer_norm_backward_nb(np.ascontiguousarray(g2), xhat, rstd, gamma)
    return layer_norm_backward_np(g2, xhat, rstd, gamma)


def bilinear_resize(img, out_h, out_w):
    img = np.asarray(img, dtype=np.float64)
    if USE_NUMBA:
        return _bilinear_resize_nb(np.ascontiguousarray(img), int(out_h), int(out_w))
    return bilinear_resize_np(img, out_h, out_w)


def rank_queries(dist, q_ids, g_ids, q_cams, g_cams):
    args = (np.ascontiguousarray(dist, dtype=np.float64),
            np.asarray(q_ids, dtype=np.int64), np.asarray(g_ids, dtype=np.int64),
            np.asarray(q_cams, dtype=np.int64), np.asarray(g_cams, dtype=np.int64))
    if USE_NUMBA:
        return _rank_queries_nb(*args)
    return rank_queries_np(*args)


def render_rects(canvas, rects, colors):
    """Paint axis-aligned ``(top, left, h, w)`` rectangles in order, clipped."""
    rects = np.asarray(rects, dtype=np.int64).reshape(-1, 4)
    colors = np.asarray(colors, dtype=canvas.dtype).reshape(-1, canvas.shape[2])
    if USE_NUMBA:
        return _render_rects_nb(canvas, rects, colors)
    clipped = []
    for t, l, h, w in rects:
        t0, l0 = max(t, 0), max(l, 0)
        clipped.append((t0, l0, max(t + h - t0, 0), max(l + w - l0, 0)))
    return render_rects_np(canvas, clipped, colors)


def backend():
    return "numba" if USE_NUMBA else "numpy"
