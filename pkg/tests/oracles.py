"""Independent straight-line oracles used by the test suite.

Everything here is written as directly as possible (quadruple loops, explicit
window sums) and shares no code with the library; these are the semantic
ground truths the fast implementations are checked against.
"""

import numpy as np


def conv2d_loops(x, w, b=None, padding=0):
    """Direct-loop cross-correlation, stride 1."""
    n, ci, h, wi = x.shape
    co, ci2, k, k2 = w.shape
    assert ci == ci2 and k == k2
    if padding:
        xp = np.zeros((n, ci, h + 2 * padding, wi + 2 * padding), dtype=x.dtype)
        xp[:, :, padding : padding + h, padding : padding + wi] = x
    else:
        xp = x
    ho = h + 2 * padding - k + 1
    wo = wi + 2 * padding - k + 1
    out = np.zeros((n, co, ho, wo), dtype=x.dtype)
    for nn in range(n):
        for oo in range(co):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ii in range(ci):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[nn, ii, y + u, xx + v] * w[oo, ii, u, v]
                    out[nn, oo, y, xx] = acc + (b[oo] if b is not None else 0.0)
    return out


def conv_transpose2d_loops(x, w, b=None):
    """Direct-loop adjoint convolution, stride 1, padding 0.

    ``w`` has shape (C_in, C_out, k, k); out[n, o, y, x] sums
    x[n, i, y-u, x-v] * w[i, o, u, v] over valid (i, u, v).
    """
    n, ci, h, wi = x.shape
    ci2, co, k, k2 = w.shape
    assert ci == ci2 and k == k2
    ho, wo = h + k - 1, wi + k - 1
    out = np.zeros((n, co, ho, wo), dtype=x.dtype)
    for nn in range(n):
        for oo in range(co):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ii in range(ci):
                        for u in range(k):
                            for v in range(k):
                                sy, sx = y - u, xx - v
                                if 0 <= sy < h and 0 <= sx < wi:
                                    acc += x[nn, ii, sy, sx] * w[ii, oo, u, v]
                    out[nn, oo, y, xx] = acc + (b[oo] if b is not None else 0.0)
    return out


def ssim_loops(x, y, peak=1.0, window_size=11, sigma=1.5):
    """Windowed structural similarity via explicit per-window sums."""
    h, w = x.shape
    half = window_size // 2
    coords = np.arange(window_size) - half
    g1 = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g1, g1)
    win = win / win.sum()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    values = []
    for top in range(h - window_size + 1):
        for left in range(w - window_size + 1):
            px = x[top : top + window_size, left : left + window_size]
            py = y[top : top + window_size, left : left + window_size]
            mx = float((win * px).sum())
            my = float((win * py).sum())
            vx = float((win * px * px).sum()) - mx * mx
            vy = float((win * py * py).sum()) - my * my
            cxy = float((win * px * py).sum()) - mx * my
            num = (2 * mx * my + c1) * (2 * cxy + c2)
            den = (mx * mx + my * my + c1) * (vx + vy + c2)
            values.append(num / den)
    return float(np.mean(values))


def mmhca_forward_loops(x, conv_ws, conv_bs, deconv_ws, deconv_bs):
    """Straight-line multi-head conv attention forward, no graph, no library code.

    Per head: conv (padding 0) -> relu -> adjoint conv back to input size;
    head outputs are summed, squashed with a sigmoid, and gate the input.
    Returns (gated, attention).
    """
    total = np.zeros_like(x)
    for cw, cb, dw, db in zip(conv_ws, conv_bs, deconv_ws, deconv_bs):
        z = conv2d_loops(x, cw, cb, padding=0)
        z = np.maximum(z, 0.0)
        total += conv_transpose2d_loops(z, dw, db)
    att = 1.0 / (1.0 + np.exp(-total))
    return x * att, att


def nearest_upscale_model(scale):
    """A dihedral-equivariant toy 'model': nearest-neighbour upscaling.

    Rotating/flipping the input and un-rotating the output commutes exactly,
    so the geometric self-ensemble of this model must equal its plain output.
    """

    def forward(lrs):
        x = lrs[0]
        return np.repeat(np.repeat(x, scale, axis=2), scale, axis=3)

    return forward
