"""Hot array kernels: bilinear resize, bilinear sampling, strided 3x3 conv.

Every kernel comes in two flavors, a numba @njit build and a vectorized
numpy build, selected once via :mod:`vismix.backend`. All kernels work on
batched, C-contiguous float64 arrays in (N, H, W, C) layout and implement
both the forward map and its vector-Jacobian product.

Interpolation uses the align-corners convention: output corner samples
coincide with input corners, and a length-1 output axis samples the input
center. Forward interpolation is written in lerp form ``a + t*(b - a)`` so
constant inputs reproduce exactly.
"""

import numpy as np

from .backend import USE_NUMBA

if USE_NUMBA:
    from numba import njit


def _axis_coords(in_dim, out_dim):
    """Source coordinates for one resized axis: (lo index, hi index, frac)."""
    if out_dim == 1:
        src = np.array([0.5 * (in_dim - 1)])
    else:
        src = np.arange(out_dim) * ((in_dim - 1) / (out_dim - 1))
    lo = np.floor(src).astype(np.int64)
    np.clip(lo, 0, in_dim - 1, out=lo)
    hi = np.minimum(lo + 1, in_dim - 1)
    return lo, hi, src - lo


# ---------------------------------------------------------------------------
# pure-numpy kernels


def _resize_fwd_np(src, out_h, out_w):
    n, h, w, c = src.shape
    y0, y1, ty = _axis_coords(h, out_h)
    x0, x1, tx = _axis_coords(w, out_w)
    a00 = src[:, y0[:, None], x0[None, :], :]
    a01 = src[:, y0[:, None], x1[None, :], :]
    a10 = src[:, y1[:, None], x0[None, :], :]
    a11 = src[:, y1[:, None], x1[None, :], :]
    tx = tx[None, None, :, None]
    ty = ty[None, :, None, None]
    top = a00 + tx * (a01 - a00)
    bot = a10 + tx * (a11 - a10)
    return top + ty * (bot - top)


def _resize_bwd_np(grad_out, in_h, in_w):
    n, oh, ow, c = grad_out.shape
    y0, y1, ty = _axis_coords(in_h, oh)
    x0, x1, tx = _axis_coords(in_w, ow)
    grad_in = np.zeros((n, in_h, in_w, c))
    tx = tx[None, None, :, None]
    ty = ty[None, :, None, None]
    bidx = np.arange(n)[:, None, None]
    for yi, wy in ((y0, 1.0 - ty), (y1, ty)):
        for xi, wx in ((x0, 1.0 - tx), (x1, tx)):
            np.add.at(grad_in, (bidx, yi[None, :, None], xi[None, None, :]),
                      wy * wx * grad_out)
    return grad_in


def _clamped_cell(coord, dim):
    c = np.clip(coord, 0.0, dim - 1.0)
    lo = np.minimum(np.floor(c), dim - 1).astype(np.int64)
    np.clip(lo, 0, dim - 1, out=lo)
    hi = np.minimum(lo + 1, dim - 1)
    inside = (coord > 0.0) & (coord < dim - 1.0)
    return lo, hi, c - lo, inside


def _sample_fwd_np(src, rows, cols):
    n, h, w, c = src.shape
    y0, y1, ty, _ = _clamped_cell(rows, h)
    x0, x1, tx, _ = _clamped_cell(cols, w)
    bidx = np.arange(n)[:, None]
    a00 = src[bidx, y0, x0]
    a01 = src[bidx, y0, x1]
    a10 = src[bidx, y1, x0]
    a11 = src[bidx, y1, x1]
    tx = tx[..., None]
    ty = ty[..., None]
    top = a00 + tx * (a01 - a00)
    bot = a10 + tx * (a11 - a10)
    return top + ty * (bot - top)


def _sample_bwd_np(src, rows, cols, grad_out):
    n, h, w, c = src.shape
    y0, y1, ty, in_y = _clamped_cell(rows, h)
    x0, x1, tx, in_x = _clamped_cell(cols, w)
    bidx = np.arange(n)[:, None]
    a00 = src[bidx, y0, x0]
    a01 = src[bidx, y0, x1]
    a10 = src[bidx, y1, x0]
    a11 = src[bidx, y1, x1]
    txe = tx[..., None]
    tye = ty[..., None]
    grad_src = np.zeros_like(src)
    for yi, wy in ((y0, 1.0 - tye), (y1, tye)):
        for xi, wx in ((x0, 1.0 - txe), (x1, txe)):
            np.add.at(grad_src, (bidx, yi, xi), wy * wx * grad_out)
    # d/dty = x-lerped bottom row minus top row; zero where the clamp bites
    top = a00 + txe * (a01 - a00)
    bot = a10 + txe * (a11 - a10)
    grad_rows = np.sum(grad_out * (bot - top), axis=-1) * in_y
    dx = (1.0 - tye) * (a01 - a00) + tye * (a11 - a10)
    grad_cols = np.sum(grad_out * dx, axis=-1) * in_x
    return grad_src, grad_rows, grad_cols


def _conv3x3s2_fwd_np(x, w, b):
    n, h, wd, ci = x.shape
    co = w.shape[3]
    oh, ow = h // 2, wd // 2
    xp = np.zeros((n, h + 2, wd + 2, ci))
    xp[:, 1:-1, 1:-1, :] = x
    out = np.tile(b, (n, oh, ow, 1))
    w2 = w.reshape(9, ci, co)
    k = 0
    for ky in range(3):
        for kx in range(3):
            patch = xp[:, ky:ky + 2 * oh:2, kx:kx + 2 * ow:2, :]
            out += patch.reshape(-1, ci).dot(w2[k]).reshape(n, oh, ow, co)
            k += 1
    return out


def _conv3x3s2_bwd_np(x, w, grad_out):
    n, h, wd, ci = x.shape
    co = w.shape[3]
    oh, ow = h // 2, wd // 2
    xp = np.zeros((n, h + 2, wd + 2, ci))
    xp[:, 1:-1, 1:-1, :] = x
    go2 = grad_out.reshape(-1, co)
    grad_w = np.empty_like(w)
    grad_xp = np.zeros((n, h + 2, wd + 2, ci))
    for ky in range(3):
        for kx in range(3):
            patch = xp[:, ky:ky + 2 * oh:2, kx:kx + 2 * ow:2, :]
            grad_w[ky, kx] = patch.reshape(-1, ci).T.dot(go2)
            # stride 2 makes each (ky,kx) slice hit disjoint cells
            grad_xp[:, ky:ky + 2 * oh:2, kx:kx + 2 * ow:2, :] += (
                go2.dot(w[ky, kx].T).reshape(n, oh, ow, ci))
    grad_b = go2.sum(axis=0)
    return grad_xp[:, 1:-1, 1:-1, :], grad_w, grad_b


# ---------------------------------------------------------------------------
# numba kernels

if USE_NUMBA:

    @njit(cache=True)
    def _resize_fwd_nb(src, out_h, out_w):
        n, h, w, c = src.shape
        out = np.empty((n, out_h, out_w, c))
        sy = 0.0 if out_h == 1 else (h - 1) / (out_h - 1)
        sx = 0.0 if out_w == 1 else (w - 1) / (out_w - 1)
        for oy in range(out_h):
            ry = 0.5 * (h - 1) if out_h == 1 else oy * sy
            y0 = min(int(ry), h - 1)
            y1 = min(y0 + 1, h - 1)
            ty = ry - y0
            for ox in range(out_w):
                rx = 0.5 * (w - 1) if out_w == 1 else ox * sx
                x0 = min(int(rx), w - 1)
                x1 = min(x0 + 1, w - 1)
                tx = rx - x0
                for b in range(n):
                    for ch in range(c):
                        a00 = src[b, y0, x0, ch]
                        a01 = src[b, y0, x1, ch]
                        a10 = src[b, y1, x0, ch]
                        a11 = src[b, y1, x1, ch]
                        top = a00 + tx * (a01 - a00)
                        bot = a10 + tx * (a11 - a10)
                        out[b, oy, ox, ch] = top + ty * (bot - top)
        return out

    @njit(cache=True)
    def _resize_bwd_nb(grad_out, in_h, in_w):
        n, oh, ow, c = grad_out.shape
        grad_in = np.zeros((n, in_h, in_w, c))
        sy = 0.0 if oh == 1 else (in_h - 1) / (oh - 1)
        sx = 0.0 if ow == 1 else (in_w - 1) / (ow - 1)
        for oy in range(oh):
            ry = 0.5 * (in_h - 1) if oh == 1 else oy * sy
            y0 = min(int(ry), in_h - 1)
            y1 = min(y0 + 1, in_h - 1)
            ty = ry - y0
            for ox in range(ow):
                rx = 0.5 * (in_w - 1) if ow == 1 else ox * sx
                x0 = min(int(rx), in_w - 1)
                x1 = min(x0 + 1, in_w - 1)
                tx = rx - x0
                for b in range(n):
                    for ch in range(c):
                        g = grad_out[b, oy, ox, ch]
                        grad_in[b, y0, x0, ch] += (1 - ty) * (1 - tx) * g
                        grad_in[b, y0, x1, ch] += (1 - ty) * tx * g
                        grad_in[b, y1, x0, ch] += ty * (1 - tx) * g
                        grad_in[b, y1, x1, ch] += ty * tx * g
        return grad_in

    @njit(cache=True)
    def _sample_fwd_nb(src, rows, cols):
        n, h, w, c = src.shape
        p = rows.shape[1]
        out = np.empty((n, p, c))
        for b in range(n):
            for i in range(p):
                ry = min(max(rows[b, i], 0.0), h - 1.0)
                rx = min(max(cols[b, i], 0.0), w - 1.0)
                y0 = min(int(ry), h - 1)
                x0 = min(int(rx), w - 1)
                y1 = min(y0 + 1, h - 1)
                x1 = min(x0 + 1, w - 1)
                ty = ry - y0
                tx = rx - x0
                for ch in range(c):
                    a00 = src[b, y0, x0, ch]
                    a01 = src[b, y0, x1, ch]
                    a10 = src[b, y1, x0, ch]
                    a11 = src[b, y1, x1, ch]
                    top = a00 + tx * (a01 - a00)
                    bot = a10 + tx * (a11 - a10)
                    out[b, i, ch] = top + ty * (bot - top)
        return out

    @njit(cache=True)
    def _sample_bwd_nb(src, rows, cols, grad_out):
        n, h, w, c = src.shape
        p = rows.shape[1]
        grad_src = np.zeros_like(src)
        grad_rows = np.zeros((n, p))
        grad_cols = np.zeros((n, p))
        for b in range(n):
            for i in range(p):
                ry = min(max(rows[b, i], 0.0), h - 1.0)
                rx = min(max(cols[b, i], 0.0), w - 1.0)
                in_y = 0.0 < rows[b, i] < h - 1.0
                in_x = 0.0 < cols[b, i] < w - 1.0
                y0 = min(int(ry), h - 1)
                x0 = min(int(rx), w - 1)
                y1 = min(y0 + 1, h - 1)
                x1 = min(x0 + 1, w - 1)
                ty = ry - y0
                tx = rx - x0
                gr = 0.0
                gc = 0.0
                for ch in range(c):
                    g = grad_out[b, i, ch]
                    a00 = src[b, y0, x0, ch]
                    a01 = src[b, y0, x1, ch]
                    a10 = src[b, y1, x0, ch]
                    a11 = src[b, y1, x1, ch]
                    grad_src[b, y0, x0, ch] += (1 - ty) * (1 - tx) * g
                    grad_src[b, y0, x1, ch] += (1 - ty) * tx * g
                    grad_src[b, y1, x0, ch] += ty * (1 - tx) * g
                    grad_src[b, y1, x1, ch] += ty * tx * g
                    top = a00 + tx * (a01 - a00)
                    bot = a10 + tx * (a11 - a10)
                    gr += g * (bot - top)
                    gc += g * ((1 - ty) * (a01 - a00) + ty * (a11 - a10))
                if in_y:
                    grad_rows[b, i] = gr
                if in_x:
                    grad_cols[b, i] = gc
        return grad_src, grad_rows, grad_cols

    @njit(cache=True)
    def _conv3x3s2_fwd_nb(x, w, b):
        n, h, wd, ci = x.shape
        co = w.shape[3]
        oh, ow = h // 2, wd // 2
        out = np.empty((n, oh, ow, co))
        for bi in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    for oc in range(co):
                        acc = b[oc]
                        for ky in range(3):
                            iy = 2 * oy + ky - 1
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(3):
                                ix = 2 * ox + kx - 1
                                if ix < 0 or ix >= wd:
                                    continue
                                for ic in range(ci):
                                    acc += x[bi, iy, ix, ic] * w[ky, kx, ic, oc]
                        out[bi, oy, ox, oc] = acc
        return out

    @njit(cache=True)
    def _conv3x3s2_bwd_nb(x, w, grad_out):
        n, h, wd, ci = x.shape
        co = w.shape[3]
        oh, ow = h // 2, wd // 2
        grad_x = np.zeros_like(x)
        grad_w = np.zeros_like(w)
        grad_b = np.zeros(co)
        for bi in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    for oc in range(co):
                        g = grad_out[bi, oy, ox, oc]
                        grad_b[oc] += g
                        for ky in range(3):
                            iy = 2 * oy + ky - 1
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(3):
                                ix = 2 * ox + kx - 1
                                if ix < 0 or ix >= wd:
                                    continue
                                for ic in range(ci):
                                    grad_w[ky, kx, ic, oc] += x[bi, iy, ix, ic] * g
                                    grad_x[bi, iy, ix, ic] += w[ky, kx, ic, oc] * g
        return grad_x, grad_w, grad_b

    resize_fwd = _resize_fwd_nb
    resize_bwd = _resize_bwd_nb
    sample_fwd = _sample_fwd_nb
    sample_bwd = _sample_bwd_nb
    conv3x3s2_fwd = _conv3x3s2_fwd_nb
    conv3x3s2_bwd = _conv3x3s2_bwd_nb
else:
    resize_fwd = _resize_fwd_np
    resize_bwd = _resize_bwd_np
    sample_fwd = _sample_fwd_np
    sample_bwd = _sample_bwd_np
    conv3x3s2_fwd = _conv3x3s2_fwd_np
    conv3x3s2_bwd = _conv3x3s2_bwd_np
