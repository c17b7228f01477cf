"""Convolution and pooling kernels on NCHW float64 arrays.

Each hot kernel has two implementations: a numba loop nest (``*_nb``) and a
vectorised numpy one (``*_np``). The public dispatchers pick the numba path
unless ``COVIDNET_DISABLE_NUMBA`` is set. Pointwise (1x1, stride 1, ungrouped)
convolutions always go through BLAS matmul, which beats either loop nest.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._jit import NUMBA_ENABLED, njit


def out_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _is_pointwise(w, stride, pad, groups):
    return w.shape[2] == 1 and w.shape[3] == 1 and stride == 1 and pad == 0 and groups == 1


def _is_depthwise(x, w, groups):
    return groups == x.shape[1] == w.shape[0] and w.shape[1] == 1


# --- pointwise (shared by both backends) -----------------------------------

def _pw_forward(x, w, b):
    n, c, h, wd = x.shape
    o = w.shape[0]
    out = np.matmul(w[:, :, 0, 0], x.reshape(n, c, h * wd))
    out += b[None, :, None]
    return out.reshape(n, o, h, wd)


def _pw_backward(x, w, g, need_input=True):
    n, c, h, wd = x.shape
    o = w.shape[0]
    g2 = g.reshape(n, o, h * wd)
    x2 = x.reshape(n, c, h * wd)
    gx = None
    if need_input:
        gx = np.matmul(np.ascontiguousarray(w[:, :, 0, 0].T), g2).reshape(x.shape)
    gw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
    return gx, gw


# --- numpy backend ----------------------------------------------------------

def _windows(xp, kh, kw, stride, ho, wo):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _im2col(xp, kh, kw, stride, ho, wo):
    """(N*Ho*Wo, C*kh*kw) patch matrix."""
    win = _windows(xp, kh, kw, stride, ho, wo)
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _slab(arr, i, j, stride, ho, wo):
    return arr[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride]


def conv2d_forward_np(x, w, b, stride, pad, groups):
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    ho, wo = out_size(h, kh, stride, pad), out_size(wd, kw, stride, pad)
    xp = _pad(x, pad)
    if _is_depthwise(x, w, groups):
        out = np.zeros((n, o, ho, wo))
        for i in range(kh):
            for j in range(kw):
                out += _slab(xp, i, j, stride, ho, wo) * w[None, :, 0, i, j, None, None]
    elif groups == 1:
        cols = _im2col(xp, kh, kw, stride, ho, wo)
        out = (cols @ w.reshape(o, -1).T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    else:
        win = _windows(xp, kh, kw, stride, ho, wo).reshape(n, groups, cg, ho, wo, kh, kw)
        wg = w.reshape(groups, o // groups, cg, kh, kw)
        out = np.einsum("ngchwij,gocij->ngohw", win, wg, optimize=True).reshape(n, o, ho, wo)
    return np.ascontiguousarray(out + b[None, :, None, None])


def conv2d_backward_np(x, w, g, stride, pad, groups, need_input=True):
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    xp = _pad(x, pad)
    gxp = np.zeros(xp.shape)
    gw = np.zeros(w.shape)
    if _is_depthwise(x, w, groups):
        for i in range(kh):
            for j in range(kw):
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, _slab(xp, i, j, stride, ho, wo))
                if need_input:
                    _slab(gxp, i, j, stride, ho, wo)[...] += g * w[None, :, 0, i, j, None, None]
    elif groups == 1:
        cols = _im2col(xp, kh, kw, stride, ho, wo)
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape)
        if need_input:
            gcols = (g2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            for i in range(kh):
                for j in range(kw):
                    _slab(gxp, i, j, stride, ho, wo)[...] += gcols[..., i, j]
    else:
        win = _windows(xp, kh, kw, stride, ho, wo).reshape(n, groups, cg, ho, wo, kh, kw)
        wg = w.reshape(groups, o // groups, cg, kh, kw)
        gg = g.reshape(n, groups, o // groups, ho, wo)
        gw = np.einsum("ngohw,ngchwij->gocij", gg, win, optimize=True).reshape(w.shape)
        if need_input:
            gwin = np.einsum("ngohw,gocij->ngchwij", gg, wg, optimize=True).reshape(n, c, ho, wo, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    _slab(gxp, i, j, stride, ho, wo)[...] += gwin[..., i, j]
    if not need_input:
        return None, gw
    return gxp[:, :, pad : pad + h, pad : pad + wd], gw


def maxpool_forward_np(x, window, stride):
    n, c, h, wd = x.shape
    ho, wo = out_size(h, window, stride, 0), out_size(wd, window, stride, 0)
    win = _windows(x, window, window, stride, ho, wo).reshape(n, c, ho, wo, window * window)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward_np(g, arg, x_shape, window, stride):
    gx = np.zeros(x_shape)
    ho, wo = g.shape[2], g.shape[3]
    for i in range(window):
        for j in range(window):
            _slab(gx, i, j, stride, ho, wo)[...] += np.where(arg == i * window + j, g, 0.0)
    return gx


# --- numba backend ----------------------------------------------------------

@njit
def _conv_fwd_loops(xp, w, b, stride, groups, ho, wo):
    n_, c_, hp, wp = xp.shape
    o_, cg, kh, kw = w.shape
    og = o_ // groups
    out = np.empty((n_, o_, ho, wo))
    for n in range(n_):
        for o in range(o_):
            base = (o // og) * cg
            for y in range(ho):
                for x in range(wo):
                    out[n, o, y, x] = b[o]
            for c in range(cg):
                ci = base + c
                for i in range(kh):
                    for j in range(kw):
                        wv = w[o, c, i, j]
                        for y in range(ho):
                            yy = y * stride + i
                            for x in range(wo):
                                out[n, o, y, x] += xp[n, ci, yy, x * stride + j] * wv
    return out


@njit
def _conv_bwd_loops(xp, w, g, stride, groups):
    n_, c_, hp, wp = xp.shape
    o_, cg, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    og = o_ // groups
    gxp = np.zeros(xp.shape)
    gw = np.zeros(w.shape)
    for n in range(n_):
        for o in range(o_):
            base = (o // og) * cg
            for c in range(cg):
                ci = base + c
                for i in range(kh):
                    for j in range(kw):
                        wv = w[o, c, i, j]
                        acc = 0.0
                        for y in range(ho):
                            yy = y * stride + i
                            for x in range(wo):
                                gv = g[n, o, y, x]
                                xx = x * stride + j
                                acc += gv * xp[n, ci, yy, xx]
                                gxp[n, ci, yy, xx] += gv * wv
                        gw[o, c, i, j] += acc
    return gxp, gw


@njit
def _maxpool_fwd_loops(a, window, stride, ho, wo):
    n_, c_ = a.shape[0], a.shape[1]
    out = np.empty((n_, c_, ho, wo))
    arg = np.empty((n_, c_, ho, wo), dtype=np.int64)
    for n in range(n_):
        for c in range(c_):
            for y in range(ho):
                for x in range(wo):
                    best = a[n, c, y * stride, x * stride]
                    k = 0
                    for i in range(window):
                        for j in range(window):
                            v = a[n, c, y * stride + i, x * stride + j]
                            if v > best:
                                best = v
                                k = i * window + j
                    out[n, c, y, x] = best
                    arg[n, c, y, x] = k
    return out, arg


@njit
def _maxpool_bwd_loops(g, arg, gx, window, stride):
    n_, c_, ho, wo = g.shape
    for n in range(n_):
        for c in range(c_):
            for y in range(ho):
                for x in range(wo):
                    k = arg[n, c, y, x]
                    gx[n, c, y * stride + k // window, x * stride + k % window] += g[n, c, y, x]
    return gx


def conv2d_forward_nb(x, w, b, stride, pad, groups):
    ho = out_size(x.shape[2], w.shape[2], stride, pad)
    wo = out_size(x.shape[3], w.shape[3], stride, pad)
    xp = np.ascontiguousarray(_pad(x, pad))
    return _conv_fwd_loops(xp, np.ascontiguousarray(w), np.ascontiguousarray(b), stride, groups, ho, wo)


def conv2d_backward_nb(x, w, g, stride, pad, groups):
    h, wd = x.shape[2], x.shape[3]
    xp = np.ascontiguousarray(_pad(x, pad))
    gxp, gw = _conv_bwd_loops(xp, np.ascontiguousarray(w), np.ascontiguousarray(g), stride, groups)
    return gxp[:, :, pad : pad + h, pad : pad + wd], gw


def maxpool_forward_nb(x, window, stride):
    ho = out_size(x.shape[2], window, stride, 0)
    wo = out_size(x.shape[3], window, stride, 0)
    return _maxpool_fwd_loops(np.ascontiguousarray(x), window, stride, ho, wo)


def maxpool_backward_nb(g, arg, x_shape, window, stride):
    return _maxpool_bwd_loops(np.ascontiguousarray(g), arg, np.zeros(x_shape), window, stride)


# --- dispatch ---------------------------------------------------------------

def _route_numba(groups, use_numba):
    # Ungrouped convs lower to BLAS-backed einsum, faster than the loop nest.
    if groups == 1:
        return False
    return NUMBA_ENABLED if use_numba is None else use_numba


def conv2d_forward(x, w, b, stride=1, pad=0, groups=1, use_numba=None):
    if _is_pointwise(w, stride, pad, groups):
        return _pw_forward(x, w, b)
    if _route_numba(groups, use_numba):
        return conv2d_forward_nb(x, w, b, stride, pad, groups)
    return conv2d_forward_np(x, w, b, stride, pad, groups)


def conv2d_backward(x, w, g, stride=1, pad=0, groups=1, use_numba=None, need_input=True):
    """Return ``(grad_input, grad_weight, grad_bias)``.

    ``grad_input`` is None when ``need_input`` is false and the backend can
    skip it.
    """
    gb = g.sum(axis=(0, 2, 3))
    if _is_pointwise(w, stride, pad, groups):
        gx, gw = _pw_backward(x, w, g, need_input)
    elif _route_numba(groups, use_numba):
        gx, gw = conv2d_backward_nb(x, w, g, stride, pad, groups)
    else:
        gx, gw = conv2d_backward_np(x, w, g, stride, pad, groups, need_input)
    return gx, gw, gb


def maxpool_forward(x, window, stride, use_numba=None):
    if NUMBA_ENABLED if use_numba is None else use_numba:
        return maxpool_forward_nb(x, window, stride)
    return maxpool_forward_np(x, window, stride)


def maxpool_backward(g, arg, x_shape, window, stride, use_numba=None):
    if NUMBA_ENABLED if use_numba is None else use_numba:
        return maxpool_backward_nb(g, arg, x_shape, window, stride)
    return maxpool_backward_np(g, arg, x_shape, window, stride)
