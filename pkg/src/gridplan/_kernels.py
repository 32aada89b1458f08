"""Convolution kernels used by the domain-parallel executor.

Each kernel exists twice: a loop version compiled with numba and a
vectorised numpy version. The numba path is used when numba imports and
``GRIDPLAN_DISABLE_NUMBA`` is unset or ``0``. Both paths sum in a fixed
order, so a given path is deterministic; the two paths agree to rounding.

Layout is NCHW. ``xpad`` is already padded in height by the caller (halo rows
or zeros); width padding is zero padding applied here.
"""

import os

import numpy as np

try:
    import numba

    # skip probing an outdated TBB, which only produces a warning
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _numba_requested() -> bool:
    flag = os.environ.get("GRIDPLAN_DISABLE_NUMBA", "0").strip().lower()
    return flag in ("", "0", "false", "no")


USE_NUMBA = numba is not None and _numba_requested()


# -- numpy path -------------------------------------------------------------


def correlate_rows_numpy(xpad, kernel):
    n, ci, hp, w = xpad.shape
    co, ci2, kh, kw = kernel.shape
    h = hp - kh + 1
    rw = kw // 2
    xp = np.pad(xpad, ((0, 0), (0, 0), (0, 0), (rw, rw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # win: (n, ci, h, w, kh, kw)
    return np.einsum("ncyxab,ocab->noyx", win[:, :, :h, :w], kernel, optimize=True)


def weight_grad_numpy(xpad, dy, kh, kw):
    n, ci, hp, w = xpad.shape
    rw = kw // 2
    h = dy.shape[2]
    xp = np.pad(xpad, ((0, 0), (0, 0), (0, 0), (rw, rw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return np.einsum("noyx,ncyxab->ocab", dy, win[:, :, :h, :w], optimize=True)


# -- numba path -------------------------------------------------------------

if numba is not None:

    # Loops run over a width-padded copy so the innermost index is contiguous
    # and branch free. prange splits output channels; each output element is
    # still summed by one thread in a fixed order.

    @numba.njit(cache=True, parallel=True)
    def _correlate_padded(xp, kernel, h, w):
        n, ci = xp.shape[0], xp.shape[1]
        co, _, kh, kw = kernel.shape
        out = np.zeros((n, co, h, w))
        for o in numba.prange(co):
            for b in range(n):
                for c in range(ci):
                    for a in range(kh):
                        for q in range(kw):
                            kv = kernel[o, c, a, q]
                            for y in range(h):
                                for x in range(w):
                                    out[b, o, y, x] += kv * xp[b, c, y + a, x + q]
        return out

    @numba.njit(cache=True, parallel=True)
    def _weight_grad_padded(xp, dy, kh, kw):
        n, ci = xp.shape[0], xp.shape[1]
        co, h, w = dy.shape[1], dy.shape[2], dy.shape[3]
        out = np.zeros((co, ci, kh, kw))
        for o in numba.prange(co):
            lane = np.zeros(w)
            for c in range(ci):
                for a in range(kh):
                    for q in range(kw):
                        # one partial sum per output column, reduced at the end
                        lane[:] = 0.0
                        for b in range(n):
                            for y in range(h):
                                for x in range(w):
                                    lane[x] += dy[b, o, y, x] * xp[b, c, y + a, x + q]
                        acc = 0.0
                        for x in range(w):
                            acc += lane[x]
                        out[o, c, a, q] = acc
        return out

    def correlate_rows_numba(xpad, kernel):
        kh, kw = kernel.shape[2:]
        rw = kw // 2
        xp = np.pad(xpad, ((0, 0), (0, 0), (0, 0), (rw, rw)))
        return _correlate_padded(xp, kernel, xpad.shape[2] - kh + 1, xpad.shape[3])

    def weight_grad_numba(xpad, dy, kh, kw):
        rw = kw // 2
        xp = np.pad(xpad, ((0, 0), (0, 0), (0, 0), (rw, rw)))
        return _weight_grad_padded(xp, dy, kh, kw)

else:  # pragma: no cover
    correlate_rows_numba = None
    weight_grad_numba = None


# -- dispatch ---------------------------------------------------------------


def correlate_rows(xpad, kernel, use_numba=None):
    """Cross-correlate ``xpad`` (N, C, H + kh - 1, W) with ``kernel`` (O, C, kh, kw).

    Returns (N, O, H, W): 'valid' along height, zero-padded 'same' along width.
    """
    xpad = np.ascontiguousarray(xpad, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    if USE_NUMBA if use_numba is None else use_numba:
        return correlate_rows_numba(xpad, kernel)
    return correlate_rows_numpy(xpad, kernel)


def weight_grad(xpad, dy, kh, kw, use_numba=None):
    """Gradient of ``correlate_rows(xpad, K)`` against ``dy`` with respect to K."""
    xpad = np.ascontiguousarray(xpad, dtype=np.float64)
    dy = np.ascontiguousarray(dy, dtype=np.float64)
    if USE_NUMBA if use_numba is None else use_numba:
        return weight_grad_numba(xpad, dy, kh, kw)
    return weight_grad_numpy(xpad, dy, kh, kw)


def backward_kernel(kernel):
    """Kernel whose row correlation maps dY to dX for a stride-1 'same' conv."""
    return np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
