"""Sequential references for checking the distributed executor."""

import numpy as np


def _pad(x, r_h, r_w):
    return np.pad(x, ((0, 0), (0, 0), (r_h, r_h), (r_w, r_w)))


def conv_oracle(images, kernel, dy):
    """Full-image 'same' convolution and its two gradients, by shifted sums."""
    n, ci, h, w = images.shape
    co, _, kh, kw = kernel.shape
    rh, rw = kh // 2, kw // 2
    xp = _pad(images, rh, rw)
    y = np.zeros((n, co, h, w))
    dw = np.zeros_like(kernel, dtype=np.float64)
    dxp = np.zeros_like(xp)
    for a in range(kh):
        for b in range(kw):
            shifted = xp[:, :, a:a + h, b:b + w]
            y += np.einsum("nchw,oc->nohw", shifted, kernel[:, :, a, b])
            dw[:, :, a, b] = np.einsum("nohw,nchw->oc", dy, shifted)
            dxp[:, :, a:a + h, b:b + w] += np.einsum("nohw,oc->nchw", dy, kernel[:, :, a, b])
    dx = dxp[:, :, rh:rh + h, rw:rw + w]
    return y, dx, dw


def central_difference(f, arrays, h=1e-6):
    """Central-difference gradient of scalar ``f(arrays)`` for each array."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (f(plus) - f(minus)) / (2 * h)
        grads.append(g)
    return grads
