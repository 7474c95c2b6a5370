"""Pure-NumPy valid 3D convolution kernels (single sample, channels first).

Forward and the weight gradient go through an im2col buffer and one GEMM
each; the input gradient uses an offset loop (at most kx*ky*kz slice
adds), which avoids a col2im scatter.
"""

from __future__ import annotations

import numpy as np


def _im2col(x: np.ndarray, kx: int, ky: int, kz: int) -> np.ndarray:
    """(Ci, X, Y, Z) -> (Ci*kx*ky*kz, OX*OY*OZ) patch matrix."""
    win = np.lib.stride_tricks.sliding_window_view(x, (kx, ky, kz), axis=(1, 2, 3))
    # win: (Ci, OX, OY, OZ, kx, ky, kz) -> (Ci, kx, ky, kz, OX, OY, OZ)
    win = win.transpose(0, 4, 5, 6, 1, 2, 3)
    ci = x.shape[0]
    return win.reshape(ci * kx * ky * kz, -1)


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid correlation of x (Ci,X,Y,Z) with w (Co,Ci,kx,ky,kz) plus bias."""
    co, ci, kx, ky, kz = w.shape
    ox = x.shape[1] - kx + 1
    oy = x.shape[2] - ky + 1
    oz = x.shape[3] - kz + 1
    cols = _im2col(x, kx, ky, kz)
    out = w.reshape(co, -1) @ cols
    out += b[:, None]
    return out.reshape(co, ox, oy, oz)


def conv3d_backward(x: np.ndarray, w: np.ndarray, gy: np.ndarray):
    """Gradients (gx, gw, gb) of a valid correlation given upstream gy."""
    co, ci, kx, ky, kz = w.shape
    ox, oy, oz = gy.shape[1:]
    gy_mat = gy.reshape(co, -1)

    cols = _im2col(x, kx, ky, kz)
    gw = (gy_mat @ cols.T).reshape(w.shape)
    gb = gy_mat.sum(axis=1)

    gx = np.zeros_like(x)
    for i in range(kx):
        for j in range(ky):
            for k in range(kz):
                contrib = np.tensordot(w[:, :, i, j, k], gy, axes=([0], [0]))
                gx[:, i : i + ox, j : j + oy, k : k + oz] += contrib
    return gx, gw, gb
