"""Hot inner loops for convolution: im2col gather, col2im scatter, workspaces.

Everything here is layout plumbing around BLAS.  The gathered column matrix
uses layout (C_in * k * k, N * H_out * W_out) so a grouped convolution is a
single batched matmul over the group axis.

Boundary handling happens inside the kernels: each output row decomposes
into at most two contiguous source segments (wrap) or one clipped segment
plus zero fill.  Wide rows use slice copies, narrow rows (deep levels with
tiny grids) use element loops, since slice-op overhead dominates there.
Kernels wider than the grid (wrap with pad >= h or w) fall back to
per-element modular indexing; that only occurs on the coarsest levels.

Workspaces are grow-only per-thread buffers keyed by name; repeatedly
allocating tens-of-MB column matrices dominates wall time otherwise.
"""

import os
import threading

import numpy as np
import numba
from numba import njit, prange
from threadpoolctl import threadpool_limits

WRAP = 1
ZERO = 0

# One math thread per process: BLAS spin-waiters and the numba worker pool
# otherwise fight over the cores and multiply step times.  Runs are
# single-threaded by contract; process-level parallelism happens in the
# sweep worker pool.  Override with DWNET_MATH_THREADS if you know better.
_nthreads = int(os.environ.get("DWNET_MATH_THREADS", "1"))
threadpool_limits(limits=_nthreads, user_api="blas")
numba.set_num_threads(max(_nthreads, 1))

_tls = threading.local()


def workspace(key: str, shape, dtype) -> np.ndarray:
    """Return a reusable array of the given shape backed by a per-thread buffer."""
    pools = getattr(_tls, "pools", None)
    if pools is None:
        pools = _tls.pools = {}
    nbytes = int(np.prod(shape)) * np.dtype(dtype).itemsize
    buf = pools.get(key)
    if buf is None or buf.nbytes < nbytes:
        buf = pools[key] = np.empty(max(nbytes, 1), dtype=np.uint8)
    return buf[:nbytes].view(dtype).reshape(shape)


@njit(parallel=True, cache=True)
def _gather(x, cols, k, stride, pad, ho, wo, mode):
    n_batch, c_in, h, w = x.shape
    kk = k * k
    hw = ho * wo
    fast = pad < h and pad < w
    wide = w >= 32
    for nc in prange(n_batch * c_in):
        n = nc // c_in
        c = nc % c_in
        for a in range(k):
            for b in range(k):
                row = c * kk + a * k + b
                if stride == 2:  # pad == 0, indices always in range
                    for i in range(ho):
                        base = n * hw + i * wo
                        si = 2 * i + a
                        for j in range(wo):
                            cols[row, base + j] = x[n, c, si, 2 * j + b]
                elif mode == WRAP and fast:
                    s0 = b - pad
                    if s0 < 0:
                        s0 += w
                    l1 = w - s0
                    for i in range(ho):
                        si = i + a - pad
                        if si < 0:
                            si += h
                        elif si >= h:
                            si -= h
                        base = n * hw + i * wo
                        if wide:
                            cols[row, base:base + l1] = x[n, c, si, s0:w]
                            cols[row, base + l1:base + w] = x[n, c, si, 0:s0]
                        else:
                            for j in range(l1):
                                cols[row, base + j] = x[n, c, si, s0 + j]
                            for j in range(s0):
                                cols[row, base + l1 + j] = x[n, c, si, j]
                elif mode == WRAP:
                    for i in range(ho):
                        si = (i + a - pad) % h
                        base = n * hw + i * wo
                        for j in range(wo):
                            cols[row, base + j] = x[n, c, si, (j + b - pad) % w]
                else:  # ZERO
                    jlo = max(0, pad - b)
                    jhi = min(wo, w + pad - b)
                    off = b - pad
                    for i in range(ho):
                        base = n * hw + i * wo
                        si = i + a - pad
                        if si < 0 or si >= h:
                            for j in range(wo):
                                cols[row, base + j] = 0.0
                        else:
                            for j in range(jlo):
                                cols[row, base + j] = 0.0
                            for j in range(jlo, jhi):
                                cols[row, base + j] = x[n, c, si, j + off]
                            for j in range(jhi, wo):
                                cols[row, base + j] = 0.0


@njit(parallel=True, cache=True)
def _scatter_add(gcols, gx, k, stride, pad, ho, wo, mode):
    n_batch, c_in, h, w = gx.shape
    kk = k * k
    hw = ho * wo
    fast = pad < h and pad < w
    wide = w >= 32
    for nc in prange(n_batch * c_in):
        n = nc // c_in
        c = nc % c_in
        for a in range(k):
            for b in range(k):
                row = c * kk + a * k + b
                if stride == 2:
                    for i in range(ho):
                        base = n * hw + i * wo
                        si = 2 * i + a
                        for j in range(wo):
                            gx[n, c, si, 2 * j + b] += gcols[row, base + j]
                elif mode == WRAP and fast:
                    s0 = b - pad
                    if s0 < 0:
                        s0 += w
                    l1 = w - s0
                    for i in range(ho):
                        si = i + a - pad
                        if si < 0:
                            si += h
                        elif si >= h:
                            si -= h
                        base = n * hw + i * wo
                        if wide:
                            gx[n, c, si, s0:w] += gcols[row, base:base + l1]
                            gx[n, c, si, 0:s0] += gcols[row, base + l1:base + w]
                        else:
                            for j in range(l1):
                                gx[n, c, si, s0 + j] += gcols[row, base + j]
                            for j in range(s0):
                                gx[n, c, si, j] += gcols[row, base + l1 + j]
                elif mode == WRAP:
                    for i in range(ho):
                        si = (i + a - pad) % h
                        base = n * hw + i * wo
                        for j in range(wo):
                            gx[n, c, si, (j + b - pad) % w] += gcols[row, base + j]
                else:  # ZERO
                    jlo = max(0, pad - b)
                    jhi = min(wo, w + pad - b)
                    off = b - pad
                    for i in range(ho):
                        base = n * hw + i * wo
                        si = i + a - pad
                        if 0 <= si < h:
                            for j in range(jlo, jhi):
                                gx[n, c, si, j + off] += gcols[row, base + j]


def im2col(x: np.ndarray, k: int, stride: int, pad: int, ho: int, wo: int,
           mode: int, ws_key: str) -> np.ndarray:
    """Gather sliding windows of (N, C, H, W) into a (C*k*k, N*ho*wo) matrix."""
    n, c = x.shape[0], x.shape[1]
    cols = workspace(ws_key, (c * k * k, n * ho * wo), x.dtype)
    _gather(x, cols, k, stride, pad, ho, wo, mode)
    return cols


def col2im_add(gcols: np.ndarray, gx: np.ndarray, k: int, stride: int, pad: int,
               ho: int, wo: int, mode: int) -> None:
    """Scatter-add column gradients onto a zeroed (N, C, H, W) array in place."""
    _scatter_add(gcols, gx, k, stride, pad, ho, wo, mode)
