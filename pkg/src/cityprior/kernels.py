"""Fused CPU kernels for hash-grid interpolation.

Forward computes the trilinear interpolation of every level in one pass;
backward scatters output gradients into the table. Gradients w.r.t. the
query positions are not produced here; callers needing them use the pure
torch path in :class:`cityprior.field.HashGrid`.
"""

from __future__ import annotations

import numba
import numpy as np
import torch

# prefer OpenMP; the bundled TBB is often too old and warns on first parallel call
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

_P1 = np.int64(2654435761)
_P2 = np.int64(805459861)


@numba.njit(cache=True, inline="always")
def _cell(x, box_lo, box_hi, res):
    u = (x - box_lo) / (box_hi - box_lo)
    if u < 0.0:
        u = 0.0
    elif u > 1.0:
        u = 1.0
    pos = u * res
    c = np.int64(np.floor(pos))
    if c > res - 1:
        c = res - 1
    return c, pos - c


@numba.njit(cache=True, inline="always")
def _corner_row(cx, cy, cz, res, dense, offset, mask):
    if dense:
        s = res + 1
        return offset + cx + s * cy + s * s * cz
    return offset + ((cx ^ (cy * _P1) ^ (cz * _P2)) & mask)


@numba.njit(cache=True, parallel=True)
def hash_forward(x, box, res, dense, offset, capacity, table, out):
    n = x.shape[0]
    levels = res.shape[0]
    nf = table.shape[1]
    mask = np.int64(capacity - 1)
    for p in numba.prange(n):
        for lv in range(levels):
            r = res[lv]
            cx, fx = _cell(x[p, 0], box[0, 0], box[1, 0], r)
            cy, fy = _cell(x[p, 1], box[0, 1], box[1, 1], r)
            cz, fz = _cell(x[p, 2], box[0, 2], box[1, 2], r)
            for f in range(nf):
                out[p, lv * nf + f] = 0.0
            for k in range(8):
                ox = (k >> 2) & 1
                oy = (k >> 1) & 1
                oz = k & 1
                w = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy) * (fz if oz else 1.0 - fz)
                row = _corner_row(cx + ox, cy + oy, cz + oz, r, dense[lv], offset[lv], mask)
                for f in range(nf):
                    out[p, lv * nf + f] += w * table[row, f]


@numba.njit(cache=True)
def _scatter_range(x, box, res, dense, offset, capacity, grad_out, grad_table, start, stop):
    levels = res.shape[0]
    nf = grad_table.shape[1]
    mask = np.int64(capacity - 1)
    for p in range(start, stop):
        for lv in range(levels):
            r = res[lv]
            cx, fx = _cell(x[p, 0], box[0, 0], box[1, 0], r)
            cy, fy = _cell(x[p, 1], box[0, 1], box[1, 1], r)
            cz, fz = _cell(x[p, 2], box[0, 2], box[1, 2], r)
            for k in range(8):
                ox = (k >> 2) & 1
                oy = (k >> 1) & 1
                oz = k & 1
                w = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy) * (fz if oz else 1.0 - fz)
                row = _corner_row(cx + ox, cy + oy, cz + oz, r, dense[lv], offset[lv], mask)
                for f in range(nf):
                    grad_table[row, f] += w * grad_out[p, lv * nf + f]


@numba.njit(cache=True)
def hash_backward(x, box, res, dense, offset, capacity, grad_out, grad_table):
    _scatter_range(x, box, res, dense, offset, capacity, grad_out, grad_table, 0, x.shape[0])


@numba.njit(cache=True, parallel=True)
def hash_backward_parallel(x, box, res, dense, offset, capacity, grad_out, buffers):
    # one private buffer per worker chunk; merged by the caller in chunk order
    workers = buffers.shape[0]
    n = x.shape[0]
    step = (n + workers - 1) // workers
    for w in numba.prange(workers):
        start = w * step
        stop = min(n, start + step)
        _scatter_range(x, box, res, dense, offset, capacity, grad_out, buffers[w], start, stop)


# Number of private gradient buffers for the parallel backward; 1 = serial, deterministic.
_WORKERS = 1


def set_workers(n: int) -> None:
    global _WORKERS
    _WORKERS = max(1, int(n))
    numba.set_num_threads(min(_WORKERS, numba.config.NUMBA_NUM_THREADS))


def get_workers() -> int:
    return _WORKERS


class HashInterp(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, table, box, res, dense, offset, capacity):
        xn = x.detach().cpu().numpy()
        tn = table.detach().cpu().numpy()
        boxn = box.detach().cpu().numpy().astype(xn.dtype)
        out = np.empty((xn.shape[0], res.shape[0] * tn.shape[1]), dtype=tn.dtype)
        hash_forward(xn, boxn, res, dense, offset, capacity, tn, out)
        ctx.save_for_backward(x)
        ctx.meta = (boxn, res, dense, offset, capacity, tn.shape)
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        boxn, res, dense, offset, capacity, shape = ctx.meta
        xn = x.detach().numpy()
        go = np.ascontiguousarray(grad_out.detach().numpy())
        if _WORKERS == 1:
            grad = np.zeros(shape, dtype=go.dtype)
            hash_backward(xn, boxn, res, dense, offset, capacity, go, grad)
        else:
            buffers = np.zeros((_WORKERS,) + tuple(shape), dtype=go.dtype)
            hash_backward_parallel(xn, boxn, res, dense, offset, capacity, go, buffers)
            grad = buffers[0]
            for b in buffers[1:]:
                grad += b
        return None, torch.from_numpy(grad), None, None, None, None, None
