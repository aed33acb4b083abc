"""Fused CPU kernels for the hash-grid lookup.

The backward pass parallelizes over levels: every level owns a disjoint slice
of the table gradient, so accumulation order is fixed and results are
identical to a serial run.
"""

from __future__ import annotations

import os

import numba
import numpy as np
import torch

# skip probing the system TBB, which is too old on common distros and only warns
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "omp"

P1 = np.int64(2654435761)
P2 = np.int64(805459861)


@numba.njit(parallel=True, cache=True, fastmath=False)
def _forward(pos, tables, res, out):
    n = pos.shape[0]
    L, T, F = tables.shape
    mask = T - 1
    for i in numba.prange(n):
        for l in range(L):
            r = res[l]
            px, py, pz = pos[i, 0] * r, pos[i, 1] * r, pos[i, 2] * r
            bx, by, bz = np.floor(px), np.floor(py), np.floor(pz)
            fx, fy, fz = px - bx, py - by, pz - bz
            ix, iy, iz = np.int64(bx), np.int64(by), np.int64(bz)
            for f in range(F):
                out[i, l * F + f] = 0.0
            for c in range(8):
                ox, oy, oz = (c >> 2) & 1, (c >> 1) & 1, c & 1
                w = (fx if ox else 1 - fx) * (fy if oy else 1 - fy) * (fz if oz else 1 - fz)
                h = ((ix + ox) ^ ((iy + oy) * P1) ^ ((iz + oz) * P2)) & mask
                for f in range(F):
                    out[i, l * F + f] += w * tables[l, h, f]


@numba.njit(parallel=True, cache=True, fastmath=False)
def _backward_tables(pos, grad_out, res, grad_tables):
    n = pos.shape[0]
    L, T, F = grad_tables.shape
    mask = T - 1
    for l in numba.prange(L):
        r = res[l]
        for i in range(n):
            px, py, pz = pos[i, 0] * r, pos[i, 1] * r, pos[i, 2] * r
            bx, by, bz = np.floor(px), np.floor(py), np.floor(pz)
            fx, fy, fz = px - bx, py - by, pz - bz
            ix, iy, iz = np.int64(bx), np.int64(by), np.int64(bz)
            for c in range(8):
                ox, oy, oz = (c >> 2) & 1, (c >> 1) & 1, c & 1
                w = (fx if ox else 1 - fx) * (fy if oy else 1 - fy) * (fz if oz else 1 - fz)
                h = ((ix + ox) ^ ((iy + oy) * P1) ^ ((iz + oz) * P2)) & mask
                for f in range(F):
                    grad_tables[l, h, f] += w * grad_out[i, l * F + f]


@numba.njit(parallel=True, cache=True, fastmath=False)
def _backward_pos(pos, tables, grad_out, res, grad_pos):
    n = pos.shape[0]
    L, T, F = tables.shape
    mask = T - 1
    for i in numba.prange(n):
        gx = gy = gz = 0.0
        for l in range(L):
            r = res[l]
            px, py, pz = pos[i, 0] * r, pos[i, 1] * r, pos[i, 2] * r
            bx, by, bz = np.floor(px), np.floor(py), np.floor(pz)
            fx, fy, fz = px - bx, py - by, pz - bz
            ix, iy, iz = np.int64(bx), np.int64(by), np.int64(bz)
            for c in range(8):
                ox, oy, oz = (c >> 2) & 1, (c >> 1) & 1, c & 1
                wx = fx if ox else 1 - fx
                wy = fy if oy else 1 - fy
                wz = fz if oz else 1 - fz
                sx = 1.0 if ox else -1.0
                sy = 1.0 if oy else -1.0
                sz = 1.0 if oz else -1.0
                h = ((ix + ox) ^ ((iy + oy) * P1) ^ ((iz + oz) * P2)) & mask
                dot = 0.0
                for f in range(F):
                    dot += tables[l, h, f] * grad_out[i, l * F + f]
                gx += dot * sx * wy * wz * r
                gy += dot * wx * sy * wz * r
                gz += dot * wx * wy * sz * r
        grad_pos[i, 0] = gx
        grad_pos[i, 1] = gy
        grad_pos[i, 2] = gz


class HashEncodeFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, positions, tables, res):
        pos = positions.detach().contiguous().numpy()
        tab = tables.detach().contiguous().numpy()
        r = res.numpy().astype(pos.dtype)
        out = np.empty((pos.shape[0], tab.shape[0] * tab.shape[2]), dtype=tab.dtype)
        _forward(pos, tab, r, out)
        ctx.save_for_backward(positions, tables, res)
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        positions, tables, res = ctx.saved_tensors
        pos = positions.detach().contiguous().numpy()
        g = grad_out.detach().contiguous().numpy().astype(pos.dtype, copy=False)
        r = res.numpy().astype(pos.dtype)
        grad_pos = grad_tab = None
        if ctx.needs_input_grad[1]:
            gt = np.zeros(tuple(tables.shape), dtype=pos.dtype)
            _backward_tables(pos, g, r, gt)
            grad_tab = torch.from_numpy(gt).to(tables.dtype)
        if ctx.needs_input_grad[0]:
            gp = np.empty_like(pos)
            _backward_pos(pos, tables.detach().contiguous().numpy().astype(pos.dtype), g, r, gp)
            grad_pos = torch.from_numpy(gp)
        return grad_pos, grad_tab, None


def hash_encode_fused(positions: torch.Tensor, resolutions: list[int], tables: torch.Tensor) -> torch.Tensor:
    if positions.dtype != tables.dtype:
        positions = positions.to(tables.dtype)
    res = torch.tensor(resolutions, dtype=torch.float64)
    return HashEncodeFunction.apply(positions, tables, res)
