"""Fused CPU kernels for multiresolution hash encoding (forward and backward)."""

from __future__ import annotations

import numba
import numpy as np
import torch

P1 = np.int64(2654435761)
P2 = np.int64(805459861)


@numba.njit(cache=True, inline="always")
def _slot(x, y, z, mask):
    return (x ^ (y * P1) ^ (z * P2)) & mask


@numba.njit(cache=True)
def _forward(points, tables, level_res, half, out):
    n = points.shape[0]
    n_levels, table_size, n_feat = tables.shape
    mask = np.int64(table_size - 1)
    for i in range(n):
        ux = min(max(points[i, 0] + half, 0.0), 2 * half)
        uy = min(max(points[i, 1] + half, 0.0), 2 * half)
        uz = min(max(points[i, 2] + half, 0.0), 2 * half)
        for lvl in range(n_levels):
            r = level_res[lvl]
            sx, sy, sz = ux * r, uy * r, uz * r
            bx, by, bz = np.int64(np.floor(sx)), np.int64(np.floor(sy)), np.int64(np.floor(sz))
            fx, fy, fz = sx - bx, sy - by, sz - bz
            for f in range(n_feat):
                out[i, lvl * n_feat + f] = 0.0
            for c in range(8):
                ox, oy, oz = (c >> 2) & 1, (c >> 1) & 1, c & 1
                wx = fx if ox else 1.0 - fx
                wy = fy if oy else 1.0 - fy
                wz = fz if oz else 1.0 - fz
                w = wx * wy * wz
                s = _slot(bx + ox, by + oy, bz + oz, mask)
                for f in range(n_feat):
                    out[i, lvl * n_feat + f] += w * tables[lvl, s, f]


@numba.njit(cache=True)
def _backward(points, tables, level_res, half, grad_out, grad_tables, grad_points, want_points):
    n = points.shape[0]
    n_levels, table_size, n_feat = tables.shape
    mask = np.int64(table_size - 1)
    for i in range(n):
        px, py, pz = points[i, 0] + half, points[i, 1] + half, points[i, 2] + half
        ux, uy, uz = min(max(px, 0.0), 2 * half), min(max(py, 0.0), 2 * half), min(max(pz, 0.0), 2 * half)
        # clamp kills the gradient outside the box
        gx_on = 1.0 if 0.0 < px < 2 * half else 0.0
        gy_on = 1.0 if 0.0 < py < 2 * half else 0.0
        gz_on = 1.0 if 0.0 < pz < 2 * half else 0.0
        gpx = 0.0
        gpy = 0.0
        gpz = 0.0
        for lvl in range(n_levels):
            r = level_res[lvl]
            sx, sy, sz = ux * r, uy * r, uz * r
            bx, by, bz = np.int64(np.floor(sx)), np.int64(np.floor(sy)), np.int64(np.floor(sz))
            fx, fy, fz = sx - bx, sy - by, sz - bz
            for c in range(8):
                ox, oy, oz = (c >> 2) & 1, (c >> 1) & 1, c & 1
                wx = fx if ox else 1.0 - fx
                wy = fy if oy else 1.0 - fy
                wz = fz if oz else 1.0 - fz
                s = _slot(bx + ox, by + oy, bz + oz, mask)
                dot = 0.0
                for f in range(n_feat):
                    g = grad_out[i, lvl * n_feat + f]
                    grad_tables[lvl, s, f] += wx * wy * wz * g
                    dot += g * tables[lvl, s, f]
                if want_points:
                    dx = 1.0 if ox else -1.0
                    dy = 1.0 if oy else -1.0
                    dz = 1.0 if oz else -1.0
                    gpx += dot * dx * wy * wz * r
                    gpy += dot * wx * dy * wz * r
                    gpz += dot * wx * wy * dz * r
        if want_points:
            grad_points[i, 0] = gpx * gx_on
            grad_points[i, 1] = gpy * gy_on
            grad_points[i, 2] = gpz * gz_on


@numba.njit(cache=True, fastmath=True)
def _forward2(points, tables, level_res, half, out):
    # two-feature fast path; coordinates are clamped to >= 0 so int() == floor()
    n = points.shape[0]
    n_levels, table_size, _ = tables.shape
    mask = np.int64(table_size - 1)
    two = 2 * half
    for i in range(n):
        ux = min(max(points[i, 0] + half, 0.0), two)
        uy = min(max(points[i, 1] + half, 0.0), two)
        uz = min(max(points[i, 2] + half, 0.0), two)
        for lvl in range(n_levels):
            r = level_res[lvl]
            sx, sy, sz = ux * r, uy * r, uz * r
            bx, by, bz = np.int64(sx), np.int64(sy), np.int64(sz)
            fx, fy, fz = sx - bx, sy - by, sz - bz
            hy0, hy1 = by * P1, (by + 1) * P1
            hz0, hz1 = bz * P2, (bz + 1) * P2
            a0 = 0.0
            a1 = 0.0
            for c in range(8):
                ox, oy, oz = (c >> 2) & 1, (c >> 1) & 1, c & 1
                w = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy) * (fz if oz else 1.0 - fz)
                s = ((bx + ox) ^ (hy1 if oy else hy0) ^ (hz1 if oz else hz0)) & mask
                a0 += w * tables[lvl, s, 0]
                a1 += w * tables[lvl, s, 1]
            out[i, 2 * lvl] = a0
            out[i, 2 * lvl + 1] = a1


@numba.njit(cache=True, fastmath=True)
def _backward2_tables(points, level_res, half, grad_out, grad_tables):
    n = points.shape[0]
    n_levels, table_size, _ = grad_tables.shape
    mask = np.int64(table_size - 1)
    two = 2 * half
    for i in range(n):
        ux = min(max(points[i, 0] + half, 0.0), two)
        uy = min(max(points[i, 1] + half, 0.0), two)
        uz = min(max(points[i, 2] + half, 0.0), two)
        for lvl in range(n_levels):
            g0 = grad_out[i, 2 * lvl]
            g1 = grad_out[i, 2 * lvl + 1]
            if g0 == 0.0 and g1 == 0.0:
                continue
            r = level_res[lvl]
            sx, sy, sz = ux * r, uy * r, uz * r
            bx, by, bz = np.int64(sx), np.int64(sy), np.int64(sz)
            fx, fy, fz = sx - bx, sy - by, sz - bz
            hy0, hy1 = by * P1, (by + 1) * P1
            hz0, hz1 = bz * P2, (bz + 1) * P2
            for c in range(8):
                ox, oy, oz = (c >> 2) & 1, (c >> 1) & 1, c & 1
                w = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy) * (fz if oz else 1.0 - fz)
                s = ((bx + ox) ^ (hy1 if oy else hy0) ^ (hz1 if oz else hz0)) & mask
                grad_tables[lvl, s, 0] += w * g0
                grad_tables[lvl, s, 1] += w * g1


class HashEncode(torch.autograd.Function):
    """First-order differentiable hash encoding w.r.t. tables and points."""

    @staticmethod
    def forward(ctx, points, tables, level_res, half):
        pts = points.detach().contiguous().numpy()
        tab = tables.detach().contiguous().numpy()
        res = np.ascontiguousarray(level_res, dtype=pts.dtype)
        out = np.empty((pts.shape[0], tab.shape[0] * tab.shape[2]), dtype=tab.dtype)
        if tab.shape[2] == 2:
            _forward2(pts, tab, res, pts.dtype.type(half), out)
        else:
            _forward(pts, tab, res, pts.dtype.type(half), out)
        ctx.save_for_backward(points, tables)
        ctx.level_res = res
        ctx.half = half
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        points, tables = ctx.saved_tensors
        pts = points.detach().contiguous().numpy()
        tab = tables.detach().contiguous().numpy()
        g = grad_out.contiguous().numpy().astype(tab.dtype, copy=False)
        grad_tables = np.zeros_like(tab)
        want_points = ctx.needs_input_grad[0]
        grad_points = np.zeros_like(pts) if want_points else np.zeros((1, 3), dtype=pts.dtype)
        if tab.shape[2] == 2 and not want_points:
            _backward2_tables(pts, ctx.level_res, pts.dtype.type(ctx.half), g, grad_tables)
        else:
            _backward(pts, tab, ctx.level_res, pts.dtype.type(ctx.half), g, grad_tables, grad_points,
                      want_points)
        return (torch.from_numpy(grad_points) if want_points else None,
                torch.from_numpy(grad_tables) if ctx.needs_input_grad[1] else None, None, None)
