"""Numba kernels for front-to-back alpha compositing and its backward pass.

The rasterizer materializes one (pixel, splat) pair per pixel inside a splat's
3-sigma bounding box, sorted by pixel id with depth order preserved inside
each pixel. These kernels walk the pair list segment by segment (one segment
per covered pixel); everything is single-threaded so accumulation order, and
therefore the output, is deterministic.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

# Standard splatting constants the projection/compositing math relies on.
ALPHA_CLAMP = 0.99       # per-splat alpha ceiling
T_EARLY_OUT = 1e-4       # stop compositing once transmittance drops below this


@njit(cache=True)
def composite_forward(
    seg_start, seg_end, pair_pix, pair_splat,
    mean_u, mean_v, conic_a, conic_b, conic_c, alpha,
    width, image_flat, t_cut,
):
    """Front-to-back compositing of depth-sorted splats into a flat image.

    Pixel value is sum_i alpha'_i * T_i with alpha'_i = alpha_i * G_i clamped
    to ALPHA_CLAMP and T_i the transmittance of all nearer splats. Intensity
    is the constant 1.0.
    """
    for k in range(seg_start.shape[0]):
        i0 = seg_start[k]
        i1 = seg_end[k]
        pix = pair_pix[i0]
        px = float(pix % width)
        py = float(pix // width)
        T = 1.0
        acc = 0.0
        for n in range(i0, i1):
            if T < t_cut:
                break
            s = pair_splat[n]
            dx = px - mean_u[s]
            dy = py - mean_v[s]
            power = -0.5 * (conic_a[s] * dx * dx + conic_c[s] * dy * dy) - conic_b[s] * dx * dy
            ap = alpha[s] * math.exp(power)
            if ap > ALPHA_CLAMP:
                ap = ALPHA_CLAMP
            acc += ap * T
            T *= 1.0 - ap
        image_flat[pix] = acc


@njit(cache=True)
def composite_backward(
    seg_start, seg_end, pair_pix, pair_splat,
    mean_u, mean_v, conic_a, conic_b, conic_c, alpha,
    width, upstream_flat, t_cut,
    g_alpha, g_u, g_v, g_ca, g_cb, g_cc,
):
    """Backward pass of composite_forward.

    Recomputes per-pixel transmittance in two front-to-back passes (total,
    then prefix) instead of storing contributor state:
        dI/dalpha'_i = T_i - S_i / (1 - alpha'_i)
    with S_i the weight accumulated behind splat i. Gradients are scattered
    into per-splat accumulators for opacity, 2D mean and conic entries.
    """
    for k in range(seg_start.shape[0]):
        i0 = seg_start[k]
        i1 = seg_end[k]
        pix = pair_pix[i0]
        g = upstream_flat[pix]
        if g == 0.0:
            continue
        px = float(pix % width)
        py = float(pix // width)

        # pass 1: total accumulated weight A over included splats
        T = 1.0
        A = 0.0
        for n in range(i0, i1):
            if T < t_cut:
                break
            s = pair_splat[n]
            dx = px - mean_u[s]
            dy = py - mean_v[s]
            power = -0.5 * (conic_a[s] * dx * dx + conic_c[s] * dy * dy) - conic_b[s] * dx * dy
            ap = alpha[s] * math.exp(power)
            if ap > ALPHA_CLAMP:
                ap = ALPHA_CLAMP
            A += ap * T
            T *= 1.0 - ap

        # pass 2: per-splat gradients using suffix weights S = A - prefix
        T = 1.0
        prefix = 0.0
        for n in range(i0, i1):
            if T < t_cut:
                break
            s = pair_splat[n]
            dx = px - mean_u[s]
            dy = py - mean_v[s]
            power = -0.5 * (conic_a[s] * dx * dx + conic_c[s] * dy * dy) - conic_b[s] * dx * dy
            G = math.exp(power)
            aG = alpha[s] * G
            clamped = aG > ALPHA_CLAMP
            ap = ALPHA_CLAMP if clamped else aG
            prefix += ap * T
            S = A - prefix
            d_ap = g * (T - S / (1.0 - ap))
            if not clamped:
                g_alpha[s] += d_ap * G
                gg = d_ap * alpha[s] * G
                g_ca[s] += gg * (-0.5 * dx * dx)
                g_cb[s] += gg * (-dx * dy)
                g_cc[s] += gg * (-0.5 * dy * dy)
                # d/d(mean2d) = -d/d(delta)
                g_u[s] += gg * (conic_a[s] * dx + conic_b[s] * dy)
                g_v[s] += gg * (conic_b[s] * dx + conic_c[s] * dy)
            T *= 1.0 - ap


def segment_bounds(pair_pix_sorted: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Start/end indices of the constant-pixel runs in a sorted pair list."""
    n = pair_pix_sorted.shape[0]
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    change = np.flatnonzero(pair_pix_sorted[1:] != pair_pix_sorted[:-1]) + 1
    seg_start = np.concatenate(([0], change)).astype(np.int64)
    seg_end = np.concatenate((change, [n])).astype(np.int64)
    return seg_start, seg_end
