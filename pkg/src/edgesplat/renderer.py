"""Differentiable splat rendering of a Gaussian cloud into a grayscale image.

Forward: project every Gaussian to a 2D splat (perspective-Jacobian
approximation of the projected covariance), sort by depth, composite
front-to-back per pixel inside each splat's 3-sigma bounding box.

Backward: hand-derived chain from per-pixel loss gradients to every raw
Gaussian parameter (mean, quaternion, log scale, opacity logit). Gradients
flow to means both through the projected 2D mean and through the projected
covariance (the projection Jacobian depends on the camera-space mean), which
is required for finite-difference agreement.

Per-pixel (non-tiled) compositing is deliberate: desk-scale images do not
need tile scheduling, and correctness plus gradient clarity come first.
Tiling would slot in at the pair-construction stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._composite import (
    ALPHA_CLAMP,
    T_EARLY_OUT,
    composite_backward,
    composite_forward,
    segment_bounds,
)
from .geom import CameraView, GaussianCloud, quat_rotation_backward, sigmoid

__all__ = [
    "Splat2D",
    "RenderOutput",
    "RenderState",
    "GaussianGradients",
    "RenderStateError",
    "project_gaussian",
    "render",
    "render_backward",
    "NEAR_PLANE",
    "LOW_PASS_PX2",
]

NEAR_PLANE = 1e-4        # splats at or behind this camera depth are culled
LOW_PASS_PX2 = 0.3       # isotropic dilation of the projected covariance
DET_EPS = 1e-12          # projected covariance below this determinant is skipped


class RenderStateError(RuntimeError):
    """Backward called with state that does not match the forward pass."""


@dataclass
class Splat2D:
    """A Gaussian projected into one view."""

    mean2d: np.ndarray        # (2,) pixels
    cov2d: np.ndarray         # (2, 2) pixels^2, after low-pass dilation
    depth: float
    opacity: float            # activated, in (0, 1)
    source_index: int


@dataclass
class RenderState:
    """Forward-pass data reused by render_backward.

    Holds the depth-sorted (pixel, splat) pair list plus every per-splat
    quantity the backward chain needs, so backward never re-reads the cloud.
    """

    n_gaussians: int
    width: int
    height: int
    idx: np.ndarray           # (V,) cloud indices of rasterized splats
    u: np.ndarray             # (V,) projected x
    v: np.ndarray             # (V,) projected y
    depth: np.ndarray         # (V,)
    conic: np.ndarray         # (V, 3) inverse covariance entries (a, b, c)
    alpha: np.ndarray         # (V,) activated opacity
    cam_xyz: np.ndarray       # (V, 3) camera-space means
    T2: np.ndarray            # (V, 2, 3) J @ W
    Sigma: np.ndarray         # (V, 3, 3) world covariance
    Rv: np.ndarray            # (V, 3, 3) rotation matrices
    s2: np.ndarray            # (V, 3) exp(2 * log_scale)
    quats: np.ndarray         # (V, 4) raw quaternions
    fx: float
    fy: float
    pair_pix: np.ndarray      # (P,) sorted pixel ids
    pair_splat: np.ndarray    # (P,) index into the V arrays
    seg_start: np.ndarray
    seg_end: np.ndarray
    t_early_out: float


@dataclass
class RenderOutput:
    image: np.ndarray                 # (H, W) in [0, 1]
    state: RenderState


@dataclass
class GaussianGradients:
    """Per-Gaussian gradients of a scalar loss w.r.t. raw parameters."""

    mean: np.ndarray          # (N, 3)
    rot: np.ndarray           # (N, 4)
    log_scale: np.ndarray     # (N, 3)
    opacity_raw: np.ndarray   # (N,)
    pos2d_norm: np.ndarray    # (N,) NDC-normalized 2D positional gradient norm
    visible: np.ndarray       # (N,) bool, True if rasterized this view

    @classmethod
    def zeros(cls, n: int) -> "GaussianGradients":
        return cls(
            mean=np.zeros((n, 3)),
            rot=np.zeros((n, 4)),
            log_scale=np.zeros((n, 3)),
            opacity_raw=np.zeros(n),
            pos2d_norm=np.zeros(n),
            visible=np.zeros(n, dtype=bool),
        )


def _as_cloud(cloud) -> GaussianCloud:
    if isinstance(cloud, GaussianCloud):
        return cloud
    return GaussianCloud.from_gaussians(cloud)


def _project(cloud: GaussianCloud, cam: CameraView):
    """Project all Gaussians; returns per-splat arrays for the rasterizable
    subset (in cloud order) or None when nothing survives culling."""
    n = len(cloud)
    if n == 0:
        return None
    pc = cam.transform(cloud.means)
    z = pc[:, 2]
    infront = z > NEAR_PLANE
    if not np.any(infront):
        return None

    idx = np.flatnonzero(infront)
    pc = pc[idx]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy

    # Affine Jacobian of the perspective projection at the camera-space mean.
    V = len(idx)
    J = np.zeros((V, 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / (z * z)
    T2 = np.einsum("nij,jk->nik", J, cam.R)

    Rv = cloud.rotations()[idx]
    s2 = np.exp(2.0 * cloud.log_scales[idx])
    Sigma = np.einsum("nij,nj,nkj->nik", Rv, s2, Rv)
    cov = np.einsum("nij,njk,nlk->nil", T2, Sigma, T2)
    a = cov[:, 0, 0] + LOW_PASS_PX2
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + LOW_PASS_PX2

    rx = 3.0 * np.sqrt(a)
    ry = 3.0 * np.sqrt(c)
    inside = (u + rx >= 0) & (u - rx <= cam.width - 1) & (v + ry >= 0) & (v - ry <= cam.height - 1)
    det = a * c - b * b
    ok = inside & (det >= DET_EPS)
    if not np.any(ok):
        return None

    sel = np.flatnonzero(ok)
    det = det[sel]
    conic = np.stack([c[sel] / det, -b[sel] / det, a[sel] / det], axis=1)
    return dict(
        idx=idx[sel],
        u=u[sel], v=v[sel], depth=z[sel],
        cov_a=a[sel], cov_b=b[sel], cov_c=c[sel],
        conic=conic,
        alpha=sigmoid(cloud.opacity_raws[idx[sel]]),
        cam_xyz=pc[sel],
        T2=T2[sel],
        Sigma=Sigma[sel],
        Rv=Rv[sel],
        s2=s2[sel],
        quats=cloud.rots[idx[sel]],
        rx=rx[sel], ry=ry[sel],
    )


def project_gaussian(cam: CameraView, g, source_index: int = 0) -> Splat2D | None:
    """Project a single Gaussian to a 2D splat; None means culled.

    Culled (behind the near plane, or mean more than 3 sigma outside the
    image) is a normal outcome, not an error.
    """
    cloud = GaussianCloud.from_gaussians([g])
    p = _project(cloud, cam)
    if p is None:
        return None
    cov2d = np.array(
        [[p["cov_a"][0], p["cov_b"][0]], [p["cov_b"][0], p["cov_c"][0]]]
    )
    return Splat2D(
        mean2d=np.array([p["u"][0], p["v"][0]]),
        cov2d=cov2d,
        depth=float(p["depth"][0]),
        opacity=float(p["alpha"][0]),
        source_index=source_index,
    )


def _build_pairs(p, width: int, height: int):
    """(pixel, splat) pairs in depth order, then stable-sorted by pixel id."""
    order = np.argsort(p["depth"], kind="stable")
    u, v = p["u"][order], p["v"][order]
    rx, ry = p["rx"][order], p["ry"][order]
    x_lo = np.maximum(np.ceil(u - rx), 0).astype(np.int64)
    x_hi = np.minimum(np.floor(u + rx), width - 1).astype(np.int64)
    y_lo = np.maximum(np.ceil(v - ry), 0).astype(np.int64)
    y_hi = np.minimum(np.floor(v + ry), height - 1).astype(np.int64)
    nx = np.maximum(x_hi - x_lo + 1, 0)
    ny = np.maximum(y_hi - y_lo + 1, 0)
    counts = nx * ny
    keep = counts > 0
    if not np.any(keep):
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    order, x_lo, y_lo, nx, counts = (
        order[keep], x_lo[keep], y_lo[keep], nx[keep], counts[keep],
    )
    starts = np.concatenate(([0], np.cumsum(counts)))
    total = int(starts[-1])
    local = np.repeat(np.arange(len(counts)), counts)
    within = np.arange(total, dtype=np.int64) - np.repeat(starts[:-1], counts)
    nx_rep = np.repeat(nx, counts)
    px = np.repeat(x_lo, counts) + within % nx_rep
    py = np.repeat(y_lo, counts) + within // nx_rep
    pair_pix = py * width + px
    pair_splat = order[local]
    # Stable sort by pixel keeps depth order inside each pixel.
    perm = np.argsort(pair_pix, kind="stable")
    return pair_pix[perm], pair_splat[perm]


def render(cloud, cam: CameraView, t_early_out: float = T_EARLY_OUT) -> RenderOutput:
    """Render the cloud into a grayscale image in [0, 1].

    Splats are composited front-to-back in depth order (ties broken by cloud
    index) and truncated at their 3-sigma ellipse bounding box. Compositing
    of a pixel stops once transmittance drops below ``t_early_out`` (pass 0
    for exhaustive compositing).
    """
    cloud = _as_cloud(cloud)
    image = np.zeros((cam.height, cam.width))
    p = _project(cloud, cam)
    if p is None:
        empty = np.zeros(0, dtype=np.int64)
        state = RenderState(
            n_gaussians=len(cloud), width=cam.width, height=cam.height,
            idx=empty, u=np.zeros(0), v=np.zeros(0), depth=np.zeros(0),
            conic=np.zeros((0, 3)), alpha=np.zeros(0), cam_xyz=np.zeros((0, 3)),
            T2=np.zeros((0, 2, 3)), Sigma=np.zeros((0, 3, 3)), Rv=np.zeros((0, 3, 3)),
            s2=np.zeros((0, 3)), quats=np.zeros((0, 4)), fx=cam.fx, fy=cam.fy,
            pair_pix=empty, pair_splat=empty, seg_start=empty, seg_end=empty,
            t_early_out=t_early_out,
        )
        return RenderOutput(image=image, state=state)

    pair_pix, pair_splat = _build_pairs(p, cam.width, cam.height)
    seg_start, seg_end = segment_bounds(pair_pix)
    if len(pair_pix):
        composite_forward(
            seg_start, seg_end, pair_pix, pair_splat,
            p["u"], p["v"], p["conic"][:, 0], p["conic"][:, 1], p["conic"][:, 2],
            p["alpha"], cam.width, image.reshape(-1), t_early_out,
        )
    state = RenderState(
        n_gaussians=len(cloud), width=cam.width, height=cam.height,
        idx=p["idx"], u=p["u"], v=p["v"], depth=p["depth"],
        conic=p["conic"], alpha=p["alpha"], cam_xyz=p["cam_xyz"],
        T2=p["T2"], Sigma=p["Sigma"], Rv=p["Rv"], s2=p["s2"], quats=p["quats"],
        fx=cam.fx, fy=cam.fy,
        pair_pix=pair_pix, pair_splat=pair_splat,
        seg_start=seg_start, seg_end=seg_end,
        t_early_out=t_early_out,
    )
    return RenderOutput(image=image, state=state)


def render_backward(
    cloud, cam: CameraView, upstream: np.ndarray, state: RenderState
) -> GaussianGradients:
    """Gradients of the scalar loss w.r.t. every raw Gaussian parameter.

    ``upstream`` is dLoss/dImage, (H, W). ``state`` must come from a render()
    of the same cloud and camera; mismatches raise RenderStateError. Culled
    Gaussians receive exactly zero gradient. Also accumulates per-Gaussian
    2D positional gradient norms (NDC-normalized) for density control.
    """
    cloud = _as_cloud(cloud)
    upstream = np.asarray(upstream, dtype=np.float64)
    if state.n_gaussians != len(cloud):
        raise RenderStateError(
            f"state was built for {state.n_gaussians} Gaussians, cloud has {len(cloud)}"
        )
    if upstream.shape != (state.height, state.width) or (
        cam.width != state.width or cam.height != state.height
    ):
        raise RenderStateError("upstream/camera dimensions do not match the forward pass")

    grads = GaussianGradients.zeros(len(cloud))
    V = len(state.idx)
    if V == 0:
        return grads

    g_alpha = np.zeros(V)
    g_u = np.zeros(V)
    g_v = np.zeros(V)
    g_ca = np.zeros(V)
    g_cb = np.zeros(V)
    g_cc = np.zeros(V)
    if len(state.pair_pix):
        composite_backward(
            state.seg_start, state.seg_end, state.pair_pix, state.pair_splat,
            state.u, state.v,
            state.conic[:, 0], state.conic[:, 1], state.conic[:, 2], state.alpha,
            state.width, upstream.reshape(-1), state.t_early_out,
            g_alpha, g_u, g_v, g_ca, g_cb, g_cc,
        )

    # conic -> 2D covariance: dC = -Lam Gbar Lam  (Lam = C^-1, both symmetric)
    la, lb, lc = state.conic[:, 0], state.conic[:, 1], state.conic[:, 2]
    Lam = np.empty((V, 2, 2))
    Lam[:, 0, 0] = la
    Lam[:, 0, 1] = lb
    Lam[:, 1, 0] = lb
    Lam[:, 1, 1] = lc
    Gbar = np.empty((V, 2, 2))
    Gbar[:, 0, 0] = g_ca
    Gbar[:, 0, 1] = 0.5 * g_cb
    Gbar[:, 1, 0] = 0.5 * g_cb
    Gbar[:, 1, 1] = g_cc
    dC = -np.einsum("nij,njk,nkl->nil", Lam, Gbar, Lam)

    # 2D covariance -> world covariance and projection rows (C = T2 Sigma T2^T)
    dSigma = np.einsum("nki,nkl,nlj->nij", state.T2, dC, state.T2)
    dT2 = 2.0 * np.einsum("nij,njk,nkl->nil", dC, state.T2, state.Sigma)
    dJ = np.einsum("nij,kj->nik", dT2, cam.R)

    # camera-space mean: through the projected mean and through J itself
    x, y, z = state.cam_xyz[:, 0], state.cam_xyz[:, 1], state.cam_xyz[:, 2]
    z2 = z * z
    z3 = z2 * z
    fx, fy = state.fx, state.fy
    dpc = np.empty((V, 3))
    dpc[:, 0] = g_u * fx / z - dJ[:, 0, 2] * fx / z2
    dpc[:, 1] = g_v * fy / z - dJ[:, 1, 2] * fy / z2
    dpc[:, 2] = (
        -g_u * fx * x / z2
        - g_v * fy * y / z2
        - dJ[:, 0, 0] * fx / z2
        - dJ[:, 1, 1] * fy / z2
        + dJ[:, 0, 2] * 2.0 * fx * x / z3
        + dJ[:, 1, 2] * 2.0 * fy * y / z3
    )
    dmean = dpc @ cam.R

    # world covariance -> rotation and log scales (Sigma = R D R^T)
    dR = 2.0 * np.einsum("nij,njk->nik", dSigma, state.Rv) * state.s2[:, None, :]
    M = np.einsum("nji,njk,nkl->nil", state.Rv, dSigma, state.Rv)
    dlog_scale = 2.0 * state.s2 * np.einsum("nii->ni", M)
    dquat = quat_rotation_backward(state.quats, dR)
    dopacity = g_alpha * state.alpha * (1.0 - state.alpha)

    idx = state.idx
    grads.mean[idx] = dmean
    grads.rot[idx] = dquat
    grads.log_scale[idx] = dlog_scale
    grads.opacity_raw[idx] = dopacity
    grads.pos2d_norm[idx] = np.hypot(
        g_u * (state.width / 2.0), g_v * (state.height / 2.0)
    )
    grads.visible[idx] = True
    return grads
