"""Core geometry: cameras, quaternion algebra, Gaussian covariances, parametric edges.

Conventions used throughout the package:

* Quaternions are scalar-first ``(w, x, y, z)``. Stored values may be
  unnormalized; every consumer normalizes before use so optimizers can move
  freely in 4D.
* Scales are stored as logs (``scale = exp(log_scale)``) and opacity as a raw
  logit (``opacity = sigmoid(opacity_raw)``), keeping the optimization
  unconstrained while guaranteeing positivity / (0, 1) bounds.
* Cameras follow the OpenCV pinhole convention: x right, y down, z forward,
  pixel coordinates measured at integer pixel centers, ``u = fx*x/z + cx``.
* World-to-camera poses are a rotation ``R`` plus translation ``t`` with
  ``p_cam = R @ p_world + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EdgeGaussian",
    "GaussianCloud",
    "CameraView",
    "OrientedPoint",
    "LineSegment",
    "CubicBezier",
    "ParametricEdge",
    "normalize_quaternion",
    "quat_to_rotation",
    "quats_to_rotations",
    "quat_rotation_backward",
    "random_unit_quaternions",
    "covariance",
    "principal_direction",
    "project_point",
    "sigmoid",
    "logit",
]


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    """Inverse sigmoid; p must lie strictly in (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


# ---------------------------------------------------------------------------
# quaternions


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("cannot normalize a zero quaternion")
    return q / n


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; normalizes internally."""
    w, x, y, z = normalize_quaternion(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quats_to_rotations(quats: np.ndarray) -> np.ndarray:
    """Batched quaternion -> rotation conversion, (N, 4) -> (N, 3, 3)."""
    q = np.asarray(quats, dtype=np.float64)
    n = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("cannot normalize a zero quaternion")
    w, x, y, z = (q / n).T
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rotation_backward(quats: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Backpropagate rotation-matrix gradients to raw quaternions.

    Given dL/dR for the rotation produced by each (possibly unnormalized)
    quaternion, returns dL/dq including the normalization Jacobian.

    Args:
        quats: (N, 4) raw quaternions.
        grad_R: (N, 3, 3) gradients w.r.t. the rotation matrices.

    Returns:
        (N, 4) gradients w.r.t. the raw quaternions.
    """
    q = np.asarray(quats, dtype=np.float64)
    n = np.linalg.norm(q, axis=1, keepdims=True)
    qh = q / n
    w, x, y, z = qh.T
    g = grad_R

    # dR/d(w,x,y,z) of the normalized quaternion, contracted against grad_R.
    dw = 2 * (
        -z * g[:, 0, 1] + y * g[:, 0, 2]
        + z * g[:, 1, 0] - x * g[:, 1, 2]
        - y * g[:, 2, 0] + x * g[:, 2, 1]
    )
    dx = 2 * (
        y * g[:, 0, 1] + z * g[:, 0, 2]
        + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    dy = 2 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2]
        + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    dz = 2 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2]
        + w * g[:, 1, 0] - 2 * z * g[:, 1, 1] + y * g[:, 1, 2]
        + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    dqh = np.stack([dw, dx, dy, dz], axis=1)
    # Through q_hat = q / |q|:  dq = (dqh - qh * <qh, dqh>) / |q|
    return (dqh - qh * np.sum(qh * dqh, axis=1, keepdims=True)) / n


def random_unit_quaternions(n: int, rng: np.random.Generator) -> np.ndarray:
    """Quaternions uniform on the unit sphere in R^4 (uniform rotations)."""
    q = rng.normal(size=(n, 4))
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    # Resample the (measure-zero) degenerate draws.
    while np.any(norms < 1e-12):
        bad = norms[:, 0] < 1e-12
        q[bad] = rng.normal(size=(int(bad.sum()), 4))
        norms = np.linalg.norm(q, axis=1, keepdims=True)
    return q / norms


# ---------------------------------------------------------------------------
# Gaussians


@dataclass
class EdgeGaussian:
    """One oriented edge point: an anisotropic 3D Gaussian.

    Raw parameters only; activations are applied on access. The rendered
    intensity is a constant 1.0 (white edge on black background), so opacity
    alone carries appearance.
    """

    mean: np.ndarray          # (3,) scene units
    rot: np.ndarray           # (4,) raw quaternion (w, x, y, z)
    log_scale: np.ndarray     # (3,) scale = exp(log_scale)
    opacity_raw: float        # opacity = sigmoid(opacity_raw)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.opacity_raw = float(self.opacity_raw)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_raw))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotation(self.rot)


def covariance(rot: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """3x3 covariance R S S^T R^T with S = diag(exp(log_scale)).

    Total function: the quaternion is normalized internally and any log scale
    is valid. The result is symmetric PSD with eigenvalues exp(log_scale)^2.
    """
    R = quat_to_rotation(rot)
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    return (R * s2) @ R.T


def principal_direction(g: EdgeGaussian) -> np.ndarray:
    """Unit direction of largest variance: the rotation column of the largest
    activated scale. Ties break to the lowest axis index (argmax semantics)."""
    axis = int(np.argmax(g.log_scale))
    return quat_to_rotation(g.rot)[:, axis]


class GaussianCloud:
    """Struct-of-arrays container for a set of EdgeGaussians.

    All batch math in the package operates on these arrays; ``EdgeGaussian``
    is the per-item view used at API boundaries and in tests.
    """

    def __init__(self, means, rots, log_scales, opacity_raws):
        self.means = np.ascontiguousarray(means, dtype=np.float64).reshape(-1, 3)
        self.rots = np.ascontiguousarray(rots, dtype=np.float64).reshape(-1, 4)
        self.log_scales = np.ascontiguousarray(log_scales, dtype=np.float64).reshape(-1, 3)
        self.opacity_raws = np.ascontiguousarray(opacity_raws, dtype=np.float64).reshape(-1)
        n = len(self.means)
        if not (len(self.rots) == len(self.log_scales) == len(self.opacity_raws) == n):
            raise ValueError("cloud arrays have mismatched lengths")

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianCloud":
        gs = list(gaussians)
        if not gs:
            return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0))
        return cls(
            np.stack([g.mean for g in gs]),
            np.stack([g.rot for g in gs]),
            np.stack([g.log_scale for g in gs]),
            np.array([g.opacity_raw for g in gs]),
        )

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> EdgeGaussian:
        return EdgeGaussian(self.means[i], self.rots[i], self.log_scales[i], self.opacity_raws[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.means.copy(), self.rots.copy(), self.log_scales.copy(), self.opacity_raws.copy()
        )

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_raws)

    def rotations(self) -> np.ndarray:
        return quats_to_rotations(self.rots)

    def covariances(self) -> np.ndarray:
        R = self.rotations()
        s2 = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", R, s2, R)

    def principal_axes(self) -> np.ndarray:
        """Index of the largest scale per Gaussian (ties -> lowest index)."""
        return np.argmax(self.log_scales, axis=1)

    def principal_directions(self) -> np.ndarray:
        R = self.rotations()
        axes = self.principal_axes()
        return R[np.arange(len(self)), :, axes]

    def select(self, idx) -> "GaussianCloud":
        return GaussianCloud(
            self.means[idx], self.rots[idx], self.log_scales[idx], self.opacity_raws[idx]
        )


# ---------------------------------------------------------------------------
# cameras


@dataclass
class CameraView:
    """Pinhole camera with a world-to-camera pose and optional target image."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray                      # (3, 3) world-to-camera rotation
    t: np.ndarray                      # (3,)   world-to-camera translation
    width: int
    height: int
    target: np.ndarray | None = None   # (height, width) grayscale in [0, 1]

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.target is not None:
            self.target = np.asarray(self.target, dtype=np.float64)
            if self.target.shape != (self.height, self.width):
                raise ValueError(
                    f"target shape {self.target.shape} does not match "
                    f"{self.height}x{self.width}"
                )

    def world_to_cam_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    def transform(self, points: np.ndarray) -> np.ndarray:
        """World points (N, 3) -> camera coordinates (N, 3)."""
        return points @ self.R.T + self.t


BEHIND_CAMERA_Z = 1e-8


def project_point(cam: CameraView, p: np.ndarray):
    """Project a world point; returns ((u, v), depth) or None if behind camera.

    A None return is the "behind camera" signal; callers must cull such
    points themselves (batch render paths do this internally).
    """
    pc = cam.R @ np.asarray(p, dtype=np.float64).reshape(3) + cam.t
    z = pc[2]
    if z <= BEHIND_CAMERA_Z:
        return None
    u = cam.fx * pc[0] / z + cam.cx
    v = cam.fy * pc[1] / z + cam.cy
    return np.array([u, v]), float(z)


# ---------------------------------------------------------------------------
# oriented points and parametric edges


@dataclass
class OrientedPoint:
    """Position plus unit direction; the sign of the direction carries no
    meaning (edges are unoriented)."""

    position: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"direction must be unit norm, got |d| = {n}")


@dataclass
class LineSegment:
    p0: np.ndarray
    p1: np.ndarray

    def __post_init__(self):
        self.p0 = np.asarray(self.p0, dtype=np.float64).reshape(3)
        self.p1 = np.asarray(self.p1, dtype=np.float64).reshape(3)
        if np.array_equal(self.p0, self.p1):
            raise ValueError("degenerate segment: identical endpoints")

    @property
    def points(self) -> np.ndarray:
        return np.stack([self.p0, self.p1])

    def evaluate(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)[..., None]
        return (1.0 - t) * self.p0 + t * self.p1

    def length(self) -> float:
        return float(np.linalg.norm(self.p1 - self.p0))


@dataclass
class CubicBezier:
    c0: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    c3: np.ndarray

    def __post_init__(self):
        for name in ("c0", "c1", "c2", "c3"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        if np.array_equal(self.c0, self.c3):
            raise ValueError("degenerate curve: identical endpoints")

    @property
    def points(self) -> np.ndarray:
        return np.stack([self.c0, self.c1, self.c2, self.c3])

    def evaluate(self, t) -> np.ndarray:
        """Evaluate at parameter(s) t in [0, 1] via the Bernstein basis."""
        t = np.asarray(t, dtype=np.float64)[..., None]
        s = 1.0 - t
        return (
            s * s * s * self.c0
            + 3.0 * s * s * t * self.c1
            + 3.0 * s * t * t * self.c2
            + t * t * t * self.c3
        )


ParametricEdge = LineSegment | CubicBezier
