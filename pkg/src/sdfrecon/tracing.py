"""Camera rays, sphere tracing and the first-order differentiable hit."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import CompGraph, Var


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: pixel = K (R x + t), world origin at -R^T t."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "K", np.asarray(self.K, dtype=np.float64))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        if self.K.shape != (3, 3) or self.R.shape != (3, 3):
            raise ValueError("K and R must be 3x3")
        if np.linalg.norm(self.R.T @ self.R - np.eye(3)) >= 1e-8:
            raise ValueError("R is not orthonormal")
        if (np.abs(np.tril(self.K, -1)).max() > 1e-12 or self.K[0, 0] <= 0
                or self.K[1, 1] <= 0):
            raise ValueError("K must be upper-triangular with positive focals")

    @property
    def center(self):
        return -self.R.T @ self.t

    @property
    def optical_axis(self):
        """World-space viewing direction of the camera z-axis."""
        return self.R.T @ np.array([0.0, 0.0, 1.0])

    def to_dict(self):
        return {"K": self.K.reshape(-1).tolist(), "R": self.R.reshape(-1).tolist(),
                "t": self.t.tolist(), "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["K"]).reshape(3, 3), np.asarray(d["R"]).reshape(3, 3),
                   np.asarray(d["t"]), int(d["width"]), int(d["height"]))


@dataclass
class RayBatch:
    """Rays through pixels of one view; direction rows are unit length."""

    view_id: int
    pixel: np.ndarray      # (n, 2) sub-pixel image coordinates (x=col, y=row)
    origin: np.ndarray     # (n, 3)
    direction: np.ndarray  # (n, 3)

    def __len__(self):
        return len(self.pixel)


@dataclass
class SurfaceHits:
    """Sphere-tracing results for a batch of rays."""

    x0: np.ndarray          # (n, 3) traced points (valid where converged)
    f_at_x0: np.ndarray     # (n,)
    converged: np.ndarray   # (n,) bool
    steps: np.ndarray       # (n,) int
    t: np.ndarray           # (n,) ray parameter at exit
    grad_at_x0: np.ndarray | None = field(default=None)  # (n, 3), see fill_gradients


def pixel_ray(cam, p):
    """Rays through image points p (n, 2) or (2,); returns a RayBatch."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    ones = np.ones((len(p), 1))
    d_cam = np.concatenate([p, ones], axis=-1) @ np.linalg.inv(cam.K).T
    d_world = d_cam @ cam.R  # == (R^T d_cam^T)^T
    v = d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)
    o = np.broadcast_to(cam.center, (len(p), 3)).copy()
    return RayBatch(view_id=-1, pixel=p, origin=o, direction=v)


def ray_bbox_range(origin, direction, bbox):
    """Slab intersection; returns (t_near, t_far, hit) arrays."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t0 = (bbox.lo_arr - origin) * inv
        t1 = (bbox.hi_arr - origin) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1)).max(axis=-1)
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1)).min(axis=-1)
    hit = (tmax >= np.maximum(tmin, 0.0)) & np.isfinite(tmax)
    return tmin, tmax, hit


def sphere_trace(field_fn, rays, bbox, eps_hit=None, max_steps=128,
                 damping=0.9, refine_steps=0):
    """March each ray by the damped field value until |f| < eps_hit.

    field_fn maps points (m, 3) to distances (m,). Rays that leave the box or
    exhaust max_steps are misses, reported in the result rather than raised.
    The damping tolerates fields whose gradient norm exceeds one mid-training.
    """
    if eps_hit is None:
        eps_hit = 1e-5 * bbox.diagonal
    o, v = rays.origin, rays.direction
    n = len(o)
    t_near, t_far, inside = ray_bbox_range(o, v, bbox)
    t = np.where(inside, np.maximum(t_near, 0.0) + 1e-12, 0.0)
    active = inside.copy()
    converged = np.zeros(n, dtype=bool)
    steps = np.zeros(n, dtype=np.int64)
    f_at = np.zeros(n)
    x0 = o + t[:, None] * v
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        x = o[idx] + t[idx, None] * v[idx]
        f = field_fn(x)
        steps[idx] += 1
        hit = np.abs(f) < eps_hit
        hit_idx = idx[hit]
        converged[hit_idx] = True
        x0[hit_idx] = x[hit]
        f_at[hit_idx] = f[hit]
        active[hit_idx] = False
        live = idx[~hit]
        t[live] += damping * f[~hit]
        gone = live[(t[live] > t_far[live]) | (t[live] < t_near[live] - 1e-9)]
        active[gone] = False
    if refine_steps > 0 and converged.any():
        _secant_refine(field_fn, o, v, t, converged, f_at, x0, eps_hit,
                       refine_steps)
    return SurfaceHits(x0=x0, f_at_x0=f_at, converged=converged, steps=steps, t=t)


def _secant_refine(field_fn, o, v, t, converged, f_at, x0, eps_hit, n_iter):
    idx = np.flatnonzero(converged)
    t1 = t[idx]
    f1 = f_at[idx]
    t0 = t1 - np.maximum(np.abs(f1), eps_hit)
    f0 = field_fn(o[idx] + t0[:, None] * v[idx])
    for _ in range(n_iter):
        df = f1 - f0
        safe = np.abs(df) > 1e-300
        step = np.where(safe, f1 * (t1 - t0) / np.where(safe, df, 1.0), 0.0)
        t0, f0 = t1, f1
        t1 = t1 - step
        f1 = field_fn(o[idx] + t1[:, None] * v[idx])
    t[idx] = t1
    f_at[idx] = f1
    x0[idx] = o[idx] + t1[:, None] * v[idx]


def differentiable_hit(g, f_builder, x0, grad0, v, f0=None, eps_grazing=1e-4):
    """First-order expression for traced points as a function of parameters.

    x(theta) = x0 - (f(x0; theta) - f(x0; theta0)) / (grad0 . v) * v, with the
    denominator and f(x0; theta0) held constant; at the recording parameters
    it reproduces x0 exactly. Rays with |grad0 . v| <= eps_grazing are
    excluded (they would blow up the step); the returned mask says which rows
    survived.

    f_builder(graph, points) must return the distance head (m, 1) as a Var.
    When f0 is None the recorded primal itself is used as the frozen constant,
    which guarantees exactness at theta0.
    """
    x0 = np.atleast_2d(x0)
    grad0 = np.atleast_2d(grad0)
    v = np.atleast_2d(v)
    denom = np.einsum("ij,ij->i", grad0, v)
    keep = np.abs(denom) > eps_grazing
    if not keep.any():
        return None, keep
    x0_k, v_k, den_k = x0[keep], v[keep], denom[keep]
    f_var = f_builder(g, x0_k)
    if not isinstance(f_var, Var):
        raise TypeError("f_builder must return a tape Var")
    f0_k = f_var.value.copy() if f0 is None else np.asarray(f0)[keep].reshape(-1, 1)
    scale = v_k / den_k[:, None]
    x_var = g.const(x0_k) - (f_var - g.const(f0_k)) * g.const(scale)
    return x_var, keep
