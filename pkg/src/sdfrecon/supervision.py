"""Signed-distance targets from per-view depth maps.

A space point is projected into a depth view, the stored depth is cast back
along the pixel ray, and the gap between the two — foreshortened by how
obliquely the ray meets the local depth surface — approximates the signed
distance to the observed surface. Per-view values are then fused across the
views of a mini-batch by majority sign and minimum magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class DepthView:
    """One calibrated view with depth, confidence and validity per pixel."""

    cam: "Camera"
    depth: np.ndarray       # (H, W) camera-space z, world units
    conf: np.ndarray        # (H, W) in [0, 1]
    valid: np.ndarray       # (H, W) bool

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.conf = np.asarray(self.conf, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not (self.depth.shape == self.conf.shape == self.valid.shape):
            raise ValueError("depth/conf/valid shapes differ")
        if np.any(self.depth[self.valid] <= 0):
            raise ValueError("valid depths must be positive")


@dataclass
class DistanceTarget:
    """Fused signed distance for one sample point."""

    x: np.ndarray
    l: float
    n_views_used: int


def project(cam, x):
    """Perspective projection of world points (n, 3).

    Returns (p, depth, in_front): pixel coordinates, camera-space z and a
    mask that is False behind the camera (z <= 0).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c = x @ cam.R.T + cam.t
    depth = c[:, 2]
    in_front = depth > 0
    pix = c @ cam.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        p = pix[:, :2] / pix[:, 2:3]
    return p, depth, in_front


def backproject(cam, p, depth):
    """World points for pixels p (n, 2) at camera-space depth (n,)."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    ones = np.ones((len(p), 1))
    d_cam = np.concatenate([p, ones], axis=-1) @ np.linalg.inv(cam.K).T
    return (d_cam * depth[:, None] - cam.t) @ cam.R


def pixel_dirs(cam, p):
    """Unit world-space ray directions through pixels p (n, 2)."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    ones = np.ones((len(p), 1))
    d_cam = np.concatenate([p, ones], axis=-1) @ np.linalg.inv(cam.K).T
    d_world = d_cam @ cam.R
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def depth_normal(view, p):
    """Unit surface normals at integer pixels p (n, 2) from one-sided depth
    differences, oriented toward the camera (n . v < 0).

    The right/down stencil is tried first; when a neighbor is invalid
    (dropped depth, silhouette rim) the other three one-sided stencils act
    as fallbacks, otherwise sparse dropout would cascade into losing most
    fusion votes. Returns (normals, ok); pixels with no usable stencil get
    ok=False.
    """
    p = np.atleast_2d(np.asarray(p))
    px = p[:, 0].astype(np.int64)
    py = p[:, 1].astype(np.int64)
    h, w = view.depth.shape
    normals = np.zeros((len(p), 3))
    ok = np.zeros(len(p), dtype=bool)
    pending = np.flatnonzero((px >= 1) & (px < w - 1) & (py >= 1) & (py < h - 1)
                             & view.valid[np.clip(py, 0, h - 1),
                                          np.clip(px, 0, w - 1)])
    for du, dv in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        if pending.size == 0:
            break
        x, y = px[pending], py[pending]
        usable = view.valid[y, x + du] & view.valid[y + dv, x]
        sub = pending[usable]
        pending = pending[~usable]
        if sub.size == 0:
            continue
        x, y = px[sub], py[sub]
        p0 = np.stack([x, y], axis=-1).astype(np.float64)
        x0 = backproject(view.cam, p0, view.depth[y, x])
        xu = backproject(view.cam, p0 + np.array([float(du), 0.0]),
                         view.depth[y, x + du])
        xv = backproject(view.cam, p0 + np.array([0.0, float(dv)]),
                         view.depth[y + dv, x])
        n = np.cross(xu - x0, xv - x0)
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        good = norm[:, 0] > 1e-300
        n = np.where(good[:, None], n / np.where(norm > 0, norm, 1.0), 0.0)
        v = pixel_dirs(view.cam, p0)
        flip = np.einsum("ij,ij->i", n, v) > 0
        n[flip] *= -1.0
        normals[sub[good]] = n[good]
        ok[sub[good]] = True
    return normals, ok


def approx_signed_distance(view, x, t_prob):
    """Per-view approximated signed distance for points x (n, 3).

    l = sgn[(x_D - x) . v] * (-n_d . v) * ||x_D - x|| where x_D casts the
    stored depth back along the pixel ray and n_d is the depth-derived
    normal. Points that fall outside the image, behind the camera, on
    invalid pixels or below the confidence threshold are rejected
    (those pixels count as background).

    Returns (l, ok) arrays.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n_pts = len(x)
    l = np.zeros(n_pts)
    p, _, in_front = project(view.cam, x)
    h, w = view.depth.shape
    pi = np.round(p).astype(np.int64)
    inb = (in_front & (pi[:, 0] >= 0) & (pi[:, 0] < w)
           & (pi[:, 1] >= 0) & (pi[:, 1] < h))
    idx = np.flatnonzero(inb)
    if idx.size == 0:
        return l, inb
    px, py = pi[idx, 0], pi[idx, 1]
    good = view.valid[py, px] & (view.conf[py, px] >= t_prob)
    idx = idx[good]
    if idx.size == 0:
        return l, np.zeros(n_pts, dtype=bool)
    px, py = pi[idx, 0], pi[idx, 1]
    p_pix = np.stack([px, py], axis=-1).astype(np.float64)
    nd, nd_ok = depth_normal(view, p_pix)
    idx = idx[nd_ok]
    if idx.size == 0:
        return l, np.zeros(n_pts, dtype=bool)
    nd = nd[nd_ok]
    p_pix = p_pix[nd_ok]
    px, py = p_pix[:, 0].astype(np.int64), p_pix[:, 1].astype(np.int64)
    x_d = backproject(view.cam, p_pix, view.depth[py, px])
    v = pixel_dirs(view.cam, p_pix)
    gap = x_d - x[idx]
    sign = np.sign(np.einsum("ij,ij->i", gap, v))
    obliquity = -np.einsum("ij,ij->i", nd, v)
    l_idx = sign * obliquity * np.linalg.norm(gap, axis=-1)
    ok = np.zeros(n_pts, dtype=bool)
    ok[idx] = True
    l[idx] = l_idx
    return l, ok


def fuse_distances(per_view, t_out):
    """Fuse one point's per-view distances by sign vote and minimum magnitude.

    The point is outside iff at least t_out values are positive. Among the
    values sharing the decided sign, the smallest magnitude wins. Returns
    None when no value carries the decided sign (undecided; caller drops the
    point).
    """
    vals = np.asarray(list(per_view), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("fuse_distances needs at least one value")
    outside = int((vals > 0).sum()) >= t_out
    same = vals[vals > 0] if outside else vals[vals <= 0]
    if same.size == 0:
        return None
    mag = np.abs(same).min()
    return mag if outside else -mag


def fuse_distances_batch(l, ok, t_out):
    """Vectorized fusion over points x views.

    l, ok: (n_points, n_views). Returns (fused (n,), decided (n,) bool,
    n_views_used (n,)).
    """
    l = np.asarray(l, dtype=np.float64)
    ok = np.asarray(ok, dtype=bool)
    pos = ok & (l > 0)
    neg = ok & ~pos
    outside = pos.sum(axis=1) >= t_out
    same = np.where(outside[:, None], pos, neg)
    mag = np.where(same, np.abs(l), np.inf).min(axis=1)
    decided = (ok.sum(axis=1) > 0) & np.isfinite(mag)
    fused = np.where(outside, mag, -mag)
    fused = np.where(decided, fused, 0.0)
    return fused, decided, same.sum(axis=1)


def sample_training_points(views, bbox, n_uniform, n_surface, jitter_sigma, rng):
    """Mix of uniform box samples and jittered depth backprojections.

    Surface points come from random valid pixels of random views, cast back
    to world space and perturbed by isotropic gaussian noise of scale
    jitter_sigma, then clamped into the box.
    """
    parts = []
    if n_uniform > 0:
        parts.append(bbox.sample(n_uniform, rng))
    if n_surface > 0 and views:
        pools = [np.flatnonzero(v.valid.reshape(-1)) for v in views]
        weights = np.array([len(p) for p in pools], dtype=np.float64)
        if weights.sum() > 0:
            choice = rng.choice(len(views), size=n_surface, p=weights / weights.sum())
            pts = np.zeros((n_surface, 3))
            for vi in np.unique(choice):
                rows = np.flatnonzero(choice == vi)
                view = views[vi]
                flat = pools[vi][rng.integers(0, len(pools[vi]), size=len(rows))]
                py, px = np.unravel_index(flat, view.depth.shape)
                p_pix = np.stack([px, py], axis=-1).astype(np.float64)
                pts[rows] = backproject(view.cam, p_pix, view.depth[py, px])
            if jitter_sigma > 0:
                pts = pts + rng.normal(0.0, jitter_sigma, size=pts.shape)
            parts.append(bbox.clamp(pts))
    if not parts:
        return np.zeros((0, 3))
    return np.concatenate(parts, axis=0)
