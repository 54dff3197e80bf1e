"""Training objectives and the staged weight schedule.

All losses return scalar tape Vars when fed graph nodes, so one backward
pass covers every term. Loss math lives here; the trainer assembles the
inputs (traced hits, fused targets, sampled points).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import ops
from . import fields as F
from .supervision import project


@dataclass(frozen=True)
class LossWeights:
    w_R: float
    w_F: float
    w_D: float
    w_E: float
    w_P: float

    def __post_init__(self):
        for name in ("w_R", "w_F", "w_D", "w_E", "w_P"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0")


@dataclass(frozen=True)
class StageSchedule:
    """Three-stage weighting over the training run.

    Stage boundaries are fractions of total steps; a boundary step belongs to
    the later stage. Render, Eikonal and indicator weights stay fixed; the
    distance and feature weights follow the per-stage table. From stage two
    on, the reduced distance weight applies only to samples whose fused
    |l(x)| is below near_band (a fraction of the bbox diagonal); far samples
    keep weight 1.
    """

    boundaries: tuple = (1.0 / 6.0, 1.0 / 2.0)
    stage_w_d: tuple = (1.0, 0.1, 0.01)
    stage_w_f: tuple = (0.0, 0.1, 0.01)
    w_R: float = 0.5
    w_E: float = 0.1
    w_P: float = 0.01
    near_band: float = 0.05
    # ablation switches
    disable_render: bool = False
    disable_feature: bool = False

    def __post_init__(self):
        b = self.boundaries
        if not (0.0 < b[0] < b[1] < 1.0):
            raise ValueError("stage boundaries must be increasing in (0, 1)")

    def stage_of(self, step, total_steps):
        frac = step / total_steps
        if frac < self.boundaries[0]:
            return 0
        if frac < self.boundaries[1]:
            return 1
        return 2

    def weights_at(self, step, total_steps):
        s = self.stage_of(step, total_steps)
        w_f = 0.0 if self.disable_feature else self.stage_w_f[s]
        w_r = 0.0 if self.disable_render else self.w_R
        return LossWeights(w_R=w_r, w_F=w_f, w_D=self.stage_w_d[s],
                           w_E=self.w_E, w_P=self.w_P)


def distance_loss(f, l, stats=None):
    """Mean |f(x) - l(x)| over the valid sample set.

    f: (m, 1) Var or array; l: (m,) targets. An empty set contributes 0 and
    bumps stats["empty_distance_batches"] when a stats dict is supplied.
    """
    m = len(np.asarray(l))
    if m == 0:
        if stats is not None:
            stats["empty_distance_batches"] = stats.get("empty_distance_batches", 0) + 1
        return 0.0
    r = ops.absolute(ops.reshape(f, (m,)) - np.asarray(l, dtype=np.float64))
    return ops.mean_(r)


def distance_loss_split(f, l, near_mask, stats=None):
    """Distance loss split into near/far components.

    Both parts are sums over their subset divided by the full count, so
    near + far equals the plain mean and each part can carry its own weight.
    """
    m = len(np.asarray(l))
    if m == 0:
        if stats is not None:
            stats["empty_distance_batches"] = stats.get("empty_distance_batches", 0) + 1
        return 0.0, 0.0
    near = np.asarray(near_mask, dtype=np.float64)
    r = ops.absolute(ops.reshape(f, (m,)) - np.asarray(l, dtype=np.float64))
    near_term = ops.sum_(r * near) / m
    far_term = ops.sum_(r * (1.0 - near)) / m
    return near_term, far_term


def eikonal_loss(grad):
    """Mean (||grad f|| - 1)^2 over sample points; grad is (m, 3)."""
    sq = ops.sum_(grad * grad, axis=-1)
    norm = ops.sqrt(sq)
    dev = norm - 1.0
    return ops.mean_(dev * dev)


def eikonal_loss_at(g, net, params, x):
    """Convenience: build the graph nodes at points x and reduce."""
    p = g.param_dict() if hasattr(g, "param_dict") else params
    _, _, _, grad = F.geometry_with_gradient(p, g.const(np.atleast_2d(x)), net)
    return eikonal_loss(grad)


def _project_var(g, cam, x_var):
    """Perspective projection of a point Var (m, 3) onto pixels (m, 2).

    The depth is clamped away from zero so rows that a caller masks out
    (behind the camera) stay finite instead of poisoning the batch with NaN.
    """
    c = x_var @ g.const(cam.R.T) + g.const(cam.t)
    pix = c @ g.const(cam.K.T)
    z = ops.clip(pix[..., 2:3], 1e-9, np.inf)
    return pix[..., 0:2] / z


def feature_loss(g, x_var, ref_view, src_views, margin=1.0):
    """Multi-view feature consistency at differentiable surface points.

    ref_view and src_views are (camera, FeatureMap) pairs; the reference
    projection moves with x too, so gradients flow through every sampling
    location. Source views whose projection leaves the image are dropped per
    hit; hits visible in no source view are skipped entirely.

    Returns (loss Var or 0.0, per-hit usable mask).
    """
    m = x_var.value.shape[0]
    x_primal = x_var.value
    cams = [ref_view[0]] + [sv[0] for sv in src_views]
    maps = [ref_view[1]] + [sv[1] for sv in src_views]
    masks = []
    for cam, fmap in zip(cams, maps):
        p, _, front = project(cam, x_primal)
        hgt, wid = fmap.data.shape[:2]
        sp = p * fmap.scale
        inb = front & ((sp[:, 0] >= margin) & (sp[:, 0] <= wid - 1 - margin)
                       & (sp[:, 1] >= margin) & (sp[:, 1] <= hgt - 1 - margin))
        masks.append(inb)
    src_ok = np.stack(masks[1:], axis=0)       # (N_v, m)
    usable = masks[0] & (src_ok.sum(axis=0) > 0)
    if not usable.any():
        return 0.0, usable
    idx = np.flatnonzero(usable)
    x_used = ops.take_rows(x_var, idx)
    n_c = maps[0].channels
    samples = []
    for cam, fmap in zip(cams, maps):
        p_var = _project_var(g, cam, x_used) * fmap.scale
        samples.append(ops.bilinear(fmap.data, p_var))
    per_hit = None
    counts = src_ok[:, idx].sum(axis=0).astype(np.float64)
    for i, s in enumerate(samples[1:]):
        w = src_ok[i, idx].astype(np.float64)
        diff = ops.sum_(ops.absolute(samples[0] - s), axis=-1)
        term = diff * w
        per_hit = term if per_hit is None else per_hit + term
    per_hit = per_hit / (counts * n_c)
    return ops.mean_(per_hit), usable


def render_loss(rgb, image_colors):
    """Mean absolute difference between rendered and observed colors.

    rgb: (m, 3) Var; image_colors: (m, 3) constants. Averages over pixels
    and channels.
    """
    m = len(np.atleast_2d(image_colors))
    if m == 0:
        return 0.0
    return ops.mean_(ops.absolute(rgb - np.asarray(image_colors, dtype=np.float64)))


def indicator_loss(g, net, params, pos_x, neg_x, detach_trunk=True, eps=1e-7):
    """Binary cross entropy pushing traced surface points to 1 and random
    space points to 0, each term normalized by its batch count.

    With detach_trunk (default) the trunk activations are treated as
    constants, so only the head rows of the shared output layer receive
    gradient; set it False to let the objective shape the trunk too.
    """
    terms = []
    for x, positive in ((pos_x, True), (neg_x, False)):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if len(x) == 0:
            continue
        if detach_trunk:
            h = F.trunk_forward(params.to_dict(), x, net)
            logit = g.const(h) @ g.param("g.Wout") + g.param("g.bout")
            logit = logit[..., 1:2]
        else:
            _, _, logit = F.geometry_forward(g.param_dict(), g.const(x), net)
        prob = ops.clip(ops.sigmoid(logit), eps, 1.0 - eps)
        inner = prob if positive else 1.0 - prob
        terms.append(-ops.mean_(ops.log(inner)))
    if not terms:
        return 0.0
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def total_loss(step, total_steps, schedule, components):
    """Weighted sum of the per-term losses at this step.

    components: dict with keys render, feature, dist_near, dist_far,
    eikonal, indicator (Vars or floats; missing/zero entries are skipped).
    dist_far always keeps weight 1 — only near-surface samples get the
    staged reduction. Returns (total, LossWeights used).
    """
    w = schedule.weights_at(step, total_steps)
    total = 0.0
    for key, weight in (("render", w.w_R), ("feature", w.w_F),
                        ("dist_near", w.w_D), ("dist_far", 1.0),
                        ("eikonal", w.w_E), ("indicator", w.w_P)):
        term = components.get(key, 0.0)
        if weight == 0.0 or (isinstance(term, float) and term == 0.0):
            continue
        total = total + term * weight
    return total, w
