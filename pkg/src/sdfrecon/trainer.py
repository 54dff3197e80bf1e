"""End-to-end optimization loop.

Each step samples a mini-batch of views, traces rays against the current
field, fuses per-view signed-distance targets, assembles every loss term on
one tape and applies a bias-corrected Adam update. All randomness flows from
one Generator owned by the state, so a fixed seed reproduces the loss log
bitwise and checkpoint resume is invariant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields as dc_fields, replace
from pathlib import Path

import numpy as np

from . import fields as F
from . import losses as L
from . import supervision as sup
from .bbox import BBox
from .diffcore import CompGraph, NumericError, ParamVector, ops
from .losses import StageSchedule
from .mvsdata import bilinear_sample, in_bounds_mask
from .tracing import RayBatch, differentiable_hit, pixel_ray, sphere_trace


@dataclass(frozen=True)
class TrainConfig:
    # optimization
    total_steps: int = 2000
    lr: float = 1e-3
    lr_drop_points: tuple = (4.0 / 6.0, 5.0 / 6.0)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # per-step sampling
    batch_views: int = 4
    rays_per_view: int = 512
    space_samples: int = 2048
    surface_point_frac: float = 0.5
    jitter_frac: float = 0.01          # of bbox diagonal
    neg_per_pos: float = 1.0
    # depth supervision
    t_out: int = 2
    t_prob: float = 0.3
    # tracing
    eps_hit_frac: float = 1e-5
    max_trace_steps: int = 128
    step_damping: float = 0.9
    eps_grazing: float = 1e-4
    refine_steps: int = 0
    miss_rays_as_negatives: bool = False
    # loss schedule
    stage_boundaries: tuple = (1.0 / 6.0, 1.0 / 2.0)
    stage_w_d: tuple = (1.0, 0.1, 0.01)
    stage_w_f: tuple = (0.0, 0.1, 0.01)
    w_render: float = 0.5
    w_eikonal: float = 0.1
    w_indicator: float = 0.01
    near_band: float = 0.05
    disable_render: bool = False
    disable_feature: bool = False
    detach_indicator_trunk: bool = False
    split_eikonal_points: bool = False
    n_src_views: int = 2
    # networks (paper scale: 8x512 trunk, 4x512 light field, d_z 256, pe 6/4)
    geo_hidden: tuple = (128, 128, 128, 128)
    geo_skip: int = 2
    pe_pos: int = 6
    d_z: int = 32
    rad_hidden: tuple = (64, 64, 64)
    pe_view: int = 4
    softplus_beta: float = 100.0
    # bookkeeping
    log_every: int = 10
    checkpoint_every: int = 0          # 0: final checkpoint only

    def schedule(self):
        return StageSchedule(boundaries=tuple(self.stage_boundaries),
                             stage_w_d=tuple(self.stage_w_d),
                             stage_w_f=tuple(self.stage_w_f),
                             w_R=self.w_render, w_E=self.w_eikonal,
                             w_P=self.w_indicator, near_band=self.near_band,
                             disable_render=self.disable_render,
                             disable_feature=self.disable_feature)

    def build_nets(self):
        geo = F.GeometryNet(hidden=tuple(self.geo_hidden), skip_at=self.geo_skip,
                            pe=F.PosEncoding(self.pe_pos), d_z=self.d_z,
                            beta=self.softplus_beta)
        rad = F.RadianceNet(hidden=tuple(self.rad_hidden),
                            pe_view=F.PosEncoding(self.pe_view), d_z=self.d_z,
                            beta=self.softplus_beta)
        return geo, rad

    @classmethod
    def from_file(cls, path, **overrides):
        """TOML config file plus keyword overrides (CLI flags)."""
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dc_fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        coerced = {k: (tuple(v) if isinstance(v, list) else v)
                   for k, v in data.items()}
        return cls(**coerced)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(params, grads, moments, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected Adam update; returns updated flat values.

    Non-finite gradients reject the step (raised, state untouched).
    """
    grads = np.asarray(grads)
    if grads.shape != params.shape:
        raise ValueError("gradient shape mismatch")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient; step rejected")
    moments.t += 1
    moments.m = beta1 * moments.m + (1 - beta1) * grads
    moments.v = beta2 * moments.v + (1 - beta2) * grads * grads
    m_hat = moments.m / (1 - beta1 ** moments.t)
    v_hat = moments.v / (1 - beta2 ** moments.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)


def lr_at(step, cfg):
    """Base rate scaled down by 10 at each configured drop point."""
    lr = cfg.lr
    frac = step / cfg.total_steps
    for point in cfg.lr_drop_points:
        if frac >= point:
            lr *= 0.1
    return lr


@dataclass
class TrainState:
    geo: F.GeometryNet
    rad: F.RadianceNet
    params: ParamVector
    adam: AdamState
    rng: np.random.Generator
    step: int = 0
    stats: dict = field(default_factory=dict)


def init_state(cfg, bbox):
    geo, rad = cfg.build_nets()
    rng = np.random.default_rng(cfg.seed)
    params = F.init_params(geo, rad, bbox, rng)
    adam = AdamState(m=np.zeros(params.size), v=np.zeros(params.size))
    return TrainState(geo=geo, rad=rad, params=params, adam=adam, rng=rng)


def neighbor_views(scene, n_src):
    """Per view: the n_src nearest other cameras by optical center."""
    centers = np.stack([v.cam.center for v in scene.views])
    d = np.linalg.norm(centers[:, None] - centers[None, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1)
    return [list(order[i, :n_src]) for i in range(len(scene.views))]


def _sample_rays(scene, view_id, n_rays, t_prob, rng):
    """Uniform pixel draw; rays on filtered pixels are never traced."""
    view = scene.views[view_id]
    h, w = view.depth.shape
    flat = rng.integers(0, h * w, size=n_rays)
    py, px = np.unravel_index(flat, (h, w))
    keep = view.valid[py, px] & (view.conf[py, px] >= t_prob)
    pix = np.stack([px[keep], py[keep]], axis=-1).astype(np.float64)
    rays = pixel_ray(view.cam, pix) if len(pix) else RayBatch(
        view_id, np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)))
    rays.view_id = view_id
    return rays


def train_step(state, scene, cfg, neighbors=None):
    """One optimization step; mutates state in place and returns a report.

    Numeric failures (non-finite loss or gradient) leave the state unchanged
    and are flagged in the report.
    """
    rng = state.rng
    bbox = scene.bbox
    diag = bbox.diagonal
    n_views = len(scene.views)
    if neighbors is None:
        neighbors = neighbor_views(scene, cfg.n_src_views)
    schedule = cfg.schedule()
    weights = schedule.weights_at(state.step, cfg.total_steps)

    batch = np.sort(rng.choice(n_views, size=min(cfg.batch_views, n_views),
                               replace=False))
    ray_batches = [_sample_rays(scene, int(v), cfg.rays_per_view, cfg.t_prob, rng)
                   for v in batch]

    n_surface = int(round(cfg.space_samples * cfg.surface_point_frac))
    n_uniform = cfg.space_samples - n_surface
    batch_views = [scene.views[int(v)] for v in batch]
    space_x = sup.sample_training_points(batch_views, bbox, n_uniform, n_surface,
                                         cfg.jitter_frac * diag, rng)
    eik_x = bbox.sample(cfg.space_samples, rng) if cfg.split_eikonal_points else None

    # fused signed-distance targets over the mini-batch views
    per_l = np.zeros((len(space_x), len(batch_views)))
    per_ok = np.zeros_like(per_l, dtype=bool)
    for k, view in enumerate(batch_views):
        per_l[:, k], per_ok[:, k] = sup.approx_signed_distance(view, space_x,
                                                               cfg.t_prob)
    fused, decided, _ = sup.fuse_distances_batch(per_l, per_ok, cfg.t_out)
    near = np.abs(fused) < cfg.near_band * diag

    # trace all rays at the current parameters
    pdict = state.params.to_dict()
    field_fn = lambda X: F.geometry_forward(pdict, X, state.geo)[0][:, 0]
    all_rays = RayBatch(
        view_id=-1,
        pixel=np.concatenate([r.pixel for r in ray_batches]),
        origin=np.concatenate([r.origin for r in ray_batches]),
        direction=np.concatenate([r.direction for r in ray_batches]))
    hits = sphere_trace(field_fn, all_rays, bbox, cfg.eps_hit_frac * diag,
                        cfg.max_trace_steps, cfg.step_damping, cfg.refine_steps)
    conv_idx = np.flatnonzero(hits.converged)
    if conv_idx.size:
        _, _, _, grad_np = F.geometry_with_gradient(pdict, hits.x0[conv_idx],
                                                    state.geo)
        grad_all = np.zeros_like(hits.x0)
        grad_all[conv_idx] = grad_np
        hits.grad_at_x0 = grad_all
    pos_x = hits.x0[conv_idx]
    n_neg = max(int(round(len(pos_x) * cfg.neg_per_pos)), 64)
    neg_x = bbox.sample(n_neg, rng)
    if cfg.miss_rays_as_negatives:
        neg_x = np.concatenate([neg_x, _miss_points(all_rays, hits, bbox, rng)])

    report = {"step": state.step, "lr": lr_at(state.step, cfg),
              "hits": int(conv_idx.size), "targets": int(decided.sum()),
              "weights": weights}
    try:
        g = CompGraph(state.params)
        p = g.param_dict()
        comps = {}

        f_sp, _, _, grad_sp = F.geometry_with_gradient(p, g.const(space_x),
                                                       state.geo)
        dec_idx = np.flatnonzero(decided)
        comps["dist_near"], comps["dist_far"] = L.distance_loss_split(
            ops.take_rows(f_sp, dec_idx), fused[dec_idx], near[dec_idx],
            state.stats)
        if eik_x is not None:
            _, _, _, grad_eik = F.geometry_with_gradient(p, g.const(eik_x),
                                                         state.geo)
            comps["eikonal"] = L.eikonal_loss(grad_eik)
        else:
            comps["eikonal"] = L.eikonal_loss(grad_sp)

        if weights.w_R > 0 or weights.w_F > 0:
            rend_terms, feat_terms = [], []
            offset = 0
            f_builder = lambda gg, pts: F.geometry_forward(p, gg.const(pts),
                                                           state.geo)[0]
            for rb, vid in zip(ray_batches, batch):
                sl = slice(offset, offset + len(rb))
                offset += len(rb)
                conv = hits.converged[sl]
                if not conv.any():
                    continue
                x0 = hits.x0[sl][conv]
                grad0 = hits.grad_at_x0[sl][conv]
                dirs = rb.direction[conv]
                pix = rb.pixel[conv]
                x_var, kept = differentiable_hit(g, f_builder, x0, grad0, dirs,
                                                 eps_grazing=cfg.eps_grazing)
                if x_var is None:
                    continue
                dirs_k, pix_k = dirs[kept], pix[kept]
                view = scene.views[int(vid)]
                if weights.w_R > 0:
                    _, z_h, _, n_h = F.geometry_with_gradient(p, x_var, state.geo)
                    rgb = F.radiance_forward(p, x_var, z_h, n_h,
                                             g.const(dirs_k), state.rad)
                    img = scene.images[int(vid)]
                    colors = img[pix_k[:, 1].astype(int), pix_k[:, 0].astype(int)]
                    rend_terms.append((L.render_loss(rgb, colors), len(pix_k)))
                if weights.w_F > 0:
                    ref = (view.cam, scene.features[int(vid)])
                    srcs = [(scene.views[j].cam, scene.features[j])
                            for j in neighbors[int(vid)]]
                    floss, usable = L.feature_loss(g, x_var, ref, srcs)
                    if usable.any():
                        feat_terms.append((floss, int(usable.sum())))
            comps["render"] = _pool(rend_terms)
            comps["feature"] = _pool(feat_terms)

        comps["indicator"] = L.indicator_loss(
            g, state.geo, state.params, pos_x, neg_x,
            detach_trunk=cfg.detach_indicator_trunk)

        total, weights = L.total_loss(state.step, cfg.total_steps, schedule,
                                      comps)
        if isinstance(total, float):
            raise NumericError("no active loss terms")
        grad = g.backward(total)
        new_values = adam_step(state.params.values, grad, state.adam,
                               lr_at(state.step, cfg), cfg.adam_beta1,
                               cfg.adam_beta2, cfg.adam_eps)
        state.params.values[:] = new_values
    except NumericError as err:
        report["error"] = str(err)
        state.step += 1
        return report

    report["total"] = float(ops.value_of(total))
    for key in ("render", "feature", "dist_near", "dist_far", "eikonal",
                "indicator"):
        term = comps.get(key, 0.0)
        report[key] = float(ops.value_of(term)) if not isinstance(term, float) \
            else term
    state.step += 1
    return report


def _pool(terms):
    """Count-weighted mean of per-view loss terms."""
    if not terms:
        return 0.0
    total_count = sum(c for _, c in terms)
    pooled = 0.0
    for term, count in terms:
        pooled = pooled + term * (count / total_count)
    return pooled


def _miss_points(rays, hits, bbox, rng):
    """Random in-box points along rays that were traced but never hit."""
    from .tracing import ray_bbox_range
    miss = ~hits.converged
    if not miss.any():
        return np.zeros((0, 3))
    o, v = rays.origin[miss], rays.direction[miss]
    t0, t1, ok = ray_bbox_range(o, v, bbox)
    o, v = o[ok], v[ok]
    t0, t1 = np.maximum(t0[ok], 0.0), t1[ok]
    t = t0 + (t1 - t0) * rng.random(len(o))
    return o + t[:, None] * v


def format_report(report):
    parts = [f"step={report['step']}", f"lr={report['lr']:.6e}"]
    if "error" in report:
        parts.append(f"error={report['error']!r}")
        return " ".join(parts)
    for key in ("total", "dist_near", "dist_far", "feature", "render",
                "eikonal", "indicator"):
        parts.append(f"{key}={report[key]:.17g}")
    parts.append(f"hits={report['hits']}")
    parts.append(f"targets={report['targets']}")
    return " ".join(parts)


def train(scene, cfg, out_dir=None, log_fn=None):
    """Full training run; returns the final state.

    When out_dir is given, writes loss_log.txt (one line per step) and
    checkpoint.npz (plus periodic checkpoints if configured).
    """
    state = init_state(cfg, scene.bbox)
    neighbors = neighbor_views(scene, cfg.n_src_views)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_lines = []
    for _ in range(cfg.total_steps):
        report = train_step(state, scene, cfg, neighbors)
        line = format_report(report)
        log_lines.append(line)
        if log_fn is not None and (report["step"] % max(cfg.log_every, 1) == 0
                                   or report["step"] == cfg.total_steps - 1):
            log_fn(line)
        if (out_dir and cfg.checkpoint_every
                and state.step % cfg.checkpoint_every == 0):
            save_checkpoint(out_dir / f"checkpoint_{state.step:06d}.npz",
                            state, cfg, scene.bbox)
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "loss_log.txt").write_text("\n".join(log_lines) + "\n",
                                              encoding="ascii")
        save_checkpoint(out_dir / "checkpoint.npz", state, cfg, scene.bbox)
    return state


def extract_mesh(state, bbox, resolution=128, trim=True, t_trim=0.94,
                 unary_w=1.0, smooth_w=10.0):
    """Marching cubes over the trained field, optionally indicator-trimmed.

    Vertex indicator probabilities ride along as the "indicator" attribute.
    """
    from . import meshing
    pdict = state.params.to_dict()
    field_fn = lambda X: F.geometry_forward(pdict, X, state.geo)[0][:, 0]
    mesh = meshing.marching_cubes(field_fn, bbox, resolution)
    if mesh.n_triangles == 0:
        return mesh
    scores_v = F.eval_indicator(state.geo, state.params, mesh.vertices)
    mesh.vertex_attrs["indicator"] = scores_v
    if trim:
        tri_scores = meshing.score_triangles(mesh, scores_v)
        mesh = meshing.graph_cut_trim(mesh, tri_scores, t_trim, unary_w,
                                      smooth_w)
    return mesh


def render_view(state, cam, bbox, cfg=None):
    """Render one camera with the trained field and light field.

    Returns (image (H, W, 3), hit mask (H, W)). Misses are black.
    """
    cfg = cfg or TrainConfig()
    pdict = state.params.to_dict()
    field_fn = lambda X: F.geometry_forward(pdict, X, state.geo)[0][:, 0]
    px, py = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    pix = np.stack([px.reshape(-1), py.reshape(-1)], axis=-1).astype(np.float64)
    rays = pixel_ray(cam, pix)
    hits = sphere_trace(field_fn, rays, bbox, cfg.eps_hit_frac * bbox.diagonal,
                        cfg.max_trace_steps, cfg.step_damping)
    img = np.zeros((cam.height * cam.width, 3))
    idx = np.flatnonzero(hits.converged)
    for start in range(0, idx.size, 65536):
        sub = idx[start:start + 65536]
        x = hits.x0[sub]
        _, z, _, n = F.geometry_with_gradient(pdict, x, state.geo)
        rgb = F.radiance_forward(pdict, x, z, n, rays.direction[sub], state.rad)
        img[sub] = rgb
    return (img.reshape(cam.height, cam.width, 3),
            hits.converged.reshape(cam.height, cam.width))


def save_checkpoint(path, state, cfg, bbox):
    """Versioned npz: parameters, optimizer moments, RNG state, configs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": 1,
        "step": state.step,
        "adam_t": state.adam.t,
        "rng_state": state.rng.bit_generator.state,
        "config": {f.name: _jsonable(getattr(cfg, f.name))
                   for f in dc_fields(cfg)},
        "bbox": {"lo": list(bbox.lo), "hi": list(bbox.hi)},
        "layout": [[name, list(shape)] for name, shape in state.params.layout],
    }
    np.savez(path, header=np.frombuffer(
        json.dumps(header).encode("utf-8"), dtype=np.uint8),
        params=state.params.values, adam_m=state.adam.m, adam_v=state.adam.v)


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def load_checkpoint(path):
    """Returns (state, cfg, bbox) reconstructed from save_checkpoint."""
    data = np.load(path)
    header = json.loads(bytes(data["header"]).decode("utf-8"))
    if header["version"] != 1:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    cfg = TrainConfig.from_dict(header["config"])
    geo, rad = cfg.build_nets()
    layout = [(name, tuple(shape)) for name, shape in header["layout"]]
    params = ParamVector(data["params"].copy(), layout)
    adam = AdamState(m=data["adam_m"].copy(), v=data["adam_v"].copy(),
                     t=header["adam_t"])
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    state = TrainState(geo=geo, rad=rad, params=params, adam=adam, rng=rng,
                       step=header["step"])
    bbox = BBox(tuple(header["bbox"]["lo"]), tuple(header["bbox"]["hi"]))
    return state, cfg, bbox
