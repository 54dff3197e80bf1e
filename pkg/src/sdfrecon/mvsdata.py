"""Stand-in for an external multi-view stereo system.

Provides two sources of per-view depth/confidence/feature data: a synthetic
generator that renders analytic signed distance fields (with controllable
noise and dropout, serving as a ground-truth oracle for the whole pipeline),
and file ingestion for maps produced elsewhere. Features come from a fixed,
non-learned filter bank; the losses downstream are agnostic to feature
provenance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .bbox import BBox
from .supervision import DepthView
from .tracing import Camera, RayBatch, pixel_ray, sphere_trace
from . import pfm


# ---------------------------------------------------------------------------
# analytic shapes

class Shape:
    """Closed-form signed distance function (exact for the primitives)."""

    def sdf(self, x):
        raise NotImplementedError

    def normal(self, x, h=1e-6):
        """Unit normals by central differences of the distance field."""
        x = np.atleast_2d(x)
        g = np.zeros_like(x)
        for a in range(3):
            d = np.zeros(3)
            d[a] = h
            g[:, a] = (self.sdf(x + d) - self.sdf(x - d)) / (2 * h)
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
        norm[norm < 1e-300] = 1.0
        return g / norm


@dataclass
class Sphere(Shape):
    radius: float = 1.0
    center: tuple = (0.0, 0.0, 0.0)

    def sdf(self, x):
        x = np.atleast_2d(x)
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius

    def sample_surface(self, n, rng):
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return np.asarray(self.center) + self.radius * d


@dataclass
class Torus(Shape):
    """Ring of major radius R in the xy-plane around the z axis."""

    major: float = 0.5
    minor: float = 0.2

    def sdf(self, x):
        x = np.atleast_2d(x)
        q = np.stack([np.linalg.norm(x[:, :2], axis=-1) - self.major, x[:, 2]],
                     axis=-1)
        return np.linalg.norm(q, axis=-1) - self.minor

    def sample_surface(self, n, rng):
        # area element scales with (R + r cos v); rejection keeps it uniform
        pts = np.zeros((0, 3))
        while len(pts) < n:
            m = 2 * (n - len(pts)) + 64
            u = rng.uniform(0, 2 * np.pi, m)
            v = rng.uniform(0, 2 * np.pi, m)
            accept = rng.random(m) <= ((self.major + self.minor * np.cos(v))
                                       / (self.major + self.minor))
            u, v = u[accept], v[accept]
            ring = self.major + self.minor * np.cos(v)
            new = np.stack([ring * np.cos(u), ring * np.sin(u),
                            self.minor * np.sin(v)], axis=-1)
            pts = np.concatenate([pts, new], axis=0)
        return pts[:n]


@dataclass
class Box(Shape):
    half_extents: tuple = (0.5, 0.5, 0.5)

    def sdf(self, x):
        x = np.atleast_2d(x)
        q = np.abs(x) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def sample_surface(self, n, rng):
        he = np.asarray(self.half_extents)
        areas = np.array([he[1] * he[2], he[0] * he[2], he[0] * he[1]])
        areas = np.repeat(areas, 2)
        face = rng.choice(6, size=n, p=areas / areas.sum())
        u = rng.uniform(-1, 1, (n, 3)) * he
        pts = u.copy()
        axis = face // 2
        side = np.where(face % 2 == 0, 1.0, -1.0)
        pts[np.arange(n), axis] = side * he[axis]
        return pts


@dataclass
class Union(Shape):
    parts: tuple = ()

    def sdf(self, x):
        return np.min(np.stack([p.sdf(x) for p in self.parts]), axis=0)

    def sample_surface(self, n, rng):
        per = [p.sample_surface(n, rng) for p in self.parts]
        pool = np.concatenate(per, axis=0)
        keep = np.abs(self.sdf(pool)) < 1e-9
        pool = pool[keep]
        idx = rng.choice(len(pool), size=n, replace=len(pool) < n)
        return pool[idx]


def default_albedo(x):
    """Smooth procedural color pattern; gives the feature loss texture."""
    x = np.atleast_2d(x)
    r = 0.55 + 0.35 * np.sin(5.3 * x[:, 0]) * np.cos(3.1 * x[:, 1])
    g = 0.55 + 0.35 * np.sin(4.1 * x[:, 1] + 1.3) * np.cos(2.3 * x[:, 2])
    b = 0.55 + 0.35 * np.sin(3.7 * x[:, 2] + 2.1) * np.cos(4.7 * x[:, 0])
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


@dataclass
class AnalyticScene:
    """Ground truth for synthetic experiments."""

    shape: Shape
    bbox: BBox
    albedo: "callable" = default_albedo
    light_dir: tuple = (0.4, 0.3, 0.8)
    ambient: float = 0.25
    background: tuple = (0.0, 0.0, 0.0)

    def trace(self, cam, eps=1e-9):
        """Exact per-pixel intersections; returns (points, hit-mask)."""
        px, py = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
        pix = np.stack([px.reshape(-1), py.reshape(-1)], axis=-1).astype(np.float64)
        rays = pixel_ray(cam, pix)
        hits = sphere_trace(self.shape.sdf, rays, self.bbox,
                            eps_hit=eps * self.bbox.diagonal, max_steps=256,
                            damping=1.0, refine_steps=8)
        return rays, hits


def render_depth(scene, cam, noise_sigma=0.0, dropout_rate=0.0, rng=None):
    """Synthetic DepthView: traced analytic depth + gaussian noise + dropout.

    noise_sigma and the confidence model are relative to the bbox diagonal:
    kept pixels get conf = clamp(1 - |noise| / (3 sigma), 0, 1), dropped
    pixels and background get conf 0 and valid False.
    """
    rng = rng or np.random.default_rng(0)
    rays, hits = scene.trace(cam)
    h, w = cam.height, cam.width
    cam_z = ((hits.x0 @ cam.R.T) + cam.t)[:, 2]
    depth = np.where(hits.converged, cam_z, 0.0)
    valid = hits.converged.copy()
    conf = np.zeros(len(depth))
    sigma_world = noise_sigma * scene.bbox.diagonal
    if sigma_world > 0:
        noise = rng.normal(0.0, sigma_world, size=depth.shape)
        depth = np.where(valid, depth + noise, 0.0)
        conf[valid] = np.clip(1.0 - np.abs(noise[valid]) / (3 * sigma_world), 0.0, 1.0)
    else:
        conf[valid] = 1.0
    if dropout_rate > 0:
        drop = rng.random(len(depth)) < dropout_rate
        valid &= ~drop
        conf[drop] = 0.0
    depth = np.where(valid, np.maximum(depth, 1e-9), 0.0)
    return DepthView(cam=cam, depth=depth.reshape(h, w),
                     conf=conf.reshape(h, w), valid=valid.reshape(h, w))


def render_rgb(scene, cam):
    """Lambertian + ambient shading of the analytic surface; values in [0,1]."""
    rays, hits = scene.trace(cam)
    h, w = cam.height, cam.width
    img = np.tile(np.asarray(scene.background, dtype=np.float64), (h * w, 1))
    idx = np.flatnonzero(hits.converged)
    if idx.size:
        x = hits.x0[idx]
        n = scene.shape.normal(x)
        light = np.asarray(scene.light_dir, dtype=np.float64)
        light = light / np.linalg.norm(light)
        diffuse = np.maximum(n @ light, 0.0)
        shade = scene.ambient + (1.0 - scene.ambient) * diffuse
        img[idx] = np.clip(scene.albedo(x) * shade[:, None], 0.0, 1.0)
    return img.reshape(h, w, 3)


# ---------------------------------------------------------------------------
# feature extraction

@dataclass
class FeatureMap:
    """Per-pixel feature vectors at some scale of the image resolution."""

    data: np.ndarray   # (H, W, C)
    scale: float = 1.0

    @property
    def channels(self):
        return self.data.shape[2]


def extract_features(image, n_channels, boundary="reflect"):
    """Fixed multi-scale filter bank, normalized per channel.

    Channels cycle through [intensity, d/dx, d/dy] at gaussian blur scales
    (0, 1, 2, 4, ...) until n_channels is reached. Deterministic; per-channel
    zero mean / unit variance. `boundary` feeds the scipy filters (use "wrap"
    for strict shift equivariance on periodic inputs).
    """
    image = np.asarray(image, dtype=np.float64)
    gray = image.mean(axis=-1) if image.ndim == 3 else image
    channels = []
    sigma_idx = 0
    base = gray
    while len(channels) < n_channels:
        sigma = 0 if sigma_idx == 0 else 2.0 ** (sigma_idx - 1)
        base = gray if sigma == 0 else ndimage.gaussian_filter(gray, sigma,
                                                               mode=boundary)
        gx = 0.5 * (np.roll(base, -1, axis=1) - np.roll(base, 1, axis=1)) \
            if boundary == "wrap" else np.gradient(base, axis=1)
        gy = 0.5 * (np.roll(base, -1, axis=0) - np.roll(base, 1, axis=0)) \
            if boundary == "wrap" else np.gradient(base, axis=0)
        channels.extend([base, gx, gy])
        sigma_idx += 1
    stack = np.stack(channels[:n_channels], axis=-1)
    mean = stack.mean(axis=(0, 1), keepdims=True)
    std = stack.std(axis=(0, 1), keepdims=True)
    std[std < 1e-12] = 1.0
    return FeatureMap(data=(stack - mean) / std, scale=1.0)


def bilinear_sample(grid, p):
    """Bilinear lookup at sub-pixel p=(x, y); see diffcore.ops.bilinear.

    Accepts a FeatureMap, an (H, W, C) array or an (H, W) array. p may be a
    tape Var, making the sample differentiable w.r.t. p.
    """
    from .diffcore import ops
    data = grid.data if isinstance(grid, FeatureMap) else grid
    return ops.bilinear(data, p)


def in_bounds_mask(p, width, height, margin=0.0):
    """Points that can be bilinearly sampled: inside [0, W-1] x [0, H-1]."""
    p = np.atleast_2d(p)
    return ((p[:, 0] >= margin) & (p[:, 0] <= width - 1 - margin)
            & (p[:, 1] >= margin) & (p[:, 1] <= height - 1 - margin))


# ---------------------------------------------------------------------------
# scene manifests

@dataclass
class SceneData:
    """Everything the trainer needs for one scene."""

    views: list                      # list[DepthView]
    images: list                     # list[(H, W, 3) arrays]
    features: list                   # list[FeatureMap]
    bbox: BBox
    gt_shape: Shape | None = None    # set for synthetic scenes


def generate_scene(shape, bbox, n_views, image_size=(128, 128), cam_radius=None,
                   noise_sigma=0.0, dropout_rate=0.0, n_feature_channels=12,
                   rng=None, hemisphere=True, albedo=default_albedo,
                   min_elevation=0.05):
    """Cameras on a (hemi)sphere looking at the box center, plus rendered
    depth/confidence/image/feature maps."""
    rng = rng or np.random.default_rng(0)
    scene = AnalyticScene(shape=shape, bbox=bbox, albedo=albedo)
    if cam_radius is None:
        # distant cameras carve free space around the object much better:
        # their visibility cones are nearly cylindrical, so their union
        # covers the whole outside shell instead of narrow wedges
        cam_radius = 1.3 * bbox.diagonal
    w, h = image_size
    # frame the whole box (corner radius) inside the image: every view must
    # vote on every box point, otherwise the sign fusion starves of
    # positive observations in the outer regions
    corner = 0.5 * bbox.diagonal
    focal = 0.48 * min(w, h) * cam_radius / corner
    K = np.array([[focal, 0.0, (w - 1) / 2.0],
                  [0.0, focal, (h - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    center = bbox.center
    views, images, feats = [], [], []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for i in range(n_views):
        if hemisphere:
            # bias toward low elevations: high views see the top anyway,
            # while sideways/below coverage is what the sign fusion needs
            lo = np.sin(min_elevation)
            u = (i + 0.5) / n_views
            zorder = lo + (1.0 - lo) * u ** 1.7
        else:
            zorder = -1.0 + 2.0 * (i + 0.5) / n_views
        azim = golden * i
        elev = np.arcsin(np.clip(zorder, -1.0, 1.0))
        d = np.array([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim),
                      np.sin(elev)])
        eye = center + cam_radius * d
        cam = look_at(eye, center, K, w, h)
        views.append(render_depth(scene, cam, noise_sigma, dropout_rate, rng))
        img = render_rgb(scene, cam)
        images.append(img)
        feats.append(extract_features(img, n_feature_channels))
    return SceneData(views=views, images=images, features=feats, bbox=bbox,
                     gt_shape=shape)


def look_at(eye, target, K, width, height, up=(0.0, 0.0, 1.0)):
    """Camera at `eye` with +z toward `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up, fwd)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    t = -R @ eye
    return Camera(K=K, R=R, t=t, width=width, height=height)


# boxes are kept snug around each shape: depth-fused distance labels are
# only trustworthy where some camera can see past the point onto the
# surface, and that coverage degrades quickly in loose empty space
SHAPES = {
    "sphere": lambda: (Sphere(radius=1.0), BBox.cube(1.2)),
    "torus": lambda: (Torus(major=0.5, minor=0.2), BBox.cube(0.85)),
    "box": lambda: (Box(half_extents=(0.6, 0.45, 0.3)), BBox.cube(0.75)),
}


def save_scene(scene_dir, data):
    """Write a scene to disk: manifest + PFM maps per view."""
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"bbox": {"lo": list(data.bbox.lo), "hi": list(data.bbox.hi)},
                "views": []}
    for i, (view, img, feat) in enumerate(zip(data.views, data.images,
                                              data.features)):
        names = {"image": f"view{i:03d}_image.pfm",
                 "depth": f"view{i:03d}_depth.pfm",
                 "conf": f"view{i:03d}_conf.pfm",
                 "feat": f"view{i:03d}_feat.pfm"}
        pfm.write_pfm(scene_dir / names["image"], img)
        pfm.write_pfm(scene_dir / names["depth"],
                      np.where(view.valid, view.depth, 0.0))
        pfm.write_pfm(scene_dir / names["conf"], view.conf)
        pfm.write_feature_stack(scene_dir / names["feat"], feat.data, feat.scale)
        manifest["views"].append({**names, "camera": view.cam.to_dict()})
    with open(scene_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return scene_dir / "manifest.json"


def load_scene(manifest_path):
    """Read a scene manifest written by save_scene (or external tooling).

    Depth maps double as validity masks: pixels with depth <= 0 are invalid.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    bb = manifest["bbox"]
    box = BBox(tuple(bb["lo"]), tuple(bb["hi"]))
    views, images, feats = [], [], []
    for entry in manifest["views"]:
        cam = Camera.from_dict(entry["camera"])
        depth = pfm.read_pfm(base / entry["depth"])
        conf = pfm.read_pfm(base / entry["conf"])
        valid = depth > 0
        views.append(DepthView(cam=cam, depth=np.where(valid, depth, 1.0),
                               conf=conf, valid=valid))
        images.append(pfm.read_pfm(base / entry["image"]))
        fdata, fscale = pfm.read_feature_stack(base / entry["feat"])
        feats.append(FeatureMap(data=fdata, scale=fscale))
    return SceneData(views=views, images=images, features=feats, bbox=box,
                     gt_shape=None)
