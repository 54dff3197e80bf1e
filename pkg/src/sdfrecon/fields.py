"""Neural scene representation: geometry network and surface light field.

The geometry network is a softplus MLP mapping a positionally encoded point
to a signed distance, a surface-indicator logit and a point descriptor, all
from one shared trunk. The light field network maps (point, descriptor,
normal, view direction) to RGB. A smooth nonlinearity keeps second-order
differentiation (normals inside losses) well defined everywhere.

Forward passes are written against `diffcore.ops`, so the same code runs on
plain arrays (fast evaluation for tracing and meshing), tape Vars (training
gradients) and Duals (spatial gradients).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .bbox import BBox
from .diffcore import NumericError, ParamVector, ops

SNAPSHOT_MAGIC = b"SDFR"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class PosEncoding:
    """Sinusoidal lifting with frequencies 2^k * pi, k = 0..num_bands-1."""

    num_bands: int
    include_input: bool = True

    def out_dim(self, in_dim):
        return in_dim * ((1 if self.include_input else 0) + 2 * self.num_bands)


def encode(x, enc):
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(...)].

    Blocks are laid out per band (all components of sin(2^k pi x) together).
    Works on arrays, Vars and Duals.
    """
    parts = [x] if enc.include_input else []
    for k in range(enc.num_bands):
        f = float(2.0 ** k) * np.pi
        parts.append(ops.sin(x * f))
        parts.append(ops.cos(x * f))
    if len(parts) == 1:
        return parts[0]
    if not parts:
        raise ValueError("encoding with no bands must include the input")
    return ops.concat(parts, -1)


@dataclass(frozen=True)
class GeometryNet:
    """Trunk MLP with distance, indicator-logit and descriptor heads."""

    hidden: tuple = (128, 128, 128, 128)
    skip_at: int | None = 2
    pe: PosEncoding = field(default_factory=lambda: PosEncoding(6))
    d_z: int = 32
    beta: float = 100.0

    @property
    def in_dim(self):
        return self.pe.out_dim(3)

    @property
    def out_dim(self):
        return 2 + self.d_z

    def layer_dims(self):
        """[(din, dout)] for trunk layers followed by the output layer."""
        dims = []
        prev = self.in_dim
        for i, width in enumerate(self.hidden):
            din = prev + (self.in_dim if i == self.skip_at and i > 0 else 0)
            dims.append((din, width))
            prev = width
        dims.append((prev, self.out_dim))
        return dims

    def param_shapes(self):
        shapes = []
        dims = self.layer_dims()
        for i, (din, dout) in enumerate(dims[:-1]):
            shapes.append((f"g.W{i}", (din, dout)))
            shapes.append((f"g.b{i}", (dout,)))
        din, dout = dims[-1]
        shapes.append(("g.Wout", (din, dout)))
        shapes.append(("g.bout", (dout,)))
        return shapes


@dataclass(frozen=True)
class RadianceNet:
    """Surface light field MLP; output squashed to [0, 1]^3.

    Inputs are the raw point, its descriptor, the (unnormalized) spatial
    gradient of the distance field and the encoded view direction. The
    descriptor is the only learned positional conduit besides raw x.
    """

    hidden: tuple = (64, 64, 64)
    pe_view: PosEncoding = field(default_factory=lambda: PosEncoding(4))
    d_z: int = 32
    beta: float = 100.0

    @property
    def in_dim(self):
        return 3 + self.d_z + 3 + self.pe_view.out_dim(3)

    def layer_dims(self):
        dims = []
        prev = self.in_dim
        for width in self.hidden:
            dims.append((prev, width))
            prev = width
        dims.append((prev, 3))
        return dims

    def param_shapes(self):
        shapes = []
        dims = self.layer_dims()
        for i, (din, dout) in enumerate(dims[:-1]):
            shapes.append((f"r.W{i}", (din, dout)))
            shapes.append((f"r.b{i}", (dout,)))
        din, dout = dims[-1]
        shapes.append(("r.Wout", (din, dout)))
        shapes.append(("r.bout", (dout,)))
        return shapes


def trunk_forward(p, x, net):
    """Last hidden activation of the geometry trunk."""
    e = encode(x, net.pe)
    h = e
    for i in range(len(net.hidden)):
        if i == net.skip_at and i > 0:
            h = ops.concat([h, e], -1)
        h = ops.softplus(h @ p[f"g.W{i}"] + p[f"g.b{i}"], net.beta)
    return h


def geometry_forward(p, x, net):
    """Evaluate the geometry net; returns (f, z, logit).

    p maps parameter names to arrays or Vars; x is (n, 3) array, Var or Dual.
    """
    h = trunk_forward(p, x, net)
    out = h @ p["g.Wout"] + p["g.bout"]
    return out[..., 0:1], out[..., 2:], out[..., 1:2]


def radiance_forward(p, x, z, n, v, net):
    """Evaluate the light field; returns rgb in [0, 1]^3."""
    h = ops.concat([x, z, n, encode(v, net.pe_view)], -1)
    for i in range(len(net.hidden)):
        h = ops.softplus(h @ p[f"r.W{i}"] + p[f"r.b{i}"], net.beta)
    return ops.sigmoid(h @ p["r.Wout"] + p["r.bout"])


def geometry_with_gradient(p, x, net):
    """Geometry eval plus spatial gradient; returns (f, z, logit, grad).

    x may be an (n, 3) ndarray (fast path) or a Var (the gradient then stays
    differentiable w.r.t. the parameters feeding both the point and the net).
    """
    xv = ops.value_of(x)
    seeded = ops.spatial_seed(x)
    f, z, logit = geometry_forward(p, seeded, net)
    grad = ops.gradient_from_tangent(f.tangent, xv.shape[0], 3)
    return f.primal, z.primal, logit.primal, grad


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite activation in {name}")


def eval_sdf(net, params, x):
    """(f, z, logit) at points x, shape (n, 3) or (3,). Pure numpy."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    f, z, logit = geometry_forward(_pdict(params), x, net)
    _check_finite("geometry net", f)
    return f[:, 0], z, logit[:, 0]


def eval_normal(net, params, x):
    """Spatial gradient of the distance head at x; NOT normalized."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, _, _, grad = geometry_with_gradient(_pdict(params), x, net)
    return grad


def eval_indicator(net, params, x):
    """Valid-surface probability in [0, 1]."""
    _, _, logit = eval_sdf(net, params, x)
    return ops.sigmoid(logit)


def eval_radiance(net, params, x, z, n, v):
    """RGB of the light field; all inputs (n, dim) arrays."""
    rgb = radiance_forward(_pdict(params), np.atleast_2d(x), np.atleast_2d(z),
                           np.atleast_2d(n), np.atleast_2d(v), net)
    _check_finite("radiance net", rgb)
    return rgb


def _pdict(params):
    return params.to_dict() if isinstance(params, ParamVector) else params


def init_params(geo, rad, bbox, rng, calibrate=True):
    """Fresh ParamVector for both nets.

    The distance head starts out approximating ||x - center|| - r0 with
    r0 = half the bbox half-diagonal, so sphere tracing is sane from step one.
    The trunk follows the usual scheme for softplus distance MLPs (zero bias,
    fan-scaled gaussian weights, encoded-input rows zeroed so the net
    initially sees the raw coordinates); on top of that the distance column of
    the output layer is ridge-fitted to the target sphere over a fixed sample
    of the box, which pins the approximation across widths and band counts.
    """
    r0 = 0.25 * bbox.diagonal
    center = bbox.center
    arrays = {}
    dims = geo.layer_dims()
    n_layers = len(geo.hidden)
    for i, (din, dout) in enumerate(dims[:-1]):
        w = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(dout), size=(din, dout))
        if i == 0 and geo.pe.num_bands > 0:
            w[3:, :] = 0.0
        if i == geo.skip_at and i > 0:
            w[dims[i - 1][1] + 3:, :] = 0.0
        arrays[f"g.W{i}"] = w
        arrays[f"g.b{i}"] = np.zeros(dout)
    din, dout = dims[-1]
    w_out = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(dout), size=(din, dout))
    w_out[:, 0] = rng.normal(np.sqrt(np.pi) / np.sqrt(din), 1e-4, size=din)
    w_out[:, 1] = 0.0
    b_out = np.zeros(dout)
    b_out[0] = -r0
    arrays["g.Wout"] = w_out
    arrays["g.bout"] = b_out

    for i, (din_r, dout_r) in enumerate(rad.layer_dims()[:-1]):
        arrays[f"r.W{i}"] = rng.normal(0.0, np.sqrt(2.0 / din_r), size=(din_r, dout_r))
        arrays[f"r.b{i}"] = np.zeros(dout_r)
    din_r, dout_r = rad.layer_dims()[-1]
    arrays["r.Wout"] = rng.normal(0.0, 1e-2, size=(din_r, dout_r))
    arrays["r.bout"] = np.zeros(dout_r)

    layout = geo.param_shapes() + rad.param_shapes()
    params = ParamVector.from_arrays([(name, arrays[name]) for name, _ in layout])

    if calibrate:
        cal_rng = np.random.default_rng(rng.integers(2 ** 63))
        pts = bbox.sample(4096, cal_rng)
        h = trunk_forward(params.to_dict(), pts, geo)
        target = np.linalg.norm(pts - center, axis=-1) - r0
        design = np.concatenate([h, np.ones((len(pts), 1))], axis=-1)
        lam = 1e-6 * len(pts)
        gram = design.T @ design + lam * np.eye(design.shape[1])
        coef = np.linalg.solve(gram, design.T @ target)
        params.view("g.Wout")[:, 0] = coef[:-1]
        params.view("g.bout")[0] = coef[-1]
    return params


def save_snapshot(path, geo, rad, params, bbox):
    """Versioned binary: magic + JSON header + flat float64 parameters."""
    header = {
        "geometry": {"hidden": list(geo.hidden), "skip_at": geo.skip_at,
                     "pe_bands": geo.pe.num_bands, "d_z": geo.d_z,
                     "beta": geo.beta},
        "radiance": {"hidden": list(rad.hidden),
                     "pe_view_bands": rad.pe_view.num_bands,
                     "d_z": rad.d_z, "beta": rad.beta},
        "bbox": {"lo": list(bbox.lo), "hi": list(bbox.hi)},
        "layout": [[name, list(shape)] for name, shape in params.layout],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<II", SNAPSHOT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(params.values.astype("<f8").tobytes())


def load_snapshot(path):
    """Inverse of save_snapshot; returns (geo, rad, params, bbox)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"not a field snapshot: bad magic {magic!r}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        flat = np.frombuffer(fh.read(), dtype="<f8").copy()
    gh, rh = header["geometry"], header["radiance"]
    geo = GeometryNet(hidden=tuple(gh["hidden"]), skip_at=gh["skip_at"],
                      pe=PosEncoding(gh["pe_bands"]), d_z=gh["d_z"],
                      beta=gh["beta"])
    rad = RadianceNet(hidden=tuple(rh["hidden"]),
                      pe_view=PosEncoding(rh["pe_view_bands"]),
                      d_z=rh["d_z"], beta=rh["beta"])
    layout = [(name, tuple(shape)) for name, shape in header["layout"]]
    params = ParamVector(flat, layout)
    box = BBox(tuple(header["bbox"]["lo"]), tuple(header["bbox"]["hi"]))
    return geo, rad, params, box
