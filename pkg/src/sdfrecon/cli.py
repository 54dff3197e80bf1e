"""Command line interface.

Subcommands: synth (generate a synthetic scene), train, mesh, render, eval.
Numpy-heavy modules are imported lazily so the thread-count environment
variable can take effect first.
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_env():
    n = os.environ.get("SDFRECON_NUM_THREADS")
    if n:
        os.environ.setdefault("OPENBLAS_NUM_THREADS", n)
        os.environ.setdefault("OMP_NUM_THREADS", n)
        os.environ.setdefault("MKL_NUM_THREADS", n)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sdfrecon",
        description="Depth-supervised signed distance field reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene to disk")
    p.add_argument("--shape", choices=["sphere", "torus", "box"], default="sphere")
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--res", type=int, default=96, help="square image size")
    p.add_argument("--noise", type=float, default=0.005,
                   help="depth noise sigma as a fraction of the bbox diagonal")
    p.add_argument("--dropout", type=float, default=0.1,
                   help="fraction of depth pixels dropped")
    p.add_argument("--channels", type=int, default=12,
                   help="feature channels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full-sphere", action="store_true",
                   help="place cameras on a full sphere instead of a hemisphere")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a field from a scene manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--steps", type=int, dest="total_steps")
    p.add_argument("--seed", type=int)
    p.add_argument("--rays-per-view", type=int, dest="rays_per_view")
    p.add_argument("--batch-views", type=int, dest="batch_views")
    p.add_argument("--space-samples", type=int, dest="space_samples")
    p.add_argument("--lr", type=float)
    p.add_argument("--disable-render", action="store_const", const=True,
                   dest="disable_render", default=None)
    p.add_argument("--disable-feature", action="store_const", const=True,
                   dest="disable_feature", default=None)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("mesh", help="extract a (trimmed) mesh from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--no-trim", action="store_true")
    p.add_argument("--t-trim", type=float, default=0.94)
    p.add_argument("--format", choices=["ply", "obj"], default=None)

    p = sub.add_parser("render", help="render a view from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="take the camera from this scene")
    p.add_argument("--view-index", type=int, default=0)
    p.add_argument("--camera", help="JSON file with K, R, t, width, height")
    p.add_argument("--out", required=True, help=".pfm (or .png with Pillow)")

    p = sub.add_parser("eval", help="geometry / rendering metrics")
    p.add_argument("--mesh", help="predicted mesh (PLY/OBJ)")
    p.add_argument("--gt-mesh", help="ground truth mesh (PLY/OBJ)")
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--cutoff", type=float, default=0.8)
    p.add_argument("--rendered", help="rendered image (PFM)")
    p.add_argument("--reference", help="reference image (PFM)")
    p.add_argument("--mask", help="mask image (PFM, nonzero = evaluate)")
    p.add_argument("--seed", type=int, default=0)
    return parser


def cmd_synth(args):
    import numpy as np
    from . import mvsdata

    shape, bbox = mvsdata.SHAPES[args.shape]()
    data = mvsdata.generate_scene(
        shape, bbox, args.views, image_size=(args.res, args.res),
        noise_sigma=args.noise, dropout_rate=args.dropout,
        n_feature_channels=args.channels, rng=np.random.default_rng(args.seed),
        hemisphere=not args.full_sphere)
    manifest = mvsdata.save_scene(args.out, data)
    print(f"wrote {manifest}")
    return 0


def cmd_train(args):
    from . import mvsdata, trainer

    overrides = {k: getattr(args, k) for k in
                 ("total_steps", "seed", "rays_per_view", "batch_views",
                  "space_samples", "lr", "disable_render", "disable_feature")}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.config:
        cfg = trainer.TrainConfig.from_file(args.config, **overrides)
    else:
        cfg = trainer.TrainConfig.from_dict(overrides)
    scene = mvsdata.load_scene(args.manifest)
    log_fn = None if args.quiet else print
    trainer.train(scene, cfg, out_dir=args.out, log_fn=log_fn)
    print(f"wrote {args.out}/checkpoint.npz")
    return 0


def cmd_mesh(args):
    from . import meshing, trainer

    state, cfg, bbox = trainer.load_checkpoint(args.checkpoint)
    mesh = trainer.extract_mesh(state, bbox, resolution=args.resolution,
                                trim=not args.no_trim, t_trim=args.t_trim)
    meshing.save_mesh(args.out, mesh, file_format=args.format)
    print(f"wrote {args.out} ({mesh.n_vertices} vertices, "
          f"{mesh.n_triangles} triangles)")
    return 0


def cmd_render(args):
    import json

    import numpy as np

    from . import mvsdata, pfm, trainer
    from .tracing import Camera

    state, cfg, bbox = trainer.load_checkpoint(args.checkpoint)
    if args.camera:
        with open(args.camera, "r", encoding="utf-8") as fh:
            cam = Camera.from_dict(json.load(fh))
    elif args.manifest:
        scene = mvsdata.load_scene(args.manifest)
        cam = scene.views[args.view_index].cam
    else:
        raise SystemExit("render needs --camera or --manifest")
    img, mask = trainer.render_view(state, cam, bbox, cfg)
    if args.out.lower().endswith(".png"):
        from PIL import Image
        Image.fromarray((np.clip(img, 0, 1) * 255).astype(np.uint8)).save(args.out)
    else:
        pfm.write_pfm(args.out, img)
        pfm.write_pfm(args.out + ".mask.pfm", mask.astype(np.float64))
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args):
    import numpy as np

    from . import evaluation, meshing, pfm

    emitted = False
    if args.mesh and args.gt_mesh:
        rng = np.random.default_rng(args.seed)
        pred = evaluation.sample_mesh(meshing.load_mesh(args.mesh),
                                      args.samples, rng)
        gt = evaluation.sample_mesh(meshing.load_mesh(args.gt_mesh),
                                    args.samples, rng)
        value = evaluation.chamfer(pred, gt, cutoff=args.cutoff)
        print(f"chamfer={value:.9g}")
        emitted = True
    if args.rendered and args.reference:
        rendered = pfm.read_pfm(args.rendered)
        reference = pfm.read_pfm(args.reference)
        mask = None
        if args.mask:
            m = pfm.read_pfm(args.mask)
            mask = (m if m.ndim == 2 else m.any(axis=-1)) > 0
        value = evaluation.psnr(rendered, reference, mask)
        print(f"psnr_db={value:.9g}")
        emitted = True
    if not emitted:
        raise SystemExit("eval needs --mesh/--gt-mesh and/or "
                         "--rendered/--reference")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "mesh": cmd_mesh,
            "render": cmd_render, "eval": cmd_eval}


def run_cli(argv=None):
    _apply_thread_env()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # flag combination errors are usage errors
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return 2
        return exc.code if exc.code is not None else 0
    except Exception as exc:  # runtime failures exit 1, not a traceback wall
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
