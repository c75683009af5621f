"""``atlasforge`` command line.

``run`` executes the whole pipeline (or part of it with ``--stage`` /
``--from-stage``). The other subcommands run single stages of the same run
directory; ``metatex`` and ``masks`` also work on a bare mesh via ``--mesh``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .fileio import read_ctxb, read_png, write_png
from .geometry import CameraConfig, canonical_viewpoints, face_znormals, load_mesh, normalize_mesh
from .masks import binary_face_view_masks, new_region_mask
from .metatex import learn_max_znormals, view_weights
from .pipeline import STAGES, Run, RunConfig, build_mesh, render_previews, run_pipeline, stages_from
from .raster import TextureAtlas, rasterize_buffers

SHORTCUTS = {
    "metatex": ["metatex"],
    "masks": ["views"],
    "grids": ["grids"],
}


def _parser():
    p = argparse.ArgumentParser(prog="atlasforge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the pipeline")
    run.add_argument("--config", required=True)
    group = run.add_mutually_exclusive_group()
    group.add_argument("--stage", choices=STAGES, help="run only this stage")
    group.add_argument("--from-stage", choices=STAGES, help="run this stage and every later one")

    mt = sub.add_parser("metatex", help="learn the max-z-normal meta-texture")
    _source_args(mt)
    mt.add_argument("--out", help="N.png path (standalone mode)")
    mt.add_argument("--alpha", type=float, default=None, help="also write per-view weight PNGs")
    mt.add_argument("--resolution", type=int, default=512)

    mk = sub.add_parser("masks", help="render views and regeneration masks")
    _source_args(mk)
    mk.add_argument("--out-dir", help="output directory (standalone mode)")
    mk.add_argument("--coverage", help="CTXB coverage plane; adds new-region masks")

    gr = sub.add_parser("grids", help="assemble the 2x3 grids")
    gr.add_argument("--config", required=True)

    pb = sub.add_parser("projectback", help="project images back onto the atlas")
    pb.add_argument("--config", required=True)
    pb.add_argument("--phase", choices=("1", "2"), default="2")
    pb.add_argument("--freeze-front", action="store_true", default=None)

    pv = sub.add_parser("preview", help="render a textured mesh from several azimuths")
    pv.add_argument("--config", required=True)
    pv.add_argument("--atlas", help="atlas PNG (default: the run's atlas.png)")
    pv.add_argument("--angles", type=float, nargs="*", help="azimuths in degrees")
    pv.add_argument("--size", type=int, default=None)
    return p


def _source_args(p):
    """Either a run config or a mesh plus optional camera JSON."""
    p.add_argument("--config", help="run config; writes into its run directory")
    p.add_argument("--mesh", help="OBJ mesh (standalone mode)")
    p.add_argument("--camera", help="camera JSON (radius, fov_deg, image_size, azimuths, elevations)")
    p.add_argument("--image-size", type=int, default=None)


def _standalone_views(args):
    if not args.mesh:
        raise ValueError("give --config or --mesh")
    camera = CameraConfig.from_json(args.camera) if args.camera else CameraConfig()
    if args.image_size:
        camera.image_size = args.image_size
    mesh = normalize_mesh(load_mesh(args.mesh))
    views = canonical_viewpoints(camera)
    return mesh, views, [rasterize_buffers(mesh, v) for v in views]


def _metatex(args):
    mesh, views, buffers = _standalone_views(args)
    out = args.out or "N.png"
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    meta = learn_max_znormals(mesh, views, args.resolution, buffers=buffers)
    write_png(out, meta.texels, bits=16)
    print(out)
    if args.alpha is not None:
        stem = os.path.splitext(out)[0]
        for v, w in zip(views, view_weights(meta, buffers, args.alpha).weights):
            write_png(f"{stem}_weight_{v.id}.png", w, bits=16)


def _masks(args):
    mesh, views, buffers = _standalone_views(args)
    out = args.out_dir or "masks"
    os.makedirs(out, exist_ok=True)
    fv = binary_face_view_masks(np.stack([b.face_index for b in buffers]), face_znormals(mesh, views))
    coverage = read_ctxb(args.coverage).astype(np.float64) if args.coverage else None
    for v, b in zip(views, buffers):
        write_png(os.path.join(out, f"object_{v.id}.png"), b.object_mask)
        write_png(os.path.join(out, f"binary_{v.id}.png"), fv[v.id])
        if coverage is not None:
            write_png(os.path.join(out, f"new_region_{v.id}.png"), new_region_mask(b, coverage, factor=0).mask)
    print(out)


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "metatex" and not args.config:
            _metatex(args)
            return 0
        if args.command == "masks" and not args.config:
            _masks(args)
            return 0
        cfg = RunConfig.from_json(args.config)
        if args.command == "run":
            stages = [args.stage] if args.stage else stages_from(args.from_stage) if args.from_stage else None
            manifest = run_pipeline(cfg, stages)
            print(json.dumps({k: v["seconds"] for k, v in manifest["stages"].items()}))
        elif args.command in SHORTCUTS:
            run_pipeline(cfg, SHORTCUTS[args.command])
        elif args.command == "projectback":
            if args.freeze_front is not None:
                cfg.freeze_front = True
            run_pipeline(cfg, ["phase1" if args.phase == "1" else "phase2"])
        elif args.command == "preview":
            atlas_path = args.atlas or os.path.join(cfg.out, "atlas.png")
            angles = cfg.preview_angles if args.angles is None else args.angles
            size = args.size or cfg.render_resolution
            images = render_previews(build_mesh(cfg), TextureAtlas(read_png(atlas_path)), angles, size,
                                     cfg.camera_config())
            os.makedirs(os.path.join(cfg.out, "previews"), exist_ok=True)
            for az, img in zip(angles, images):
                path = os.path.join(cfg.out, "previews", f"preview_az{az:+g}.png")
                write_png(path, img)
                print(path)
            if os.path.isfile(os.path.join(cfg.out, "manifest.json")):
                Run(cfg).write_manifest()
    except Exception as exc:
        print(f"atlasforge: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
