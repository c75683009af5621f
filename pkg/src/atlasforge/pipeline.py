"""End-to-end texturing run, one resumable stage at a time.

Every stage reads its inputs from files written by earlier stages and writes
its outputs into the run directory, so any stage can be re-run on its own and
produces the same bytes as a fresh full run. ``manifest.json`` lists every
file with its sha256 plus the config echo and per-stage timings.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from .fileio import read_ctxb, read_png, write_ctxb, write_png
from .geometry import CameraConfig, Viewpoint, box, canonical_viewpoints, card, load_mesh, normalize_mesh, quad, uv_sphere
from .genclient import GenRequest, HttpBackend, make_backend
from .gridops import (LATENT_FACTOR, GridLayout, NoiseSchedule, assemble_grid, blended_denoise, decode_latent,
                      encode_latent, split_grid)
from .masks import LEARNED_THRESHOLD, downsample_mask, keep_refine_generate, new_region_mask, upsample_mask
from .metatex import MetaTexOptions, learn_max_znormals, view_weights
from .projectback import ProjectBackOptions, ProjectBackProblem, ViewTarget, project_back
from .raster import TextureAtlas, rasterize_buffers, render_textured, sample_atlas, splat_values

log = logging.getLogger(__name__)

STAGES = ("metatex", "front", "phase1", "views", "grids", "generate", "split", "phase2")
PREVIEW_ANGLES = (0.0, 120.0, -120.0)
BUILTIN_MESHES = {"card": card, "quad": quad, "sphere": uv_sphere, "cube": box}


class PipelineError(RuntimeError):
    pass


@dataclass
class RunConfig:
    mesh: str
    output_dir: str
    prompt: str = ""
    view_suffix: str = ", front view"
    alpha: float = 10.0
    atlas_resolution: int = 512
    render_resolution: int = 512
    tile_size: int = 320
    camera: dict = field(default_factory=dict)
    backend: dict = field(default_factory=dict)
    seed: int = 0
    steps: int = 36
    stages: list = field(default_factory=lambda: list(STAGES))
    freeze_front: bool = False
    mask_mode: str = "new-region"
    preview_angles: list = field(default_factory=lambda: list(PREVIEW_ANGLES))
    projectback: dict = field(default_factory=dict)
    base_dir: str = "."

    def __post_init__(self):
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise ValueError(f"unknown stages {sorted(unknown)}")
        if self.mask_mode not in ("new-region", "keep-refine-generate"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.render_resolution % LATENT_FACTOR or self.tile_size % LATENT_FACTOR:
            raise ValueError(f"render_resolution and tile_size must be multiples of {LATENT_FACTOR}")

    @classmethod
    def from_dict(cls, d, base_dir="."):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__ and k != "base_dir"}
        return cls(base_dir=base_dir, **known)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh), os.path.dirname(os.path.abspath(path)))

    def to_dict(self):
        d = asdict(self)
        d.pop("base_dir")
        return d

    def resolve(self, p):
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    @property
    def out(self):
        return self.resolve(self.output_dir)

    def camera_config(self):
        return CameraConfig.from_dict({**self.camera, "image_size": self.render_resolution})

    def pb_options(self):
        return ProjectBackOptions(**self.projectback)


def build_mesh(cfg):
    name = cfg.mesh
    if name.startswith("builtin:"):
        key = name.split(":", 1)[1]
        if key not in BUILTIN_MESHES:
            raise ValueError(f"unknown builtin mesh {key!r}")
        return BUILTIN_MESHES[key]()
    return normalize_mesh(load_mesh(cfg.resolve(name)))


def render_previews(mesh, atlas, angles=PREVIEW_ANGLES, image_size=512, camera=None):
    """Renders at elevation 0 for each azimuth in ``angles``."""
    camera = camera or CameraConfig()
    out = []
    for k, az in enumerate(angles):
        v = Viewpoint(k + 1, float(az), 0.0, camera.radius, camera.fov_deg, camera.near, camera.far, image_size)
        out.append(render_textured(mesh, v, atlas))
    return out


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _resize(img, size, nearest=False):
    """Resample an H x W (x C) float image to size x size, channel by channel."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[0] == size and img.shape[1] == size:
        return img.copy()
    method = Image.NEAREST if nearest else Image.BILINEAR
    planes = img[:, :, None] if img.ndim == 2 else img
    out = np.stack([np.asarray(Image.fromarray(planes[:, :, c].astype(np.float32), mode="F")
                               .resize((size, size), method), dtype=np.float64)
                    for c in range(planes.shape[2])], axis=2)
    return out[:, :, 0] if img.ndim == 2 else out


def _rgb(img):
    img = np.asarray(img, dtype=np.float64)
    return np.repeat(img[:, :, None], 3, axis=2) if img.ndim == 2 else img[:, :, :3]


class Run:
    """State shared by the stages of one pipeline invocation."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.root = cfg.out
        os.makedirs(self.root, exist_ok=True)
        self.mesh = build_mesh(cfg)
        self.views = canonical_viewpoints(cfg.camera_config())
        self.layout = GridLayout(tile_size=cfg.tile_size)
        self._buffers = {}
        self.manifest_path = os.path.join(self.root, "manifest.json")
        self.manifest = self._load_manifest()

    def _load_manifest(self):
        if os.path.isfile(self.manifest_path):
            with open(self.manifest_path) as fh:
                m = json.load(fh)
            m["config"] = self.cfg.to_dict()
            return m
        return {"config": self.cfg.to_dict(), "stages": {}, "files": {}, "status": "running"}

    def path(self, rel):
        p = os.path.join(self.root, rel)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def need(self, rel):
        p = os.path.join(self.root, rel)
        if not os.path.isfile(p):
            raise PipelineError(f"missing artifact {p}; run the stage that produces it first")
        return p

    def buffers(self, i):
        if i not in self._buffers:
            self._buffers[i] = rasterize_buffers(self.mesh, self.views[i])
        return self._buffers[i]

    def write_manifest(self):
        files = {}
        for dirpath, _, names in os.walk(self.root):
            for name in names:
                p = os.path.join(dirpath, name)
                rel = os.path.relpath(p, self.root).replace(os.sep, "/")
                if rel != "manifest.json":
                    files[rel] = _sha256(p)
        self.manifest["files"] = dict(sorted(files.items()))
        tmp = self.manifest_path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self.manifest, fh, indent=2)
        os.replace(tmp, self.manifest_path)

    # -- stages ------------------------------------------------------------------

    def stage_metatex(self):
        meta = learn_max_znormals(self.mesh, self.views, self.cfg.atlas_resolution, MetaTexOptions(),
                                  [self.buffers(i) for i in range(len(self.views))])
        write_png(self.path("N.png"), meta.texels, bits=16)
        return {"iterations": meta.iterations, "mean_violation": meta.mean_violation}

    def stage_front(self):
        b = self.buffers(0)
        depth = write_png(self.path("front/depth_0.png"), b.depth, bits=16)
        req = GenRequest("front", self.cfg.prompt, depth, view_suffix=self.cfg.view_suffix,
                         seed=self.cfg.seed, steps=self.cfg.steps)
        resp = self.backend().fetch_front(req)
        with open(self.path("front/front.png"), "wb") as fh:
            fh.write(resp.image)
        return {"backend": resp.metadata}

    def stage_phase1(self):
        q0 = _rgb(read_png(self.need("front/front.png")))
        prob = ProjectBackProblem(self.mesh, [ViewTarget(self.views[0], q0, None, self.buffers(0))],
                                  self.cfg.atlas_resolution, self.cfg.pb_options())
        atlas, coverage, report = project_back(prob)
        write_png(self.path("phase1/atlas.png"), atlas.exported())
        write_png(self.path("phase1/coverage.png"), np.clip(coverage, 0, 1), bits=16)
        write_ctxb(self.path("phase1/coverage.ctxb"), coverage.astype(np.float32))
        return report.to_dict()

    def _regen_masks(self, coverage):
        if self.cfg.mask_mode == "new-region":
            # any front support counts as learned; the 0.5 threshold then acts on area
            learned = (coverage > 0).astype(np.float64)
            return [new_region_mask(self.buffers(i), learned, LEARNED_THRESHOLD, factor=0).mask
                    for i in range(1, 7)]
        b0 = self.buffers(0)
        r = self.cfg.atlas_resolution
        m = b0.object_mask
        num = splat_values(b0.znormal[m], b0.uv[m], r)[:, :, 0]
        den = splat_values(np.ones(int(m.sum())), b0.uv[m], r)[:, :, 0]
        cache = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        out = []
        for i in range(1, 7):
            b = self.buffers(i)
            cached = np.zeros(b.shape)
            if b.object_mask.any():
                cached[b.object_mask] = sample_atlas(cache, b.uv[b.object_mask])[:, 0]
            _, refine, generate = keep_refine_generate(b.znormal, cached, b.object_mask)
            out.append(refine.mask | generate.mask)
        return out

    def stage_views(self):
        atlas = TextureAtlas(read_png(self.need("phase1/atlas.png")))
        coverage = read_ctxb(self.need("phase1/coverage.ctxb")).astype(np.float64)
        masks = self._regen_masks(coverage)
        for i in range(1, 7):
            b = self.buffers(i)
            write_png(self.path(f"views/depth_{i}.png"), b.depth, bits=16)
            write_png(self.path(f"views/mask_{i}.png"), masks[i - 1])
            write_png(self.path(f"views/render_{i}.png"), render_textured(self.mesh, self.views[i], atlas, buffers=b))
        return {"regenerate_fraction": [float(m.sum() / max(self.buffers(i + 1).object_mask.sum(), 1))
                                        for i, m in enumerate(masks)]}

    def stage_grids(self):
        s = self.cfg.tile_size
        depth = [_resize(read_png(self.need(f"views/depth_{i}.png")), s) for i in range(1, 7)]
        mask = [_resize(read_png(self.need(f"views/mask_{i}.png")), s, nearest=True) > 0.5 for i in range(1, 7)]
        render = [_resize(_rgb(read_png(self.need(f"views/render_{i}.png"))), s) for i in range(1, 7)]
        mask_grid = assemble_grid(mask, self.layout)
        write_png(self.path("grids/depth_grid.png"), assemble_grid(depth, self.layout), bits=16)
        write_png(self.path("grids/mask_grid.png"), mask_grid)
        write_png(self.path("grids/render_grid.png"), assemble_grid(render, self.layout))
        write_png(self.path("grids/mask_grid_latent.png"), downsample_mask(mask_grid, LATENT_FACTOR))
        return {"grid_shape": list(mask_grid.shape)}

    def stage_generate(self):
        with open(self.need("grids/depth_grid.png"), "rb") as fh:
            depth = fh.read()
        with open(self.need("front/front.png"), "rb") as fh:
            front = fh.read()
        q_grid = _rgb(read_png(self.need("grids/render_grid.png")))
        m_lat = read_png(self.need("grids/mask_grid_latent.png")) > 0.5
        req = GenRequest("grid", self.cfg.prompt, depth, front, seed=self.cfg.seed, steps=self.cfg.steps)
        backend = self.backend()
        if isinstance(backend, HttpBackend) and backend.stepwise:
            z = blended_denoise(backend.denoise_step(req), encode_latent(q_grid), m_lat,
                                NoiseSchedule(self.cfg.steps), seed=self.cfg.seed)
            grid = np.clip(decode_latent(z), 0, 1)
            info = {"blending": "latent-stepwise"}
        else:
            resp = backend.fetch_grid(req)
            with open(self.path("generate/generated.png"), "wb") as fh:
                fh.write(resp.image)
            gen = _rgb(read_png(self.path("generate/generated.png")))
            m = upsample_mask(m_lat, LATENT_FACTOR)[:, :, None]
            grid = gen * m + q_grid * (1 - m)
            info = {"blending": "image-posthoc", "backend": resp.metadata}
        write_png(self.path("generate/grid.png"), grid)
        return info

    def stage_split(self):
        n = self.cfg.render_resolution
        tiles = split_grid(_rgb(read_png(self.need("generate/grid.png"))), self.layout)
        for i, t in enumerate(tiles, 1):
            write_png(self.path(f"split/view_{i}.png"), _resize(t, n))
        return {}

    def stage_phase2(self):
        meta = read_png(self.need("N.png"))
        buffers = [self.buffers(i) for i in range(7)]
        weights = view_weights(meta, buffers, self.cfg.alpha)
        images = [_rgb(read_png(self.need("front/front.png")))]
        images += [_rgb(read_png(self.need(f"split/view_{i}.png"))) for i in range(1, 7)]
        initial = TextureAtlas(read_png(self.need("phase1/atlas.png")))
        frozen = None
        if self.cfg.freeze_front:
            frozen = read_ctxb(self.need("phase1/coverage.ctxb")) > LEARNED_THRESHOLD
        targets = [ViewTarget(v, img, w, b) for v, img, w, b in zip(self.views, images, weights.weights, buffers)]
        prob = ProjectBackProblem(self.mesh, targets, self.cfg.atlas_resolution, self.cfg.pb_options(),
                                  initial, frozen)
        atlas, coverage, report = project_back(prob)
        write_png(self.path("atlas.png"), atlas.exported())
        write_png(self.path("coverage.png"), np.clip(coverage, 0, 1), bits=16)
        write_ctxb(self.path("coverage.ctxb"), coverage.astype(np.float32))
        with open(self.path("report.json"), "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        exported = TextureAtlas(read_png(self.path("atlas.png")))
        previews = render_previews(self.mesh, exported, self.cfg.preview_angles, self.cfg.render_resolution,
                                   self.cfg.camera_config())
        for az, img in zip(self.cfg.preview_angles, previews):
            write_png(self.path(f"previews/preview_az{az:+g}.png"), img)
        return report.to_dict()

    def backend(self):
        return make_backend(self.cfg.backend, self.cfg.base_dir)

    def run_stage(self, name):
        t0 = time.perf_counter()
        log.info("stage %s", name)
        try:
            info = getattr(self, f"stage_{name}")()
        except Exception as exc:
            self.manifest["status"] = "failed"
            self.manifest["error"] = {"stage": name, "message": str(exc)}
            self.write_manifest()
            raise
        done = {**self.manifest["stages"], name: {"seconds": round(time.perf_counter() - t0, 3), "info": info}}
        self.manifest["stages"] = {s: done[s] for s in STAGES if s in done}
        self.write_manifest()


def run_pipeline(cfg, stages=None):
    """Run ``stages`` (default: the config's stage list) in pipeline order; returns the manifest."""
    wanted = set(cfg.stages if stages is None else stages)
    unknown = wanted - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stages {sorted(unknown)}")
    run = Run(cfg)
    run.manifest["status"] = "running"
    run.manifest.pop("error", None)
    for name in STAGES:
        if name in wanted:
            run.run_stage(name)
    run.manifest["status"] = "complete"
    run.write_manifest()
    return run.manifest


def stages_from(name):
    return list(STAGES[STAGES.index(name):])
