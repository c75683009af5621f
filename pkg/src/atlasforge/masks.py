"""Face-view assignment masks, new-region masks and keep/refine/generate partitions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import sample_atlas

LEARNED_THRESHOLD = 0.5
EPS_SEEN = 1e-4
EPS_REFINE = 0.05


@dataclass
class FaceViewMask:
    """Per-view boolean masks plus the first winning view of every face (-1 if unseen)."""

    masks: np.ndarray
    winner: np.ndarray

    def __getitem__(self, v):
        return self.masks[v]


@dataclass
class RegionMask:
    mask: np.ndarray
    kind: str
    latent: np.ndarray | None = None


def binary_face_view_masks(face_index, face_znormals):
    """Assign every face to the view(s) where its z-normal is largest.

    ``face_index`` is (V, H, W) with -1 on background and ``face_znormals``
    is (V, F). A foreground pixel stays true unless its face has a strictly
    larger z-normal in another view where the face also appears, so ties keep
    every maximizer.
    """
    face_index = np.asarray(face_index)
    zn = np.asarray(face_znormals, dtype=np.float64)
    nv = face_index.shape[0]
    nf = zn.shape[1]
    fg = face_index >= 0

    appears = np.zeros((nv, nf), dtype=bool)
    for v in range(nv):
        appears[v, face_index[v][fg[v]]] = True
    zmax = np.where(appears, zn, -np.inf).max(axis=0) if nv else np.full(nf, -np.inf)

    masks = fg.copy()
    for v in range(nv):
        f = face_index[v][fg[v]]
        masks[v][fg[v]] = ~(zn[v, f] < zmax[f])

    seen = appears.any(axis=0)
    winner = np.where(seen, np.argmax(np.where(appears, zn, -np.inf), axis=0), -1)
    return FaceViewMask(masks, winner)


def binary_face_view_masks_reference(face_index, face_znormals):
    """Literal per-pixel loop version of :func:`binary_face_view_masks` (slow; for testing)."""
    face_index = np.asarray(face_index)
    nv, h, w = face_index.shape
    groups = {}
    for v in range(nv):
        for i in range(h):
            for j in range(w):
                f = int(face_index[v, i, j])
                if f >= 0:
                    groups.setdefault(f, {}).setdefault(v, []).append((i, j))
    mask = face_index >= 0
    for f, per_view in groups.items():
        if not per_view:
            continue
        zmax = max(face_znormals[v][f] for v in per_view)
        for v, pixels in per_view.items():
            if face_znormals[v][f] < zmax:
                for i, j in pixels:
                    mask[v, i, j] = False
    return mask


def downsample_mask(mask, factor):
    """Area-average ``factor`` x ``factor`` blocks then binarize at > 0.5."""
    m = np.asarray(mask, dtype=np.float64)
    h, w = m.shape
    if h % factor or w % factor:
        raise ValueError(f"mask shape {m.shape} not divisible by {factor}")
    return m.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3)) > 0.5


def upsample_mask(mask, factor):
    """Nearest-neighbour expansion of a latent-resolution mask."""
    return np.repeat(np.repeat(np.asarray(mask), factor, axis=0), factor, axis=1)


def new_region_mask(buffers, coverage, threshold=LEARNED_THRESHOLD, factor=8):
    """Object mask with the already-learned part of the atlas set to 0.

    ``coverage`` is an atlas-shaped weight plane; a pixel counts as learned
    when its bilinear lookup into ``coverage`` exceeds ``threshold``. The
    latent-resolution copy is attached when the image size divides by
    ``factor``.
    """
    mask = buffers.object_mask.copy()
    if mask.any():
        sampled = sample_atlas(np.asarray(coverage, dtype=np.float64), buffers.uv[mask])[:, 0]
        mask[mask] = ~(sampled > threshold)
    latent = None
    if factor and mask.shape[0] % factor == 0 and mask.shape[1] % factor == 0:
        latent = downsample_mask(mask, factor)
    return RegionMask(mask, "new-region", latent)


def keep_refine_generate(current_znormal, cached_max, object_mask=None, eps_seen=EPS_SEEN, eps_refine=EPS_REFINE):
    """Partition the foreground by comparing current z-normals with the cached maximum.

    generate: never seen before; refine: seen, but the current view is better
    by more than ``eps_refine``; keep: everything else. Foreground defaults to
    ``current_znormal > 0``.
    """
    cur = np.asarray(current_znormal, dtype=np.float64)
    cached = np.asarray(cached_max, dtype=np.float64)
    fg = cur > 0 if object_mask is None else np.asarray(object_mask, dtype=bool)
    generate = fg & (cached < eps_seen)
    refine = fg & ~generate & (cur > cached + eps_refine)
    keep = fg & ~generate & ~refine
    return RegionMask(keep, "keep"), RegionMask(refine, "refine"), RegionMask(generate, "generate")
