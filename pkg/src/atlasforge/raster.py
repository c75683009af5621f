"""Software z-buffer rasterizer, bilinear atlas sampling and its adjoint splat.

Atlas convention: ``texels[row, col]`` with row 0 at v = 1 (top of the
image), texel centers at u = (col + 0.5) / R and v = 1 - (row + 0.5) / R.
Lookups clamp to the edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import projection_matrix, view_matrix


@dataclass
class RenderBuffers:
    """Per-view rasters. ``view_depth`` is the unnormalized camera distance (inf on background)."""

    depth: np.ndarray
    znormal: np.ndarray
    face_index: np.ndarray
    uv: np.ndarray
    object_mask: np.ndarray
    view_depth: np.ndarray

    @property
    def shape(self):
        return self.face_index.shape

    def foreground_uv(self):
        return self.uv[self.object_mask]


@dataclass
class TextureAtlas:
    texels: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.texels, dtype=np.float64)
        if t.ndim == 2:
            t = t[:, :, None]
        if t.ndim != 3 or t.shape[0] != t.shape[1]:
            raise ValueError(f"atlas must be R x R x C, got {t.shape}")
        self.texels = t

    @property
    def resolution(self):
        return self.texels.shape[0]

    @property
    def channels(self):
        return self.texels.shape[2]

    @classmethod
    def constant(cls, resolution, value):
        value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        return cls(np.broadcast_to(value, (resolution, resolution, len(value))).copy())

    def exported(self):
        """Texels clamped to [0, 1]; optimization itself never clamps."""
        return np.clip(self.texels, 0.0, 1.0)


def _screen_vertices(mesh, v):
    m = view_matrix(v)
    cam = mesh.vertices @ m[:3, :3].T + m[:3, 3]
    clip = np.c_[cam, np.ones(len(cam))] @ projection_matrix(v).T
    w = clip[:, 3]
    with np.errstate(divide="ignore", invalid="ignore"):
        ndc = clip[:, :2] / w[:, None]
    n = v.image_size
    px = (ndc[:, 0] + 1) * 0.5 * n
    py = (1 - ndc[:, 1]) * 0.5 * n
    return np.stack([px, py], 1), -cam[:, 2], mesh.face_normals @ m[2, :3]


def rasterize_buffers(mesh, v, depth_floor=0.5):
    """Z-buffered rasterization of ``mesh`` seen from viewpoint ``v``.

    Faces whose camera-space normal z-component is not positive are culled, as
    are faces with a corner in front of the near plane (no clipping). UVs are
    interpolated perspective-correctly. Foreground depth is the camera distance
    min-max mapped to [depth_floor, 1] with 1 nearest; background depth is 0.
    """
    n = v.image_size
    scr, dist, zn = _screen_vertices(mesh, v)
    zbuf = np.full((n, n), np.inf)
    fidx = np.full((n, n), -1, dtype=np.int64)
    bary = np.zeros((n, n, 3))

    tri_scr = scr[mesh.faces]
    tri_dist = dist[mesh.faces]
    ok = (zn > 0) & np.all(tri_dist > v.near, axis=1) & np.all(tri_dist < v.far, axis=1)
    lo = np.floor(tri_scr.min(axis=1) - 0.5).astype(np.int64) + 1
    hi = np.ceil(tri_scr.max(axis=1) - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, n - 1)
    ok &= np.all(hi >= lo, axis=1)

    for f in np.flatnonzero(ok):
        (x0, y0), (x1, y1) = lo[f], hi[f]
        (ax, ay), (bx, by), (cx, cy) = tri_scr[f]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) < 1e-12:
            continue
        xs = np.arange(x0, x1 + 1) + 0.5
        ys = (np.arange(y0, y1 + 1) + 0.5)[:, None]
        w0 = ((bx - xs) * (cy - ys) - (by - ys) * (cx - xs)) / area
        w1 = ((cx - xs) * (ay - ys) - (cy - ys) * (ax - xs)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        d0, d1, d2 = tri_dist[f]
        q0, q1, q2 = w0 / d0, w1 / d1, w2 / d2
        s = q0 + q1 + q2
        z = 1.0 / s
        win = zbuf[y0:y1 + 1, x0:x1 + 1]
        upd = inside & (z < win)
        if not upd.any():
            continue
        win[upd] = z[upd]
        fidx[y0:y1 + 1, x0:x1 + 1][upd] = f
        bwin = bary[y0:y1 + 1, x0:x1 + 1]
        bwin[upd] = np.stack([q0[upd], q1[upd], q2[upd]], 1) / s[upd][:, None]

    mask = fidx >= 0
    uv = np.zeros((n, n, 2))
    znormal = np.zeros((n, n))
    depth = np.zeros((n, n))
    if mask.any():
        fi = fidx[mask]
        uv[mask] = np.einsum("nk,nkc->nc", bary[mask], mesh.corner_uvs()[fi])
        znormal[mask] = zn[fi]
        d = zbuf[mask]
        dmin, dmax = d.min(), d.max()
        if dmax > dmin:
            depth[mask] = depth_floor + (1 - depth_floor) * (dmax - d) / (dmax - dmin)
        else:
            depth[mask] = 1.0
    return RenderBuffers(depth=depth, znormal=znormal, face_index=fidx, uv=uv, object_mask=mask, view_depth=zbuf)


# -- bilinear sampling and its adjoint -----------------------------------------

def _bilinear_coords(uv, r):
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    x = uv[:, 0] * r - 0.5
    y = (1.0 - uv[:, 1]) * r - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    cx = np.clip(x0, 0, r - 1), np.clip(x0 + 1, 0, r - 1)
    cy = np.clip(y0, 0, r - 1), np.clip(y0 + 1, 0, r - 1)
    return cx, cy, fx, fy


def bilinear_taps(uv, resolution):
    """Flat texel indices (n, 4) and weights (n, 4) of the bilinear lookup at ``uv``."""
    r = resolution
    (cx0, cx1), (cy0, cy1), fx, fy = _bilinear_coords(uv, r)
    idx = np.stack([cy0 * r + cx0, cy0 * r + cx1, cy1 * r + cx0, cy1 * r + cx1], 1)
    w = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], 1)
    return idx, w


def sample_atlas(texels, uv):
    """Bilinear lookup; returns (n, C) for (n, 2) uv.

    Evaluated as nested lerps ``a + f * (b - a)`` so a constant atlas samples
    back bit-exactly.
    """
    texels = np.asarray(texels, dtype=np.float64)
    if texels.ndim == 2:
        texels = texels[:, :, None]
    (cx0, cx1), (cy0, cy1), fx, fy = _bilinear_coords(uv, texels.shape[0])
    fx = fx[:, None]
    fy = fy[:, None]
    top = texels[cy0, cx0] + fx * (texels[cy0, cx1] - texels[cy0, cx0])
    bot = texels[cy1, cx0] + fx * (texels[cy1, cx1] - texels[cy1, cx0])
    return top + fy * (bot - top)


def splat_values(values, uv, resolution):
    """Adjoint of :func:`sample_atlas`: scatter (n, C) values into an (R, R, C) plane."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    idx, w = bilinear_taps(uv, resolution)
    flat_idx = idx.ravel()
    out = np.empty((resolution * resolution, values.shape[1]))
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(flat_idx, weights=(w * values[:, c:c + 1]).ravel(),
                                minlength=resolution * resolution)
    return out.reshape(resolution, resolution, -1)


def sampling_matrix(buffers, resolution):
    """Sparse (n_foreground, R²) matrix of bilinear weights for one view.

    Rows follow the row-major order of ``buffers.object_mask``.
    """
    uv = buffers.foreground_uv()
    idx, w = bilinear_taps(uv, resolution)
    rows = np.repeat(np.arange(len(uv)), 4)
    m = sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(len(uv), resolution * resolution))
    m.sum_duplicates()
    return m


def render_textured(mesh, v, atlas, background=0.5, buffers=None):
    """Unlit albedo render: bilinear atlas lookup per foreground pixel."""
    if buffers is None:
        buffers = rasterize_buffers(mesh, v)
    texels = atlas.texels if isinstance(atlas, TextureAtlas) else np.asarray(atlas, dtype=np.float64)
    if texels.ndim == 2:
        texels = texels[:, :, None]
    n = buffers.shape[0]
    img = np.empty((n, n, texels.shape[2]))
    img[...] = background
    if buffers.object_mask.any():
        img[buffers.object_mask] = sample_atlas(texels, buffers.foreground_uv())
    return img


@dataclass
class AtlasAccumulator:
    """Weighted color sum and weight sum per texel."""

    value: np.ndarray
    weight: np.ndarray

    @classmethod
    def zeros(cls, resolution, channels=3):
        return cls(np.zeros((resolution, resolution, channels)), np.zeros((resolution, resolution)))

    @property
    def resolution(self):
        return self.weight.shape[0]

    def merge(self, other):
        return AtlasAccumulator(self.value + other.value, self.weight + other.weight)

    def normalized(self, fill=0.0):
        out = np.full(self.value.shape, fill, dtype=np.float64)
        ok = self.weight > 0
        out[ok] = self.value[ok] / self.weight[ok][:, None]
        return out


def splat_to_atlas(buffers, image, weights, accum):
    """Distribute ``weights * image`` of every foreground pixel over its four bilinear texels.

    Returns a new accumulator; addition is commutative so the order in which
    views are splatted does not matter.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("splat weights must be non-negative")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    m = buffers.object_mask
    uv = buffers.uv[m]
    w = weights[m]
    r = accum.resolution
    value = splat_values(image[m] * w[:, None], uv, r)
    weight = splat_values(w, uv, r)[:, :, 0]
    return AtlasAccumulator(accum.value + value, accum.weight + weight)


# -- texture-space rasterization -----------------------------------------------

@dataclass
class UVCoverage:
    """Texel ownership of every face in UV space.

    ``faces`` and ``texels`` are parallel arrays listing each (face, flat texel)
    pair whose texel center lies inside the face's UV triangle. ``owner`` keeps
    the last face per texel and ``overlaps`` counts texels claimed more than once.
    """

    resolution: int
    faces: np.ndarray
    texels: np.ndarray
    owner: np.ndarray
    overlaps: int


def rasterize_uv(mesh, resolution):
    r = resolution
    tri = mesh.corner_uvs().copy()
    tri[:, :, 0] = tri[:, :, 0] * r
    tri[:, :, 1] = (1.0 - tri[:, :, 1]) * r
    lo = np.maximum(np.floor(tri.min(axis=1) - 0.5).astype(np.int64) + 1, 0)
    hi = np.minimum(np.ceil(tri.max(axis=1) - 0.5).astype(np.int64), r - 1)
    fs, ts, strict = [], [], []
    for f in range(mesh.n_faces):
        (x0, y0), (x1, y1) = lo[f], hi[f]
        if x1 < x0 or y1 < y0:
            continue
        (ax, ay), (bx, by), (cx, cy) = tri[f]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) < 1e-12:
            continue
        xs = np.arange(x0, x1 + 1) + 0.5
        ys = (np.arange(y0, y1 + 1) + 0.5)[:, None]
        w0 = ((bx - xs) * (cy - ys) - (by - ys) * (cx - xs)) / area
        w1 = ((cx - xs) * (ay - ys) - (cy - ys) * (ax - xs)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        yy, xx = np.nonzero(inside)
        if len(yy):
            ts.append((yy + y0) * r + (xx + x0))
            fs.append(np.full(len(yy), f, dtype=np.int64))
            eps = 1e-9
            strict.append(((w0 > eps) & (w1 > eps) & (w2 > eps))[yy, xx])
    faces = np.concatenate(fs) if fs else np.zeros(0, np.int64)
    texels = np.concatenate(ts) if ts else np.zeros(0, np.int64)
    interior = np.concatenate(strict) if strict else np.zeros(0, bool)
    owner = np.full(r * r, -1, dtype=np.int64)
    owner[texels] = faces
    # texels on a shared edge belong to both faces; only interior double claims overlap
    counts = np.bincount(texels[interior], minlength=r * r)
    return UVCoverage(r, faces, texels, owner.reshape(r, r), int(np.sum(counts > 1)))
