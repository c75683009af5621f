"""Max-z-normal meta-texture and the per-view blending weights derived from it.

The meta-texture N is a single-channel atlas that, sampled from any view,
should never fall below that view's z-normal n. It is learned by descending
sum(relu(n - N)) over every foreground pixel of every view; the view weight is
then ``exp(-alpha * |N - n|)``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import face_znormals
from .raster import rasterize_buffers, rasterize_uv, sample_atlas, sampling_matrix

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 10.0


@dataclass
class MetaTexOptions:
    """Rprop settings: each texel moves by its own step along the gradient sign.

    Steps start at (and never exceed) ``step``, shrink by ``decrease`` on a
    sign flip and grow by ``increase`` while the sign holds.
    """

    step: float = 1e-2
    iterations: int = 400
    tol: float = 1e-3
    l2: float = 1e-4
    increase: float = 1.2
    decrease: float = 0.5
    min_step: float = 1e-6


@dataclass
class MetaTexture:
    texels: np.ndarray
    loss: float = 0.0
    mean_violation: float = 0.0
    iterations: int = 0
    converged: bool = True
    history: list = field(default_factory=list, repr=False)

    @property
    def resolution(self):
        return self.texels.shape[0]


@dataclass
class ViewWeights:
    weights: list
    alpha: float

    def __getitem__(self, i):
        return self.weights[i]

    def __len__(self):
        return len(self.weights)


def _buffers_for(mesh, views, buffers):
    if buffers is None:
        buffers = [rasterize_buffers(mesh, v) for v in views]
    if len(buffers) != len(views):
        raise ValueError("need one RenderBuffers per view")
    return buffers


def hinge_loss(texels, buffers):
    """Total and per-pixel mean of relu(n - N) over all foreground pixels."""
    total, count = 0.0, 0
    for b in buffers:
        m = b.object_mask
        if not m.any():
            continue
        sampled = sample_atlas(texels, b.uv[m])[:, 0]
        total += float(np.maximum(b.znormal[m] - sampled, 0.0).sum())
        count += int(m.sum())
    return total, (total / count if count else 0.0)


def learn_max_znormals(mesh, views, resolution, options=None, buffers=None):
    """Fit the meta-texture by Rprop on the hinge loss plus a small L2 pull-down.

    Texels start at 0 and are kept in [0, 1]. Training stops once the mean
    per-pixel violation drops below ``options.tol``; otherwise a warning
    reports the residual.
    """
    opt = options or MetaTexOptions()
    buffers = _buffers_for(mesh, views, buffers)
    r = resolution
    mats, targets = [], []
    for b in buffers:
        if b.object_mask.any():
            mats.append(sampling_matrix(b, r))
            targets.append(b.znormal[b.object_mask])
    n_pix = sum(len(t) for t in targets)
    x = np.zeros(r * r)
    if n_pix == 0:
        return MetaTexture(x.reshape(r, r), iterations=0)

    mt = MetaTexture(np.zeros((r, r)))
    steps = np.full_like(x, opt.step)
    prev = np.zeros_like(x)
    it = 0
    for it in range(1, opt.iterations + 1):
        grad = 2.0 * opt.l2 * x
        loss = 0.0
        for p, n in zip(mats, targets):
            resid = n - p @ x
            active = resid > 0
            loss += float(resid[active].sum())
            grad -= p.T @ active.astype(np.float64)
        mean_violation = loss / n_pix
        mt.history.append(mean_violation)
        if mean_violation < opt.tol:
            it -= 1
            break
        agree = grad * prev
        steps = np.where(agree > 0, np.minimum(steps * opt.increase, opt.step), steps)
        steps = np.where(agree < 0, np.maximum(steps * opt.decrease, opt.min_step), steps)
        # iRprop-: skip the move right after a sign flip
        grad[agree < 0] = 0.0
        x -= np.sign(grad) * steps
        np.clip(x, 0.0, 1.0, out=x)
        prev = grad

    texels = x.reshape(r, r)
    loss, mean_violation = hinge_loss(texels, buffers)
    mt.texels = texels
    mt.loss = loss
    mt.mean_violation = mean_violation
    mt.iterations = it
    mt.converged = mean_violation < opt.tol
    if not mt.converged:
        warnings.warn(f"meta-texture did not converge: mean violation {mean_violation:.3g} "
                      f"after {it} iterations", RuntimeWarning, stacklevel=2)
    log.info("meta-texture: %d iterations, mean violation %.3g", it, mean_violation)
    return mt


def face_visibility(buffers, n_faces):
    """(V, F) boolean: face f covers at least one pixel of view v."""
    vis = np.zeros((len(buffers), n_faces), dtype=bool)
    for i, b in enumerate(buffers):
        fi = b.face_index[b.object_mask]
        vis[i, np.unique(fi)] = True
    return vis


def oracle_face_values(mesh, views, buffers=None):
    """(F,) best z-normal of each face over the views where it is visible; 0 if never seen."""
    buffers = _buffers_for(mesh, views, buffers)
    zn = face_znormals(mesh, views)
    vis = face_visibility(buffers, mesh.n_faces) & (zn > 0)
    return np.where(vis, zn, 0.0).max(axis=0) if len(views) else np.zeros(mesh.n_faces)


def face_level_hinge(face_values, buffers):
    """Mean relu(n - N) when N is read per face through the face-index buffer."""
    total, count = 0.0, 0
    for b in buffers:
        m = b.object_mask
        total += float(np.maximum(b.znormal[m] - face_values[b.face_index[m]], 0.0).sum())
        count += int(m.sum())
    return total / count if count else 0.0


def oracle_max_znormals(mesh, views, resolution, buffers=None):
    """Closed-form meta-texture by texture-space rasterization.

    Each texel takes the largest z-normal of its face over the views in which
    that face is front-facing and present in the view's face-index buffer; 0
    if the face is never seen. Texels claimed by several faces keep the max.
    """
    face_val = oracle_face_values(mesh, views, buffers)
    r = resolution
    cov = rasterize_uv(mesh, r)
    out = np.zeros(r * r)
    np.maximum.at(out, cov.texels, face_val[cov.faces])
    if cov.overlaps:
        warnings.warn(f"{cov.overlaps} texels are claimed by more than one face", RuntimeWarning, stacklevel=2)
    return MetaTexture(out.reshape(r, r), loss=0.0, mean_violation=0.0)


def _abs_gap(meta, buffers):
    texels = meta.texels if isinstance(meta, MetaTexture) else meta
    out = []
    for b in buffers:
        g = np.zeros(b.shape)
        m = b.object_mask
        if m.any():
            g[m] = np.abs(sample_atlas(texels, b.uv[m])[:, 0] - b.znormal[m])
        out.append(g)
    return out


def view_weights(meta, buffers, alpha=DEFAULT_ALPHA):
    """``exp(-alpha * |N - n|)`` on foreground pixels, 0 on background."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    ws = []
    for b, g in zip(buffers, _abs_gap(meta, buffers)):
        w = np.where(b.object_mask, np.exp(-alpha * g), 0.0)
        ws.append(w)
    return ViewWeights(ws, float(alpha))


def log_view_weights(meta, buffers, alpha=DEFAULT_ALPHA):
    """Natural log of :func:`view_weights`; -inf on background. Safe for huge alpha."""
    return [np.where(b.object_mask, -alpha * g, -np.inf) for b, g in zip(buffers, _abs_gap(meta, buffers))]
