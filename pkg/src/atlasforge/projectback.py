"""Inverse rendering of a texture atlas from weighted target views.

Minimizes ``sum_i sum_p W_ip * ||render_i(T)_p - x_ip||^2 + tv_weight * TV(T)``
over the atlas texels. Rendering is the bilinear lookup of
:mod:`atlasforge.raster`, so the data gradient is its adjoint splat.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .masks import EPS_REFINE, EPS_SEEN, LEARNED_THRESHOLD, keep_refine_generate
from .raster import TextureAtlas, rasterize_buffers, sample_atlas, sampling_matrix, splat_values

log = logging.getLogger(__name__)


class NoSupervisionError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Loss rose for too many consecutive iterations; carries the partial result."""

    def __init__(self, message, atlas, coverage, report):
        super().__init__(message)
        self.atlas = atlas
        self.coverage = coverage
        self.report = report


@dataclass
class ViewTarget:
    viewpoint: object
    image: np.ndarray
    weights: np.ndarray | None = None
    buffers: object = None


@dataclass
class ProjectBackOptions:
    step: float = 1e-2
    iterations: int = 200
    # stop once loss <= tol * initial loss
    tol: float = 0.0
    tv_weight: float = 1e-4
    tv_eps: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    workers: int = 1


@dataclass
class ProjectBackProblem:
    mesh: object
    views: list
    resolution: int = 1024
    options: ProjectBackOptions = field(default_factory=ProjectBackOptions)
    initial: TextureAtlas | None = None
    # texels excluded from optimization (e.g. the front-learned region)
    frozen: np.ndarray | None = None


@dataclass
class ProjectBackReport:
    final_loss: float
    view_rmse: list
    covered_fraction: float
    iterations: int
    history: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {"final_loss": self.final_loss, "view_rmse": list(self.view_rmse),
                "covered_fraction": self.covered_fraction, "iterations": self.iterations}


@dataclass
class _ViewTerm:
    matrix: object
    target: np.ndarray
    weight: np.ndarray


def _prepare(problem):
    if not problem.views:
        raise ValueError("project-back needs at least one view")
    terms = []
    r = problem.resolution
    for vt in problem.views:
        b = vt.buffers if vt.buffers is not None else rasterize_buffers(problem.mesh, vt.viewpoint)
        n = vt.viewpoint.image_size
        img = np.asarray(vt.image, dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        if img.shape[:2] != (n, n) or b.shape != (n, n):
            raise ValueError(f"view {vt.viewpoint.id}: target {img.shape[:2]} does not match image_size {n}")
        w = b.object_mask.astype(np.float64) if vt.weights is None else np.asarray(vt.weights, dtype=np.float64)
        if np.any(w < 0):
            raise ValueError("pixel weights must be non-negative")
        if np.any(w[~b.object_mask] != 0):
            raise ValueError("pixel weights must be zero on background")
        m = b.object_mask
        terms.append(_ViewTerm(sampling_matrix(b, r), img[m], w[m]))
    channels = {t.target.shape[1] for t in terms}
    if len(channels) != 1:
        raise ValueError("all targets need the same channel count")
    if not any(t.weight.sum() > 0 for t in terms):
        raise NoSupervisionError("no supervision")
    return terms, channels.pop()


def _view_loss_grad(term, x):
    resid = term.matrix @ x - term.target
    wr = term.weight[:, None] * resid
    return float(np.sum(wr * resid)), 2.0 * (term.matrix.T @ wr)


def data_loss_and_grad(terms, x, workers=1):
    """Weighted L2 data term and its gradient, merged in view order."""
    if workers > 1 and len(terms) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda t: _view_loss_grad(t, x), terms))
    else:
        parts = [_view_loss_grad(t, x) for t in terms]
    loss = 0.0
    grad = np.zeros_like(x)
    for l, g in parts:
        loss += l
        grad += g
    return loss, grad


def tv_loss_and_grad(texels, active, eps):
    """Charbonnier total variation over neighbouring texel pairs that are both active."""
    loss = 0.0
    grad = np.zeros_like(texels)
    for axis in (0, 1):
        d = np.diff(texels, axis=axis)
        both = np.logical_and(np.take(active, range(0, active.shape[axis] - 1), axis=axis),
                              np.take(active, range(1, active.shape[axis]), axis=axis))
        both = both[..., None]
        s = np.sqrt(d * d + eps * eps)
        loss += float(np.sum((s - eps) * both))
        g = np.where(both, d / s, 0.0)
        if axis == 0:
            grad[1:] += g
            grad[:-1] -= g
        else:
            grad[:, 1:] += g
            grad[:, :-1] -= g
    return loss, grad


@dataclass
class Objective:
    """Loss and gradient of a :class:`ProjectBackProblem` over flat (R*R, C) texels.

    Gradients of texels outside ``movable`` are zeroed, so any descent method
    leaves them untouched.
    """

    terms: list
    resolution: int
    channels: int
    coverage: np.ndarray
    movable: np.ndarray
    tv_weight: float
    tv_eps: float
    workers: int = 1

    def __call__(self, x):
        r, c = self.resolution, self.channels
        loss, grad = data_loss_and_grad(self.terms, x, self.workers)
        if self.tv_weight > 0:
            tl, tg = tv_loss_and_grad(x.reshape(r, r, c), self.movable, self.tv_eps)
            loss += self.tv_weight * tl
            grad += self.tv_weight * tg.reshape(r * r, c)
        grad[~self.movable.ravel()] = 0.0
        return loss, grad

    def view_rmse(self, x):
        out = []
        for t in self.terms:
            resid = t.matrix @ x - t.target
            den = t.weight.sum() * self.channels
            out.append(float(np.sqrt(np.sum(t.weight[:, None] * resid ** 2) / den)) if den > 0 else 0.0)
        return out


def build_objective(problem):
    opt = problem.options
    terms, c = _prepare(problem)
    r = problem.resolution
    coverage = np.zeros(r * r)
    for t in terms:
        coverage += t.matrix.T @ t.weight
    coverage = coverage.reshape(r, r)
    movable = coverage > 0
    if problem.frozen is not None:
        movable &= ~np.asarray(problem.frozen, dtype=bool)
    return Objective(terms, r, c, coverage, movable, opt.tv_weight, opt.tv_eps, opt.workers)


def project_back(problem):
    """Fit the atlas to the weighted targets of ``problem``.

    Returns ``(atlas, coverage, report)`` where coverage is the total splat
    weight per texel. Texels with zero coverage (or listed in
    ``problem.frozen``) keep their initial values bit-for-bit.

    Raises :class:`DivergenceError` once the loss has risen ``patience``
    iterations in a row while above its starting value.
    """
    opt = problem.options
    objective = build_objective(problem)
    r, c = objective.resolution, objective.channels
    coverage = objective.coverage
    if problem.initial is None:
        init = np.full((r, r, c), 0.5)
    else:
        init = np.array(problem.initial.texels, dtype=np.float64)
        if init.shape != (r, r, c):
            raise ValueError(f"initial atlas {init.shape} does not match {(r, r, c)}")

    x = init.reshape(r * r, c).copy()
    m1 = np.zeros_like(x)
    m2 = np.zeros_like(x)
    history = []
    loss0 = None
    rises = 0
    it = 0

    def report(loss, iters):
        covered = float(np.mean(coverage > LEARNED_THRESHOLD))
        return ProjectBackReport(float(loss), objective.view_rmse(x), covered, iters, history)

    for it in range(1, opt.iterations + 1):
        loss, grad = objective(x)
        history.append(loss)
        if loss0 is None:
            loss0 = loss
        elif loss > history[-2] and loss > loss0:
            # momentum overshoot below the starting loss is not divergence
            rises += 1
            if rises >= opt.patience:
                raise DivergenceError(f"loss increased for {rises} consecutive iterations",
                                      TextureAtlas(x.reshape(r, r, c)), coverage, report(loss, it))
        else:
            rises = 0
        if loss <= opt.tol * loss0:
            it -= 1
            break
        if opt.optimizer == "adam":
            m1 = opt.beta1 * m1 + (1 - opt.beta1) * grad
            m2 = opt.beta2 * m2 + (1 - opt.beta2) * grad * grad
            mhat = m1 / (1 - opt.beta1 ** it)
            vhat = m2 / (1 - opt.beta2 ** it)
            x -= opt.step * mhat / (np.sqrt(vhat) + opt.eps)
        elif opt.optimizer == "gd":
            x -= opt.step * grad
        else:
            raise ValueError(f"unknown optimizer {opt.optimizer!r}")

    final, _ = objective(x)
    log.info("project-back: %d iterations, loss %.4g", it, final)
    return TextureAtlas(x.reshape(r, r, c)), coverage, report(final, it)


def sequential_project_back(problem, eps_seen=EPS_SEEN, eps_refine=EPS_REFINE):
    """One-view-at-a-time baseline.

    Views are processed in order, each starting from the previous atlas. A
    texture-space cache of the best z-normal seen so far decides which pixels
    of the next view supervise: only the generate and refine regions do.
    """
    r = problem.resolution
    atlas = problem.initial
    cache = np.zeros((r, r))
    for vt in problem.views:
        b = vt.buffers if vt.buffers is not None else rasterize_buffers(problem.mesh, vt.viewpoint)
        m = b.object_mask
        cached = np.zeros(b.shape)
        if m.any():
            cached[m] = sample_atlas(cache, b.uv[m])[:, 0]
        _, refine, generate = keep_refine_generate(b.znormal, cached, m, eps_seen, eps_refine)
        base = m.astype(np.float64) if vt.weights is None else np.asarray(vt.weights, dtype=np.float64)
        w = base * (refine.mask | generate.mask)
        if not np.any(w > 0):
            continue
        sub = ProjectBackProblem(problem.mesh, [ViewTarget(vt.viewpoint, vt.image, w, b)], r,
                                 problem.options, atlas, problem.frozen)
        atlas, _, _ = project_back(sub)
        upd = w > 0
        num = splat_values(b.znormal[upd], b.uv[upd], r)[:, :, 0]
        den = splat_values(np.ones(int(upd.sum())), b.uv[upd], r)[:, :, 0]
        seen = den > 0
        cache[seen] = np.maximum(cache[seen], num[seen] / den[seen])
    if atlas is None:
        raise NoSupervisionError("no supervision")
    return atlas


def psnr(a, b, mask=None, peak=1.0):
    """Peak signal-to-noise ratio in dB over ``mask`` (leading dimensions)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if mask is not None:
        a = a[mask]
        b = b[mask]
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0 else 10 * np.log10(peak * peak / mse)
