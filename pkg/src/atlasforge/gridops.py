"""2x3 view grids, the forward noising process, a stand-in latent codec and masked blending.

The codec is not a learned VAE: encoding area-averages ``factor`` x ``factor``
blocks (zero-padding extra latent channels) and decoding upsamples
bilinearly. Everything downstream only relies on it being a fixed,
deterministic map between image and latent resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LATENT_FACTOR = 8
LATENT_CHANNELS = 4


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridLayout:
    rows: int = 2
    cols: int = 3
    tile_size: int = 320
    order: tuple = (1, 2, 3, 4, 5, 6)

    def __post_init__(self):
        if sorted(self.order) != list(range(1, self.rows * self.cols + 1)):
            raise GridError(f"order {self.order} is not a permutation of 1..{self.rows * self.cols}")

    @property
    def shape(self):
        return self.rows * self.tile_size, self.cols * self.tile_size


def assemble_grid(tiles, layout=GridLayout()):
    """Place ``tiles`` (``tiles[k]`` is view k+1) row-major in ``layout.order``."""
    tiles = [np.asarray(t) for t in tiles]
    n = layout.rows * layout.cols
    if len(tiles) != n:
        raise GridError(f"expected {n} tiles, got {len(tiles)}")
    s = layout.tile_size
    ref = tiles[0]
    for k, t in enumerate(tiles):
        if t.shape[:2] != (s, s) or t.shape[2:] != ref.shape[2:] or t.dtype != ref.dtype:
            raise GridError(f"tile for view {k + 1} has shape {t.shape} {t.dtype}, "
                            f"expected {(s, s) + ref.shape[2:]} {ref.dtype}")
    grid = np.empty((layout.rows * s, layout.cols * s) + ref.shape[2:], dtype=ref.dtype)
    for cell, view in enumerate(layout.order):
        r, c = divmod(cell, layout.cols)
        grid[r * s:(r + 1) * s, c * s:(c + 1) * s] = tiles[view - 1]
    return grid


def split_grid(grid, layout=GridLayout()):
    """Inverse of :func:`assemble_grid`; tiles come back in view order 1..6.

    The tile size is taken from the grid itself, so a grid decoded at any
    resolution divisible by the layout splits cleanly.
    """
    grid = np.asarray(grid)
    h, w = grid.shape[:2]
    if h % layout.rows or w % layout.cols or h // layout.rows != w // layout.cols:
        raise GridError(f"grid of shape {grid.shape[:2]} does not split into "
                        f"{layout.rows}x{layout.cols} square tiles")
    s = h // layout.rows
    tiles = [None] * (layout.rows * layout.cols)
    for cell, view in enumerate(layout.order):
        r, c = divmod(cell, layout.cols)
        tiles[view - 1] = grid[r * s:(r + 1) * s, c * s:(c + 1) * s].copy()
    return tiles


# -- noise schedule --------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients ``alpha_bar[0..steps]`` with alpha_bar[0] = 1."""

    steps: int = 36
    alpha_bar: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.alpha_bar is None:
            object.__setattr__(self, "alpha_bar", cosine_alpha_bar(self.steps))
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if len(ab) != self.steps + 1 or ab[0] != 1.0 or np.any(np.diff(ab) >= 0) or ab[-1] <= 0:
            raise ValueError("alpha_bar must start at 1 and decrease strictly while staying positive")
        object.__setattr__(self, "alpha_bar", ab)


def cosine_alpha_bar(steps, s=0.008, max_beta=0.999):
    """Cosine schedule with per-step betas clipped at ``max_beta``."""
    def f(t):
        return math.cos((t / steps + s) / (1 + s) * math.pi / 2) ** 2

    betas = np.array([min(1 - f(t + 1) / f(t), max_beta) for t in range(steps)])
    return np.concatenate([[1.0], np.cumprod(1 - betas)])


# -- latents ---------------------------------------------------------------------

@dataclass
class LatentGrid:
    data: np.ndarray
    t: int = 0
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones(self.data.shape[:2], dtype=bool)
        elif np.shape(self.mask) != self.data.shape[:2]:
            raise ValueError(f"mask {np.shape(self.mask)} does not match latent {self.data.shape[:2]}")


def encode_latent(image, factor=LATENT_FACTOR, channels=LATENT_CHANNELS):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if h % factor or w % factor:
        raise GridError(f"image {h}x{w} not divisible by latent factor {factor}")
    if c > channels:
        raise GridError(f"image has {c} channels, latent only {channels}")
    z = np.zeros((h // factor, w // factor, channels))
    z[:, :, :c] = img.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))
    return LatentGrid(z, 0)


def _bilinear_upsample(a, factor):
    """Half-pixel-aligned bilinear resize by an integer factor, edges clamped."""
    h, w = a.shape[:2]

    def axis_taps(n):
        x = (np.arange(n * factor) + 0.5) / factor - 0.5
        x0 = np.floor(x).astype(np.int64)
        fx = x - x0
        return np.clip(x0, 0, n - 1), np.clip(x0 + 1, 0, n - 1), fx

    y0, y1, fy = axis_taps(h)
    x0, x1, fx = axis_taps(w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def decode_latent(z, factor=LATENT_FACTOR, channels=3):
    data = z.data if isinstance(z, LatentGrid) else np.asarray(z, dtype=np.float64)
    return _bilinear_upsample(data[:, :, :channels], factor)


def add_noise(z0, t, noise, schedule=NoiseSchedule()):
    """Forward process: sqrt(ab[t]) * z0 + sqrt(1 - ab[t]) * noise."""
    if not 0 <= t <= schedule.steps:
        raise ValueError(f"timestep {t} outside [0, {schedule.steps}]")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != z0.data.shape:
        raise ValueError(f"noise shape {noise.shape} != latent shape {z0.data.shape}")
    ab = schedule.alpha_bar[t]
    return LatentGrid(math.sqrt(ab) * z0.data + math.sqrt(1 - ab) * noise, t, z0.mask)


def blend_latents(z, z_gt_noised, mask):
    """``z * mask + z_gt_noised * (1 - mask)``: generated where mask is 1, pinned elsewhere."""
    if z.t != z_gt_noised.t:
        raise ValueError(f"timestep mismatch: {z.t} vs {z_gt_noised.t}")
    if z.data.shape != z_gt_noised.data.shape:
        raise ValueError("latent shapes differ")
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != z.data.shape[:2]:
        raise ValueError(f"mask {m.shape} does not match latent {z.data.shape[:2]}")
    m = m[:, :, None]
    return LatentGrid(z.data * m + z_gt_noised.data * (1 - m), z.t, np.asarray(mask) > 0)


def blended_denoise(denoise_step, z_gt, mask, schedule=NoiseSchedule(), seed=0, z_init=None):
    """Run the reverse loop with per-step blending against the noised ground truth.

    ``denoise_step(z, t)`` must return the latent for step ``t`` (array or
    :class:`LatentGrid`). After each step the region where ``mask`` is 0 is
    replaced by ``z_gt`` noised to the same step, so at t = 0 it equals
    ``z_gt`` exactly there.
    """
    rng = np.random.default_rng(seed)
    shape = z_gt.data.shape
    z = LatentGrid(rng.standard_normal(shape) if z_init is None else z_init, schedule.steps, mask)
    for t in range(schedule.steps, 0, -1):
        out = denoise_step(z, t - 1)
        z = out if isinstance(out, LatentGrid) else LatentGrid(out, t - 1, mask)
        z.t = t - 1
        zq = add_noise(z_gt, t - 1, rng.standard_normal(shape), schedule)
        z = blend_latents(z, zq, mask)
    return z
