"""Image sources for the front view and the six-view grid.

Two backends share one interface: :class:`FixtureBackend` serves files from
a directory (tests, offline runs) and :class:`HttpBackend` talks JSON to a
generation service. Both return PNG bytes untouched; callers decode.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field

import numpy as np

from .fileio import ctxb_dumps, ctxb_loads, decode_png, png_bytes, png_size
from .gridops import GridLayout, assemble_grid

log = logging.getLogger(__name__)

BACKEND_ENV = "ATLASFORGE_BACKEND_URL"


class GenError(RuntimeError):
    pass


class TransportError(GenError):
    """Backend unreachable or failing transiently; safe to retry."""

    retryable = True


class ProtocolError(GenError):
    """Backend answered, but not with what was asked for."""

    retryable = False


@dataclass
class GenRequest:
    kind: str
    prompt: str
    depth_png: bytes
    condition_png: bytes | None = None
    view_suffix: str = ""
    seed: int = 0
    steps: int = 36

    def __post_init__(self):
        if self.kind not in ("front", "grid"):
            raise ValueError(f"unknown request kind {self.kind!r}")
        if self.kind == "grid" and self.condition_png is None:
            raise ValueError("grid requests need a condition image")
        if self.kind == "front" and self.condition_png is not None:
            raise ValueError("front requests take no condition image")

    @property
    def expected_size(self):
        return png_size(self.depth_png)

    def to_json(self):
        body = {"prompt": self.prompt + self.view_suffix, "seed": self.seed, "steps": self.steps,
                "depth_png_b64": base64.b64encode(self.depth_png).decode("ascii")}
        if self.condition_png is not None:
            body["condition_png_b64"] = base64.b64encode(self.condition_png).decode("ascii")
        return body


@dataclass
class GenResponse:
    image: bytes
    metadata: dict = field(default_factory=dict)


def _check_size(req, image, source):
    try:
        got = png_size(image)
    except Exception as exc:
        raise ProtocolError(f"{source}: response is not a PNG ({exc})") from exc
    if got != req.expected_size:
        raise ProtocolError(f"{source}: image is {got[0]}x{got[1]}, expected "
                            f"{req.expected_size[0]}x{req.expected_size[1]}")


class FixtureBackend:
    """Serves ``front.png`` and ``grid.png`` from a case directory.

    When ``grid.png`` is absent, ``view_01.png`` .. ``view_06.png`` are
    assembled into a grid instead. The prompt and seed are ignored.
    """

    name = "fixture"

    def __init__(self, root, layout=None):
        self.root = os.fspath(root)
        self.layout = layout

    def _read(self, name):
        path = os.path.join(self.root, name)
        if not os.path.isfile(path):
            raise ProtocolError(f"fixture file missing: {path}")
        with open(path, "rb") as fh:
            return fh.read()

    def _meta(self, req):
        return {"backend": self.name, "steps": req.steps, "seed": req.seed}

    def fetch_front(self, req):
        if req.kind != "front":
            raise ValueError("fetch_front needs a front request")
        data = self._read("front.png")
        _check_size(req, data, os.path.join(self.root, "front.png"))
        return GenResponse(data, self._meta(req))

    def fetch_grid(self, req):
        if req.kind != "grid":
            raise ValueError("fetch_grid needs a grid request")
        if os.path.isfile(os.path.join(self.root, "grid.png")):
            data = self._read("grid.png")
        else:
            tiles = [decode_png(self._read(f"view_{k:02d}.png")) for k in range(1, 7)]
            h, w = req.expected_size
            layout = self.layout or GridLayout(tile_size=h // 2)
            data = png_bytes(assemble_grid(tiles, layout))
            if (h, w) != layout.shape:
                raise ProtocolError(f"per-view fixtures form a {layout.shape} grid, expected {(h, w)}")
        _check_size(req, data, os.path.join(self.root, "grid.png"))
        return GenResponse(data, self._meta(req))


class HttpBackend:
    """JSON-over-HTTP client with a per-call timeout and bounded retries.

    Endpoints: ``POST /generate/front`` and ``POST /generate/grid`` returning
    ``{"image_png_b64": ..., "metadata": {...}}``. With ``stepwise`` the
    server must also offer ``POST /generate/grid/step`` which advances a
    CTXB-encoded latent by one step.
    """

    name = "http"

    def __init__(self, url, timeout=60.0, retries=3, backoff=0.5, stepwise=False):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.stepwise = stepwise

    def _post(self, path, body):
        data = json.dumps(body).encode("utf-8")
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            req = urllib.request.Request(self.url + path, data=data, method="POST",
                                         headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = resp.read()
            except urllib.error.HTTPError as exc:
                if exc.code < 500:
                    raise ProtocolError(f"{path}: HTTP {exc.code}") from exc
                last = TransportError(f"{path}: HTTP {exc.code}")
            except (urllib.error.URLError, OSError) as exc:
                last = TransportError(f"{path}: {exc}")
            else:
                try:
                    return json.loads(payload)
                except ValueError as exc:
                    raise ProtocolError(f"{path}: response is not JSON") from exc
            log.warning("%s (attempt %d of %d)", last, attempt + 1, self.retries + 1)
        raise last

    def _fetch(self, path, req):
        out = self._post(path, req.to_json())
        try:
            image = base64.b64decode(out["image_png_b64"], validate=True)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"{path}: missing or malformed image_png_b64") from exc
        _check_size(req, image, self.url + path)
        meta = {"backend": self.name, "steps": req.steps, "seed": req.seed}
        meta.update(out.get("metadata") or {})
        return GenResponse(image, meta)

    def fetch_front(self, req):
        if req.kind != "front":
            raise ValueError("fetch_front needs a front request")
        return self._fetch("/generate/front", req)

    def fetch_grid(self, req):
        if req.kind != "grid":
            raise ValueError("fetch_grid needs a grid request")
        return self._fetch("/generate/grid", req)

    def denoise_step(self, req):
        """Callable ``(z, t) -> latent`` for :func:`atlasforge.gridops.blended_denoise`."""
        base = req.to_json()

        def step(z, t):
            body = dict(base, t=int(t), latent_ctxb_b64=base64.b64encode(
                ctxb_dumps(np.asarray(z.data, dtype=np.float32))).decode("ascii"))
            out = self._post("/generate/grid/step", body)
            try:
                latent = ctxb_loads(base64.b64decode(out["latent_ctxb_b64"], validate=True))
            except (KeyError, TypeError, ValueError) as exc:
                raise ProtocolError("/generate/grid/step: missing or malformed latent") from exc
            if latent.shape != z.data.shape:
                raise ProtocolError(f"/generate/grid/step: latent {latent.shape}, expected {z.data.shape}")
            return np.asarray(latent, dtype=np.float64)

        return step


def make_backend(entry=None, base_dir="."):
    """Backend from a config entry; ``ATLASFORGE_BACKEND_URL`` overrides it.

    ``entry`` is ``{"kind": "fixture", "path": ...}`` or ``{"kind": "http",
    "url": ..., "timeout": ..., "retries": ..., "stepwise": ...}``.
    """
    entry = dict(entry or {})
    env = os.environ.get(BACKEND_ENV)
    if env:
        entry = {"kind": "http", "url": env, **{k: v for k, v in entry.items()
                                                if k in ("timeout", "retries", "stepwise")}}
    kind = entry.get("kind", "fixture")
    if kind == "fixture":
        if "path" not in entry:
            raise ValueError("fixture backend needs a path")
        return FixtureBackend(os.path.join(base_dir, entry["path"]))
    if kind == "http":
        return HttpBackend(entry["url"], timeout=entry.get("timeout", 60.0), retries=entry.get("retries", 3),
                           stepwise=entry.get("stepwise", False))
    raise ValueError(f"unknown backend kind {kind!r}")
