import base64
import json
import shutil
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from atlasforge.fileio import ctxb_dumps, ctxb_loads, png_bytes, png_size, read_png
from atlasforge.genclient import BACKEND_ENV
from atlasforge.gridops import decode_latent, encode_latent
from atlasforge.masks import upsample_mask
from atlasforge.geometry import card
from atlasforge.pipeline import STAGES, PipelineError, RunConfig, render_previews, run_pipeline, stages_from
from atlasforge.raster import TextureAtlas

FIXTURE = Path(__file__).resolve().parents[1] / "fixtures" / "quadcard"
RED = np.array([0.8, 0.2, 0.2])
BLUE = np.array([0.2, 0.3, 0.9])


def copy_case(dst):
    shutil.copytree(FIXTURE, dst)
    return dst / "run.json"


def load(path, **overrides):
    cfg = RunConfig.from_json(path)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    case = tmp_path_factory.mktemp("case") / "quadcard"
    cfg = load(copy_case(case))
    manifest = run_pipeline(cfg)
    return cfg, Path(cfg.out), manifest


def interiors(atlas):
    # atlas row 0 is v=1; the card's front occupies u in [.02, .48], the back u in [.52, .98]
    r = atlas.shape[0]
    rows = slice(r // 4, 3 * r // 4)
    return atlas[rows, r // 8:3 * r // 8], atlas[rows, 5 * r // 8:7 * r // 8]


def test_full_run_colors(full_run):
    _, out, _ = full_run
    front, back = interiors(read_png(out / "atlas.png"))
    assert np.abs(front - RED).max() < 2 / 255
    assert np.abs(back - BLUE).max() < 2 / 255


def test_phase1_leaves_back_untouched(full_run):
    _, out, _ = full_run
    front, back = interiors(read_png(out / "phase1" / "atlas.png"))
    assert np.abs(front - RED).max() < 2 / 255
    assert np.abs(back - 0.5).max() < 2 / 255


def test_manifest_contents(full_run):
    cfg, out, manifest = full_run
    assert list(manifest["stages"]) == list(STAGES)
    assert manifest["status"] == "complete"
    assert manifest["config"]["atlas_resolution"] == 64
    on_disk = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()} - {"manifest.json"}
    assert set(manifest["files"]) == on_disk
    for name in ("N.png", "atlas.png", "coverage.png", "coverage.ctxb", "report.json", "grids/depth_grid.png",
                 "grids/mask_grid.png", "front/depth_0.png", "split/view_6.png"):
        assert len(manifest["files"][name]) == 64
    assert json.loads((out / "manifest.json").read_text()) == manifest


def test_default_previews(full_run):
    _, out, _ = full_run
    names = sorted(p.name for p in (out / "previews").iterdir())
    assert names == ["preview_az+0.png", "preview_az+120.png", "preview_az-120.png"]
    front = read_png(out / "previews" / "preview_az+0.png")
    assert np.abs(front[64, 64] - RED).max() < 2 / 255


def test_deterministic(full_run, tmp_path):
    _, out, manifest = full_run
    cfg = load(copy_case(tmp_path / "again"))
    again = run_pipeline(cfg)
    assert again["files"] == manifest["files"]
    assert (Path(cfg.out) / "atlas.png").read_bytes() == (out / "atlas.png").read_bytes()


def test_resumable_stages(full_run, tmp_path):
    _, _, manifest = full_run
    cfg = load(copy_case(tmp_path / "resume"))
    run_pipeline(cfg, ["metatex", "front", "phase1"])
    run_pipeline(cfg, ["views"])
    resumed = run_pipeline(cfg, stages_from("grids"))
    assert resumed["files"] == manifest["files"]
    assert list(resumed["stages"]) == list(STAGES)


def test_metatex_only(tmp_path):
    cfg = load(copy_case(tmp_path / "mt"), stages=["metatex"])
    run_pipeline(cfg)
    assert sorted(p.name for p in Path(cfg.out).iterdir()) == ["N.png", "manifest.json"]


def test_missing_input_fails_with_manifest(tmp_path):
    cfg = load(copy_case(tmp_path / "bad"))
    with pytest.raises(PipelineError, match="missing artifact"):
        run_pipeline(cfg, ["phase2"])
    m = json.loads((Path(cfg.out) / "manifest.json").read_text())
    assert m["status"] == "failed" and m["error"]["stage"] == "phase2"


def test_backend_failure_recorded(tmp_path):
    path = copy_case(tmp_path / "nofront")
    (path.parent / "front.png").unlink()
    cfg = load(path)
    with pytest.raises(Exception, match="fixture file missing"):
        run_pipeline(cfg)
    m = json.loads((Path(cfg.out) / "manifest.json").read_text())
    assert m["error"]["stage"] == "front" and list(m["stages"]) == ["metatex"]


def test_freeze_front_keeps_phase1(tmp_path):
    cfg = load(copy_case(tmp_path / "frozen"), freeze_front=True)
    run_pipeline(cfg)
    out = Path(cfg.out)
    p1, p2 = read_png(out / "phase1" / "atlas.png"), read_png(out / "atlas.png")
    front1, _ = interiors(p1)
    front2, back2 = interiors(p2)
    np.testing.assert_array_equal(front1, front2)
    assert np.abs(back2 - BLUE).max() < 2 / 255


def test_keep_refine_generate_mode(tmp_path):
    cfg = load(copy_case(tmp_path / "krg"), mask_mode="keep-refine-generate")
    run_pipeline(cfg)
    front, back = interiors(read_png(Path(cfg.out) / "atlas.png"))
    assert np.abs(front - RED).max() < 2 / 255
    assert np.abs(back - BLUE).max() < 2 / 255


def test_render_previews_angles():
    mesh, atlas = card(), TextureAtlas(np.full((8, 8, 3), 0.25))
    assert len(render_previews(mesh, atlas, image_size=32)) == 3
    imgs = render_previews(mesh, atlas, [0, 90, 180, 270], image_size=32)
    assert len(imgs) == 4 and all(i.shape == (32, 32, 3) for i in imgs)
    assert render_previews(mesh, atlas, [], image_size=32) == []


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        RunConfig(mesh="builtin:card", output_dir="x", stages=["paint"])
    with pytest.raises(ValueError):
        RunConfig(mesh="builtin:card", output_dir="x", render_resolution=100)
    with pytest.raises(ValueError):
        RunConfig(mesh="builtin:card", output_dir="x", mask_mode="all")
    cfg = load(copy_case(tmp_path / "c"))
    assert RunConfig.from_dict(cfg.to_dict(), cfg.base_dir) == cfg


class ColorStub(BaseHTTPRequestHandler):
    """Answers front requests in red, grid requests in blue and steps with noise."""

    def log_message(self, *args):
        pass

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        h, w = png_size(base64.b64decode(body["depth_png_b64"]))
        if self.path == "/generate/grid/step":
            z = ctxb_loads(base64.b64decode(body["latent_ctxb_b64"]))
            out = np.random.default_rng(body["t"]).standard_normal(z.shape).astype(np.float32)
            payload = {"latent_ctxb_b64": base64.b64encode(ctxb_dumps(out)).decode()}
        else:
            color = RED if self.path == "/generate/front" else BLUE
            img = png_bytes(np.broadcast_to(color, (h, w, 3)))
            payload = {"image_png_b64": base64.b64encode(img).decode()}
        data = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


@pytest.fixture
def color_server(monkeypatch):
    srv = ThreadingHTTPServer(("127.0.0.1", 0), ColorStub)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    monkeypatch.setenv(BACKEND_ENV, f"http://127.0.0.1:{srv.server_address[1]}")
    yield
    srv.shutdown()
    srv.server_close()


def test_http_backend_posthoc(color_server, tmp_path):
    cfg = load(copy_case(tmp_path / "http"))
    manifest = run_pipeline(cfg)
    assert manifest["stages"]["generate"]["info"]["blending"] == "image-posthoc"
    front, back = interiors(read_png(Path(cfg.out) / "atlas.png"))
    assert np.abs(front - RED).max() < 2 / 255
    assert np.abs(back - BLUE).max() < 2 / 255


def test_http_backend_stepwise_pins_render(color_server, tmp_path):
    cfg = load(copy_case(tmp_path / "step"), backend={"kind": "http", "stepwise": True})
    manifest = run_pipeline(cfg, ["metatex", "front", "phase1", "views", "grids", "generate"])
    assert manifest["stages"]["generate"]["info"]["blending"] == "latent-stepwise"
    out = Path(cfg.out)
    m_lat = read_png(out / "grids" / "mask_grid_latent.png") > 0.5
    assert 0 < m_lat.mean() < 1
    render = read_png(out / "grids" / "render_grid.png")
    pinned = upsample_mask(ndimage.binary_erosion(~m_lat, np.ones((3, 3)), border_value=1), 8)
    want = np.clip(decode_latent(encode_latent(render)), 0, 1)
    got = read_png(out / "generate" / "grid.png")
    assert pinned.any()
    assert np.abs(got - want)[pinned].max() <= 1 / 255
