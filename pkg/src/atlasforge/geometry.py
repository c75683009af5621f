"""Mesh loading, procedural test shapes, and the seven-viewpoint camera model."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class MeshError(ValueError):
    """Raised for meshes that cannot be used for texturing."""


class ObjParseError(OSError):
    """Unreadable or malformed OBJ file; carries the offending line number."""

    def __init__(self, path, lineno, message):
        self.path = path
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


def _readonly(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Indexed triangle mesh with per-corner UV indices.

    ``faces[f, k]`` indexes ``vertices`` and ``face_uvs[f, k]`` indexes ``uvs``
    for corner ``k`` of face ``f``. Arrays are read-only after construction.
    """

    vertices: np.ndarray
    uvs: np.ndarray
    faces: np.ndarray
    face_uvs: np.ndarray
    face_normals: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "vertices", _readonly(self.vertices, np.float64).reshape(-1, 3))
        object.__setattr__(self, "uvs", _readonly(self.uvs, np.float64).reshape(-1, 2))
        object.__setattr__(self, "faces", _readonly(self.faces, np.int64).reshape(-1, 3))
        object.__setattr__(self, "face_uvs", _readonly(self.face_uvs, np.int64).reshape(-1, 3))
        if len(self.uvs) == 0 or self.face_uvs.shape != self.faces.shape:
            raise MeshError("mesh not texture-mappable")
        nv, nt = len(self.vertices), len(self.uvs)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= nv):
            raise MeshError("face position index out of range")
        if self.face_uvs.size and (self.face_uvs.min() < 0 or self.face_uvs.max() >= nt):
            raise MeshError("face uv index out of range")
        object.__setattr__(self, "face_normals", _readonly(compute_face_normals(self.vertices, self.faces), np.float64))

    @property
    def n_faces(self):
        return len(self.faces)

    def corner_positions(self):
        """(F, 3, 3) array of triangle corner positions."""
        return self.vertices[self.faces]

    def corner_uvs(self):
        """(F, 3, 2) array of triangle corner UVs."""
        return self.uvs[self.face_uvs]

    def flipped(self):
        """Same surface with every face winding reversed."""
        return Mesh(self.vertices, self.uvs, self.faces[:, ::-1], self.face_uvs[:, ::-1])

    def transformed(self, scale=1.0, offset=(0.0, 0.0, 0.0)):
        return Mesh(self.vertices * scale + np.asarray(offset, dtype=np.float64), self.uvs, self.faces, self.face_uvs)


def compute_face_normals(vertices, faces):
    """Unit normals by cross product, counter-clockwise winding is front.

    Degenerate faces get a zero normal. The symmetric form a×b + b×c + c×a
    makes reversing the winding negate the normal bit-exactly.
    """
    tri = vertices[faces]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    n = (np.cross(a, b) + np.cross(b, c)) + np.cross(c, a)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    out = np.zeros_like(n)
    ok = norm[:, 0] > 0
    out[ok] = n[ok] / norm[ok]
    return out


def normalize_mesh(mesh):
    """Center at the origin and scale so the bounding sphere has radius 1.

    The center is the midpoint of the axis-aligned bounding box and the radius
    is the largest vertex distance from it, so re-normalizing is a no-op.
    """
    v = mesh.vertices
    if len(v) == 0:
        return mesh
    center = 0.5 * (v.min(axis=0) + v.max(axis=0))
    radius = np.linalg.norm(v - center, axis=1).max()
    if radius == 0:
        raise MeshError("mesh has zero extent")
    return Mesh((v - center) / radius, mesh.uvs, mesh.faces, mesh.face_uvs)


def _parse_index(tok, count, path, lineno):
    i = int(tok)
    i = i - 1 if i > 0 else count + i
    if not 0 <= i < count:
        raise ObjParseError(path, lineno, f"index {tok} out of range")
    return i


def parse_obj(path):
    """Parse positions, UVs and faces of a Wavefront OBJ without normalizing.

    Polygons with more than three corners are fan-triangulated. Returns a
    :class:`Mesh` or raises :class:`MeshError` if any face lacks UVs.
    """
    verts, uvs, faces, face_uvs = [], [], [], []
    missing_uv = False
    try:
        fh = open(path, "r", encoding="utf-8", errors="replace")
    except OSError as exc:
        raise ObjParseError(path, 0, str(exc)) from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks or toks[0].startswith("#"):
                continue
            try:
                if toks[0] == "v":
                    verts.append([float(t) for t in toks[1:4]])
                    if len(verts[-1]) != 3:
                        raise ValueError("vertex needs 3 coordinates")
                elif toks[0] == "vt":
                    uv = [float(t) for t in toks[1:3]]
                    if len(uv) == 1:
                        uv.append(0.0)
                    uvs.append(uv)
                elif toks[0] == "f":
                    corners = []
                    for c in toks[1:]:
                        parts = c.split("/")
                        vi = _parse_index(parts[0], len(verts), path, lineno)
                        if len(parts) > 1 and parts[1]:
                            ti = _parse_index(parts[1], len(uvs), path, lineno)
                        else:
                            ti = -1
                            missing_uv = True
                        corners.append((vi, ti))
                    if len(corners) < 3:
                        raise ValueError("face needs at least 3 corners")
                    for k in range(1, len(corners) - 1):
                        tri = (corners[0], corners[k], corners[k + 1])
                        faces.append([c[0] for c in tri])
                        face_uvs.append([c[1] for c in tri])
            except ObjParseError:
                raise
            except ValueError as exc:
                raise ObjParseError(path, lineno, str(exc)) from exc
    if not faces:
        raise ObjParseError(path, 0, "no faces")
    if missing_uv or not uvs:
        raise MeshError("mesh not texture-mappable")
    return Mesh(np.array(verts), np.array(uvs), np.array(faces), np.array(face_uvs))


def load_mesh(path):
    """Read an OBJ file and return it normalized to the unit bounding sphere."""
    return normalize_mesh(parse_obj(path))


def save_obj(mesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in mesh.uvs:
            fh.write(f"vt {t[0]:.17g} {t[1]:.17g}\n")
        for f, t in zip(mesh.faces, mesh.face_uvs):
            fh.write("f " + " ".join(f"{a + 1}/{b + 1}" for a, b in zip(f, t)) + "\n")


# -- procedural shapes ---------------------------------------------------------

def quad(size=1.0):
    """Unit square in the XY plane facing +Z, UVs spanning [0,1]²."""
    h = size / 2
    v = [[-h, -h, 0], [h, -h, 0], [h, h, 0], [-h, h, 0]]
    t = [[0, 0], [1, 0], [1, 1], [0, 1]]
    f = [[0, 1, 2], [0, 2, 3]]
    return Mesh(np.array(v, float), np.array(t, float), f, f)


def card(width=1.0, height=1.0):
    """Two-sided flat card in the XY plane.

    The front (+Z) side maps to the left half of the atlas, the back (-Z)
    side to the right half. Both sides share positions and differ by winding.
    """
    w, h = width / 2, height / 2
    v = [[-w, -h, 0], [w, -h, 0], [w, h, 0], [-w, h, 0]]
    # front uses u in [0, 0.5]; back is seen mirrored, so u runs right to left
    t = [[0.02, 0.02], [0.48, 0.02], [0.48, 0.98], [0.02, 0.98],
         [0.98, 0.02], [0.52, 0.02], [0.52, 0.98], [0.98, 0.98]]
    f = [[0, 1, 2], [0, 2, 3], [0, 2, 1], [0, 3, 2]]
    ft = [[0, 1, 2], [0, 2, 3], [4, 6, 5], [4, 7, 6]]
    return Mesh(np.array(v, float), np.array(t, float), f, ft)


def uv_sphere(n_lon=32, n_lat=16, radius=1.0):
    """Latitude/longitude sphere with an equirectangular UV layout.

    ``u`` increases with azimuth atan2(x, z); ``v`` is 1 at the north pole
    (+Y). The seam column is duplicated in UV space and every pole triangle
    gets its own pole UV at the middle of its column. 32×16 gives 960 faces.
    """
    verts = [[0.0, radius, 0.0]]
    for i in range(1, n_lat):
        theta = math.pi * i / n_lat
        for j in range(n_lon):
            phi = 2 * math.pi * j / n_lon
            verts.append([radius * math.sin(theta) * math.sin(phi), radius * math.cos(theta),
                          radius * math.sin(theta) * math.cos(phi)])
    verts.append([0.0, -radius, 0.0])
    south = len(verts) - 1

    def vid(i, j):
        if i == 0:
            return 0
        if i == n_lat:
            return south
        return 1 + (i - 1) * n_lon + (j % n_lon)

    uvs = [[j / n_lon, 1 - i / n_lat] for i in range(n_lat + 1) for j in range(n_lon + 1)]

    def tid(i, j):
        return i * (n_lon + 1) + j

    faces, face_uvs = [], []
    for i in range(n_lat):
        for j in range(n_lon):
            # a b c d = top-left, bottom-left, bottom-right, top-right seen from outside
            a, b, c, d = (i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)
            if i == 0:
                uvs.append([(j + 0.5) / n_lon, 1.0])
                faces.append([vid(*a), vid(*b), vid(*c)])
                face_uvs.append([len(uvs) - 1, tid(*b), tid(*c)])
            elif i == n_lat - 1:
                uvs.append([(j + 0.5) / n_lon, 0.0])
                faces.append([vid(*a), vid(*b), vid(*d)])
                face_uvs.append([tid(*a), len(uvs) - 1, tid(*d)])
            else:
                faces += [[vid(*a), vid(*b), vid(*c)], [vid(*a), vid(*c), vid(*d)]]
                face_uvs += [[tid(*a), tid(*b), tid(*c)], [tid(*a), tid(*c), tid(*d)]]
    return Mesh(np.array(verts), np.array(uvs), np.array(faces), np.array(face_uvs))


def box(half=0.5, gutter=0.02):
    """Axis-aligned cube with each face on its own chart of a 3×2 UV atlas.

    Face order: +X, -X, +Y, -Y, +Z, -Z (two triangles each). Charts are inset
    by ``gutter`` so bilinear lookups never straddle charts.
    """
    normals = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    verts, uvs, faces, face_uvs = [], [], [], []
    for k, n in enumerate(normals):
        n = np.array(n, float)
        # tangent frame (t, b) with t x b = n
        up = np.array([0, 1, 0], float) if abs(n[1]) < 0.5 else np.array([0, 0, -1], float) * n[1]
        t = np.cross(up, n)
        b = np.cross(n, t)
        base = len(verts)
        for s, r in [(-1, -1), (1, -1), (1, 1), (-1, 1)]:
            verts.append(half * (n + s * t + r * b))
        col, row = k % 3, k // 3
        u0, v0 = col / 3 + gutter, 1 - (row + 1) / 2 + gutter
        u1, v1 = (col + 1) / 3 - gutter, 1 - row / 2 - gutter
        tb = len(uvs)
        uvs += [[u0, v0], [u1, v0], [u1, v1], [u0, v1]]
        faces += [[base, base + 1, base + 2], [base, base + 2, base + 3]]
        face_uvs += [[tb, tb + 1, tb + 2], [tb, tb + 2, tb + 3]]
    return Mesh(np.array(verts), np.array(uvs), faces, face_uvs)


def icosphere(subdivisions=2):
    """Subdivided icosahedron on the unit sphere with spherical per-vertex UVs."""
    p = (1 + 5 ** 0.5) / 2
    v = [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0], [0, -1, p], [0, 1, p],
         [0, -1, -p], [0, 1, -p], [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(x, float) / np.linalg.norm(x) for x in v]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    verts = np.array(verts)
    u = 0.5 + np.arctan2(verts[:, 0], verts[:, 2]) / (2 * np.pi)
    vv = 0.5 + np.arcsin(np.clip(verts[:, 1], -1, 1)) / np.pi
    return Mesh(verts, np.stack([u, vv], 1), f, f)


# -- cameras -------------------------------------------------------------------

DEFAULT_AZIMUTHS = (30.0, 90.0, 150.0, 210.0, 270.0, 330.0)
DEFAULT_ELEVATIONS = (30.0, -20.0, 30.0, -20.0, 30.0, -20.0)


@dataclass(frozen=True)
class Viewpoint:
    id: int
    azimuth: float
    elevation: float
    radius: float = 2.7
    fov: float = 49.1
    near: float = 0.1
    far: float = 10.0
    image_size: int = 512

    def __post_init__(self):
        if self.image_size <= 0:
            raise ValueError("image_size must be positive")
        if not self.near < self.far:
            raise ValueError("near must be smaller than far")
        if not 0 < self.fov < 180:
            raise ValueError("fov must lie in (0, 180)")
        if self.id == 0 and (self.azimuth != 0 or self.elevation != 0):
            raise ValueError("viewpoint 0 is the front view (azimuth 0, elevation 0)")

    @property
    def eye(self):
        az, el = math.radians(self.azimuth), math.radians(self.elevation)
        return self.radius * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])

    def with_size(self, image_size):
        return Viewpoint(self.id, self.azimuth, self.elevation, self.radius, self.fov, self.near, self.far, image_size)


@dataclass
class CameraConfig:
    """Camera rig shared by the seven canonical views.

    Loaded from JSON with keys radius, fov_deg, image_size, azimuths, elevations
    (near and far are optional).
    """

    radius: float = 2.7
    fov_deg: float = 49.1
    image_size: int = 512
    azimuths: Sequence[float] = DEFAULT_AZIMUTHS
    elevations: Sequence[float] = DEFAULT_ELEVATIONS
    near: float = 0.1
    far: float = 10.0

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in ("radius", "fov_deg", "image_size", "azimuths", "elevations", "near", "far") if k in d}
        cfg = cls(**known)
        if len(cfg.azimuths) != 6 or len(cfg.elevations) != 6:
            raise ValueError("azimuths and elevations need exactly six entries")
        return cfg

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def canonical_viewpoints(config=None):
    """Front view v0 followed by the six generator poses v1..v6."""
    config = config or CameraConfig()
    kw = dict(radius=config.radius, fov=config.fov_deg, near=config.near, far=config.far,
              image_size=config.image_size)
    views = [Viewpoint(0, 0.0, 0.0, **kw)]
    for i, (az, el) in enumerate(zip(config.azimuths, config.elevations), 1):
        views.append(Viewpoint(i, float(az), float(el), **kw))
    return views


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)):
    """World-to-camera transform; the camera looks down its -Z axis."""
    eye = np.asarray(eye, float)
    f = np.asarray(target, float) - eye
    f /= np.linalg.norm(f)
    s = np.cross(f, np.asarray(up, float))
    ns = np.linalg.norm(s)
    if ns < 1e-9:
        raise ValueError("degenerate up vector: view direction is parallel to +Y")
    s /= ns
    u = np.cross(s, f)
    m = np.eye(4)
    m[0, :3], m[1, :3], m[2, :3] = s, u, -f
    m[:3, 3] = -m[:3, :3] @ eye
    return m


def view_matrix(v):
    return look_at(v.eye)


def projection_matrix(v):
    """OpenGL-style perspective projection (clip w = view-space depth)."""
    t = 1.0 / math.tan(math.radians(v.fov) / 2)
    n, f = v.near, v.far
    return np.array([
        [t, 0, 0, 0],
        [0, t, 0, 0],
        [0, 0, (f + n) / (n - f), 2 * f * n / (n - f)],
        [0, 0, -1, 0],
    ])


def mvp_matrix(v):
    return projection_matrix(v) @ view_matrix(v)


def face_znormals(mesh, views):
    """(V, F) camera-space z-component of every face normal in every view."""
    out = np.empty((len(views), mesh.n_faces))
    for i, v in enumerate(views):
        out[i] = mesh.face_normals @ view_matrix(v)[2, :3]
    return out
