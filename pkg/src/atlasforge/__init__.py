"""Multi-view texture atlas reconstruction for triangle meshes."""

from .geometry import (CameraConfig, Mesh, MeshError, ObjParseError, Viewpoint, box, canonical_viewpoints,
                       card, face_znormals, icosphere, load_mesh, quad, uv_sphere)
from .raster import RenderBuffers, TextureAtlas, rasterize_buffers, render_textured, sample_atlas, splat_values
from .metatex import learn_max_znormals, oracle_max_znormals, view_weights
from .masks import binary_face_view_masks, keep_refine_generate, new_region_mask
from .gridops import GridLayout, NoiseSchedule, assemble_grid, split_grid
from .projectback import ProjectBackOptions, ProjectBackProblem, ViewTarget, project_back

__version__ = "0.1.0"

__all__ = [
    "CameraConfig", "Mesh", "MeshError", "ObjParseError", "Viewpoint", "box", "canonical_viewpoints", "card",
    "face_znormals", "icosphere", "load_mesh", "quad", "uv_sphere",
    "RenderBuffers", "TextureAtlas", "rasterize_buffers", "render_textured", "sample_atlas", "splat_values",
    "learn_max_znormals", "oracle_max_znormals", "view_weights",
    "binary_face_view_masks", "keep_refine_generate", "new_region_mask",
    "GridLayout", "NoiseSchedule", "assemble_grid", "split_grid",
    "ProjectBackOptions", "ProjectBackProblem", "ViewTarget", "project_back",
]
