from .scene import GaussianScene, SceneInit, build_scene, load_scene, save_scene
from .render import RasterConfig, RenderOutput, render, render_with_cache
from .backward import SceneGrads, render_backward

__all__ = [
    "GaussianScene",
    "SceneInit",
    "build_scene",
    "load_scene",
    "save_scene",
    "RasterConfig",
    "RenderOutput",
    "render",
    "render_with_cache",
    "SceneGrads",
    "render_backward",
]
