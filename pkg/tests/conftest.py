import pytest

from splatstab.synth import (
    JitterSpec,
    MovingObjectSpec,
    PathSpec,
    SceneSpec,
    SyntheticScene,
)


def small_static_spec(**overrides) -> SceneSpec:
    base = dict(
        width=64,
        height=64,
        frame_count=6,
        flow_radius=2,
        n_points=60,
        jitter=JitterSpec(sigma_t=0.01, sigma_r_deg=0.3, seed=1),
    )
    base.update(overrides)
    return SceneSpec(**base)


def small_dynamic_spec(**overrides) -> SceneSpec:
    return small_static_spec(moving=MovingObjectSpec(), **overrides)


@pytest.fixture(scope="session")
def static_scene() -> SyntheticScene:
    return SyntheticScene(small_static_spec())


@pytest.fixture(scope="session")
def static_bundle(static_scene):
    return static_scene.generate()


@pytest.fixture(scope="session")
def dynamic_scene() -> SyntheticScene:
    return SyntheticScene(small_dynamic_spec())


@pytest.fixture(scope="session")
def dynamic_bundle(dynamic_scene):
    return dynamic_scene.generate()


@pytest.fixture(scope="session")
def panning_bundle():
    spec = small_static_spec(
        frame_count=8,
        path=PathSpec(velocity=(0.45, 0.0, 0.0)),
        jitter=JitterSpec(sigma_t=0.004, sigma_r_deg=0.1, seed=3),
    )
    return SyntheticScene(spec).generate()
