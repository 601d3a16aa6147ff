import numpy as np
import pytest

from app.engine import meshes
from app.engine.geometry import CameraIntrinsics, Pose
from app.engine.render import ChannelStack, Scene, SceneInstance, assemble_channels, render_scene
from app.schemas.experiment import BackgroundSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_camera():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=32.0, cy=24.0, width=64, height=48)


@pytest.fixture(scope="session")
def box_mesh():
    return meshes.box()


@pytest.fixture(scope="session")
def cylinder_mesh():
    return meshes.cylinder()


@pytest.fixture(scope="session")
def square_mesh():
    return meshes.square()


@pytest.fixture
def box_scene(small_camera, box_mesh):
    pose = Pose.about_axis("xy", [30.0, 20.0], (0.0, 0.0, 0.6))
    return Scene(small_camera, [SceneInstance(box_mesh, pose)], BackgroundSpec(plane_depth=1.2))


@pytest.fixture
def box_render(box_scene):
    return render_scene(box_scene)


@pytest.fixture
def stack_factory():
    """Build a ChannelStack from depth (+ optional validity, instance ids, abc)."""

    def build(depth, valid=None, instance_id=None, abc=None, camera=None, support=None):
        depth = np.asarray(depth, dtype=np.float64)
        height, width = depth.shape
        valid = depth > 0 if valid is None else np.asarray(valid, dtype=bool)
        depth = np.where(valid, depth, 0.0)
        instance_id = np.zeros((height, width), dtype=np.int32) if instance_id is None else instance_id
        abc = np.zeros((height, width, 3)) if abc is None else abc
        camera = camera or CameraIntrinsics(fx=50.0, fy=50.0, cx=width / 2.0, cy=height / 2.0,
                                            width=width, height=height)
        stack = ChannelStack(
            camera=camera,
            rgb=np.zeros((height, width, 3)),
            depth=depth,
            valid=valid,
            plain_uv=np.zeros((height, width, 2)),
            xy=np.zeros((height, width, 2)),
            nrm=np.zeros((height, width, 3)),
            pe=np.zeros((height, width, 2)),
            instance_id=instance_id,
            abc=abc,
            face_index=np.where(np.asarray(instance_id) > 0, 0, -1),
            support=np.ones((height, width), dtype=bool) if support is None else support,
        )
        return assemble_channels(stack)

    return build
