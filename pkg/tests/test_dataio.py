import json
import math

import numpy as np
import pytest
from PIL import Image
from plyfile import PlyData

from surfelgrid.core.errors import (
    CheckpointError,
    ChecksumError,
    DimensionMismatchError,
    MalformedFileError,
    MissingFileError,
    UnknownSceneError,
    VersionMismatchError,
)
from surfelgrid.services.checkpoint_service import (
    checkpoint_service,
    decode_checkpoint,
    encode_checkpoint,
    export_ply,
    import_ply,
    ply_attributes,
)
from surfelgrid.services.dataset_service import (
    Dataset,
    dataset_service,
    gen_toy_scene,
    load_nerf_synthetic,
    quantize,
    ray_cast,
    write_dataset,
)
from surfelgrid.services.render_service import render
from surfelgrid.services.train_service import init_state


def _write_split(root, frames, angle=math.pi / 2, split="train"):
    meta = {"camera_angle_x": angle, "frames": []}
    for i, (pixels, pose) in enumerate(frames):
        (root / split).mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels).save(root / split / f"r_{i}.png")
        meta["frames"].append({"file_path": f"./{split}/r_{i}", "transform_matrix": pose})
    (root / f"transforms_{split}.json").write_text(json.dumps(meta))


def _rgba(width, height, value=(255, 0, 0, 0)):
    return np.tile(np.array(value, dtype=np.uint8), (height, width, 1))


@pytest.fixture
def checkpoint(tiny_config):
    scene = gen_toy_scene("textured_quad", views=2, width=16, height=16, test_views=0, seed_points=64)
    return init_state(scene.train, tiny_config).to_checkpoint()


class TestNerfSyntheticLoader:
    def test_focal_from_field_of_view(self, tmp_path):
        _write_split(tmp_path, [(_rgba(800, 2), np.eye(4).tolist())])
        cam = load_nerf_synthetic(tmp_path).cameras[0]
        assert cam.fx == pytest.approx(400.0)
        assert (cam.cx, cam.cy) == (400.0, 1.0)

    def test_transparent_pixels_become_background(self, tmp_path):
        _write_split(tmp_path, [(_rgba(4, 4), np.eye(4).tolist())])
        data = load_nerf_synthetic(tmp_path)
        np.testing.assert_array_equal(data.images[0], np.ones((4, 4, 3), dtype=np.float32))
        assert data.images[0].dtype == np.float32

    def test_opengl_pose_is_converted(self, tmp_path):
        _write_split(tmp_path, [(_rgba(4, 4, (10, 20, 30, 255)), np.eye(4).tolist())])
        cam = load_nerf_synthetic(tmp_path).cameras[0]
        np.testing.assert_array_equal(cam.center, np.zeros(3))
        np.testing.assert_allclose(cam.rotation[:, 2], [0.0, 0.0, -1.0])
        _, dirs = cam.pixel_rays(np.array([1.5]), np.array([1.5]))
        np.testing.assert_allclose(dirs[0], [0.0, 0.0, -1.0], atol=1e-12)

    def test_missing_transforms(self, tmp_path):
        with pytest.raises(MissingFileError) as info:
            load_nerf_synthetic(tmp_path, "val")
        assert info.value.path == tmp_path / "transforms_val.json"

    def test_malformed_transforms(self, tmp_path):
        (tmp_path / "transforms_train.json").write_text("{not json")
        with pytest.raises(MalformedFileError) as info:
            load_nerf_synthetic(tmp_path)
        assert info.value.path == tmp_path / "transforms_train.json"
        (tmp_path / "transforms_train.json").write_text(json.dumps({"frames": []}))
        with pytest.raises(MalformedFileError):
            load_nerf_synthetic(tmp_path)

    def test_missing_image(self, tmp_path):
        _write_split(tmp_path, [(_rgba(4, 4), np.eye(4).tolist())])
        (tmp_path / "train" / "r_0.png").unlink()
        with pytest.raises(MissingFileError) as info:
            load_nerf_synthetic(tmp_path)
        assert "r_0" in str(info.value)

    def test_image_sizes_must_agree(self, tmp_path):
        _write_split(tmp_path, [(_rgba(4, 4), np.eye(4).tolist()), (_rgba(6, 4), np.eye(4).tolist())])
        with pytest.raises(DimensionMismatchError) as info:
            load_nerf_synthetic(tmp_path)
        assert info.value.path.name == "r_1.png"

    def test_dataset_checks_camera_image_pairs(self, make_camera):
        with pytest.raises(DimensionMismatchError):
            Dataset(cameras=[make_camera()], images=[])
        with pytest.raises(DimensionMismatchError):
            Dataset(cameras=[make_camera(16, 16)], images=[np.zeros((8, 8, 3), dtype=np.float32)])

    def test_missing_test_split_is_empty(self, tmp_path, caplog):
        _write_split(tmp_path, [(_rgba(4, 4), np.eye(4).tolist())])
        train, test = dataset_service.load(data_dir=tmp_path)
        assert len(train) == 1 and len(test) == 0
        assert "No test split" in caplog.text


class TestToyScenes:
    def test_head_on_view_of_the_quad(self):
        scene = gen_toy_scene("textured_quad")
        assert len(scene.train) == 6 and len(scene.test) == 2
        assert scene.train.image_size == (64, 64)
        centre = scene.quads[0].texture(np.array(0.0), np.array(0.0)).astype(np.float32)
        np.testing.assert_array_equal(scene.train.images[0][32, 32], centre)
        np.testing.assert_array_equal(scene.train.images[0][0, 0], [1.0, 1.0, 1.0])

    def test_front_plane_occludes_back_plane(self):
        quads = gen_toy_scene("two_planes", views=1, test_views=0).quads
        origins = np.array([[0.0, 0.0, 3.0], [0.9, 0.0, 3.0], [2.0, 0.0, 3.0]])
        dirs = np.tile([0.0, 0.0, -1.0], (3, 1))
        colour, t = ray_cast(quads, origins, dirs, (1.0, 1.0, 1.0))
        np.testing.assert_allclose(t[:2], [2.5, 3.5])
        assert t[2] == np.inf
        np.testing.assert_array_equal(colour[0], quads[0].texture(np.array(0.0), np.array(0.0)))
        np.testing.assert_array_equal(colour[2], [1.0, 1.0, 1.0])

    def test_cube_has_six_faces(self):
        scene = gen_toy_scene("cube", views=3, width=16, height=16, test_views=1)
        assert len(scene.quads) == 6
        assert scene.train.points.shape == (512, 3)
        assert np.all(np.abs(scene.train.points) < 0.6)

    def test_regeneration_is_identical(self):
        a = gen_toy_scene("two_planes", views=3, width=24, height=24, seed=4)
        b = gen_toy_scene("two_planes", views=3, width=24, height=24, seed=4)
        for x, y in zip(a.train.images + a.test.images, b.train.images + b.test.images):
            np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(a.train.points, b.train.points)

    def test_unknown_scene(self):
        with pytest.raises(UnknownSceneError):
            gen_toy_scene("teapot")

    def test_written_scene_loads_back(self, tmp_path):
        scene = gen_toy_scene("textured_quad", views=3, width=20, height=16, test_views=1)
        write_dataset(tmp_path, {"train": scene.train, "test": scene.test})
        train, test = dataset_service.load(data_dir=tmp_path)
        assert (len(train), len(test)) == (3, 1)
        for got, want in zip(train.images, scene.train.images):
            np.testing.assert_allclose(got, want, atol=0.5 / 255 + 1e-6)
        for got, want in zip(train.cameras, scene.train.cameras):
            np.testing.assert_allclose(got.pose, want.pose, atol=1e-12)
            assert got.fx == pytest.approx(want.fx)
        np.testing.assert_array_equal(train.points, scene.train.points)

    def test_quantize_rounds_to_nearest(self):
        np.testing.assert_array_equal(quantize(np.array([0.0, 0.5, 1.0, 1.7, -0.2])), [0, 128, 255, 255, 0])


class TestCheckpoint:
    def test_round_trip_is_byte_identical(self, checkpoint):
        data = encode_checkpoint(checkpoint)
        assert data[:4] == b"SGCK"
        again = decode_checkpoint(data)
        assert encode_checkpoint(again) == data
        assert again.config == checkpoint.config
        assert again.rng_state == checkpoint.rng_state

    def test_truncated(self, checkpoint):
        data = encode_checkpoint(checkpoint)
        with pytest.raises(ChecksumError):
            decode_checkpoint(data[:-10])
        with pytest.raises(ChecksumError):
            decode_checkpoint(data[:6])

    def test_flipped_byte(self, checkpoint):
        data = bytearray(encode_checkpoint(checkpoint))
        data[len(data) // 2] ^= 0x01
        with pytest.raises(ChecksumError):
            decode_checkpoint(bytes(data))

    def test_bad_magic(self, checkpoint):
        data = b"NOPE" + encode_checkpoint(checkpoint)[4:]
        with pytest.raises(CheckpointError) as info:
            decode_checkpoint(data)
        assert type(info.value) is CheckpointError

    def test_unknown_version(self, checkpoint):
        checkpoint.version = 99
        with pytest.raises(VersionMismatchError):
            decode_checkpoint(encode_checkpoint(checkpoint))

    def test_loaded_checkpoint_renders_identically(self, checkpoint, tmp_path, make_camera):
        path = checkpoint_service.save(checkpoint, tmp_path / "checkpoints" / "final.ckpt")
        loaded = checkpoint_service.load(path)
        camera = make_camera(24, 24)
        cfg = checkpoint.config.render
        before = render(checkpoint.cloud, checkpoint.grid, checkpoint.decoder, camera, cfg)
        after = render(loaded.cloud, loaded.grid, loaded.decoder, camera, cfg)
        np.testing.assert_array_equal(before.rgb, after.rgb)
        assert not list(tmp_path.glob("**/*.tmp"))

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            checkpoint_service.load(tmp_path / "missing.ckpt")

    def test_latest(self, checkpoint, tmp_path):
        assert checkpoint_service.latest(tmp_path) is None
        for it in (500, 1500, 1000):
            checkpoint_service.save(checkpoint, checkpoint_service.checkpoint_path(tmp_path, it))
        checkpoint_service.save(checkpoint, checkpoint_service.checkpoint_path(tmp_path))
        assert checkpoint_service.latest(tmp_path).name == "iter_001500.ckpt"


class TestPly:
    def test_header_lists_every_attribute(self, checkpoint, tmp_path):
        path = export_ply(checkpoint.cloud.take(np.arange(1)), tmp_path / "one.ply")
        vertex = PlyData.read(str(path))["vertex"]
        assert vertex.count == 1
        assert [p.name for p in vertex.properties] == ply_attributes(4)
        assert ply_attributes(2)[-3:] == ["beta", "f_0", "f_1"]

    def test_empty_cloud(self, checkpoint, tmp_path):
        path = export_ply(checkpoint.cloud.take(np.arange(0)), tmp_path / "empty.ply")
        cloud = import_ply(path)
        assert cloud.count == 0 and cloud.latent_dim == 4

    def test_binary_round_trip_is_exact(self, checkpoint, tmp_path):
        cloud = checkpoint.cloud
        back = import_ply(export_ply(cloud, tmp_path / "cloud.ply"))
        for name, array in cloud.arrays().items():
            np.testing.assert_array_equal(getattr(back, name), array, err_msg=name)

    def test_ascii_round_trip(self, checkpoint, tmp_path):
        cloud = checkpoint.cloud
        path = export_ply(cloud, tmp_path / "cloud.ply", text=True)
        assert path.read_bytes().startswith(b"ply\nformat ascii")
        back = import_ply(path)
        for name, array in cloud.arrays().items():
            np.testing.assert_allclose(getattr(back, name), array, rtol=1e-6, atol=1e-9, err_msg=name)
