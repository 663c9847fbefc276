import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from dynsurf.cameras import Intrinsics, RigidPose, look_at, project
from dynsurf.dataio import (
    Dataset,
    Frame,
    LoadError,
    SyntheticScene,
    SyntheticSceneSpec,
    backproject,
    load_dataset,
    preprocess,
    save_dataset,
    synth_generate,
)


@pytest.fixture(scope="module")
def small():
    return synth_generate(SyntheticSceneSpec(n_frames=3, width=24, height=20, translate_amplitude=0.1),
                          None, with_meshes=False)


def test_center_pixel_depth():
    spec = SyntheticSceneSpec(width=65, height=65, orbit_polar_deg=90.0, albedo="constant")
    f = SyntheticScene(spec).frame(0)
    assert f.depth[32, 32] == pytest.approx(1.5, abs=1e-6)


def test_silhouette_area():
    spec = SyntheticSceneSpec(width=128, height=128)
    f = SyntheticScene(spec).frame(0)
    intr = Intrinsics.from_fov(spec.fov_deg, 128, 128)
    # silhouette cone half-angle asin(r / d); its image is a disc of radius f tan(angle)
    radius_px = intr.fx * math.tan(math.asin(spec.radius / spec.orbit_radius))
    assert f.mask.sum() == pytest.approx(math.pi * radius_px**2, rel=0.01)


@pytest.mark.parametrize("t", [1, 4, 7])
def test_translation_equivariance(t):
    scene = SyntheticScene(SyntheticSceneSpec(width=32, height=32, n_frames=10, translate_amplitude=0.2))
    intr = scene.intrinsics()
    pose = scene.camera(0)
    _, d_t, m_t = scene.render(t, intr, pose)
    b = scene.transform(t)[2]
    shifted = RigidPose(pose.rotation, pose.translation - b)
    _, d_0, m_0 = scene.render(0, intr, shifted)
    assert np.array_equal(m_t, m_0)
    assert np.max(np.abs(d_t - d_0)) < 1e-6


@pytest.mark.parametrize("primitive", ["sphere", "box", "capsule", "union"])
def test_backprojection_on_surface(primitive):
    spec = SyntheticSceneSpec(primitive=primitive, width=32, height=32, n_frames=6, translate_amplitude=0.1,
                              rotate_amplitude=0.3, scale_amplitude=0.1)
    scene = SyntheticScene(spec)
    for t in (0, 2):
        f = scene.frame(t)
        pts = backproject(f)
        assert len(pts) > 20
        assert np.max(np.abs(scene.sdf(pts, t))) < 1e-3


def test_motion_closed_form():
    scene = SyntheticScene(SyntheticSceneSpec(n_frames=20, translate_amplitude=0.2, rotate_amplitude=0.5,
                                              scale_amplitude=0.1))
    assert np.allclose(scene.transform(5)[2], [0.2, 0.0, 0.0])
    x = np.random.default_rng(0).normal(size=(10, 3))
    assert np.allclose(scene.to_world(scene.to_canonical(x, 3), 3), x, atol=1e-12)
    s, rot, b = scene.transform(0)
    assert s == 1.0 and np.allclose(rot, np.eye(3)) and not b.any()


def test_spec_dict_round_trip():
    spec = SyntheticSceneSpec(primitive="box", translate_axis=(0.0, 1.0, 0.0))
    assert SyntheticSceneSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    with pytest.raises(ValueError):
        SyntheticSceneSpec.from_dict({"colour": 1})
    with pytest.raises(ValueError):
        SyntheticSceneSpec(primitive="torus")


class TestFormat:
    def test_round_trip(self, small, tmp_path):
        ds = small.dataset
        save_dataset(ds, tmp_path)
        loaded = load_dataset(tmp_path)
        assert len(loaded) == len(ds) and loaded.depth_scale == ds.depth_scale
        for a, b in zip(ds.frames, loaded.frames):
            assert b.index == a.index
            assert np.array_equal(b.rgb, np.round(a.rgb * 255) / 255)
            assert np.array_equal(b.depth, np.round(a.depth * 1000) / 1000)
            assert np.array_equal(b.mask, a.mask)
            assert np.array_equal(b.pose.matrix(), a.pose.matrix())
            assert b.intrinsics == a.intrinsics

    def test_files_written(self, small, tmp_path):
        save_dataset(small.dataset, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["frames"][1]["depth"] == "depth_0001.png"
        assert len(manifest["frames"][0]["pose"]) == 12
        with Image.open(tmp_path / "depth_0000.png") as im:
            assert np.array(im).dtype == np.uint16
        with Image.open(tmp_path / "mask_0002.png") as im:
            assert set(np.unique(np.array(im))) <= {0, 255}

    def test_corrupt_depth_names_frame(self, small, tmp_path):
        save_dataset(small.dataset, tmp_path)
        (tmp_path / "depth_0002.png").write_bytes(b"not a png")
        with pytest.raises(LoadError, match="frame 2") as err:
            load_dataset(tmp_path)
        assert err.value.frame == 2

    def test_missing_mask(self, small, tmp_path):
        save_dataset(small.dataset, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        for entry in manifest["frames"]:
            del entry["mask"]
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(LoadError, match="mask"):
            load_dataset(tmp_path)

    def test_missing_file(self, small, tmp_path):
        save_dataset(small.dataset, tmp_path)
        (tmp_path / "mask_0001.png").unlink()
        with pytest.raises(LoadError, match="frame 1"):
            load_dataset(tmp_path)

    def test_dimension_mismatch(self, small, tmp_path):
        save_dataset(small.dataset, tmp_path)
        Image.fromarray(np.zeros((5, 5), dtype=np.uint8)).save(tmp_path / "mask_0000.png")
        with pytest.raises(LoadError, match="frame 0"):
            load_dataset(tmp_path)

    def test_non_orthonormal_pose(self, small, tmp_path):
        save_dataset(small.dataset, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["frames"][1]["pose"][0] *= 1.001
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(LoadError, match="frame 1"):
            load_dataset(tmp_path)

    def test_tiny_pose_noise_accepted(self, small, tmp_path):
        save_dataset(small.dataset, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["frames"][1]["pose"][0] += 1e-6
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        assert len(load_dataset(tmp_path)) == 3

    def test_non_contiguous_indices(self, small, tmp_path):
        save_dataset(small.dataset, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["frames"][1]["index"] = 5
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(LoadError, match="contiguous"):
            load_dataset(tmp_path)

    def test_no_manifest(self, tmp_path):
        with pytest.raises(LoadError):
            load_dataset(tmp_path)

    def test_frame_validation(self):
        intr = Intrinsics.from_fov(45, 4, 4)
        with pytest.raises(ValueError):
            Frame(0, np.zeros((4, 4, 3)), -np.ones((4, 4)), np.zeros((4, 4), bool), look_at((0, -2, 0)), intr)
        with pytest.raises(ValueError):
            Frame(0, np.zeros((4, 5, 3)), np.zeros((4, 4)), np.zeros((4, 4), bool), look_at((0, -2, 0)), intr)


class TestPreprocess:
    def test_centered_frame(self):
        f = SyntheticScene(SyntheticSceneSpec(width=48, height=48)).frame(0)
        (out,) = preprocess(Dataset([f])).frames
        assert np.allclose(out.pose.matrix(), f.pose.matrix(), atol=1e-12)
        size = out.intrinsics.width
        assert size < 48 and out.intrinsics.height == size
        off = (48 - size) // 2
        assert np.array_equal(out.mask, f.mask[off : off + size, off : off + size])

    def test_crop_projection_identity(self):
        f = SyntheticScene(SyntheticSceneSpec(width=48, height=48)).frame(0)
        (out,) = preprocess(Dataset([f])).frames
        off = (48 - out.intrinsics.width) / 2
        x = np.random.default_rng(0).uniform(-0.5, 0.5, size=(20, 3))
        before, _ = project(f.intrinsics, f.pose, x)
        after, _ = project(out.intrinsics, out.pose, x)
        assert np.allclose(after, before - off, atol=1e-9)

    @settings(max_examples=15, deadline=None)
    @given(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(40.0, 120.0))
    def test_origin_projects_to_center(self, dx, dy, polar):
        # camera aimed off the object center: the pseudo camera re-centres it
        eye = np.array([2.0 * math.sin(math.radians(polar)), 0.0, 2.0 * math.cos(math.radians(polar))])
        pose = look_at(eye, target=(0.0, dx, dy))
        scene = SyntheticScene(SyntheticSceneSpec(width=40, height=40, radius=0.3))
        intr = scene.intrinsics()
        rgb, depth, mask = scene.render(0, intr, pose)
        (out,) = preprocess(Dataset([Frame(0, rgb, depth, mask, pose, intr)])).frames
        (uv,), z = project(out.intrinsics, out.pose, np.zeros((1, 3)))
        assert z[0] > 0
        assert np.all(np.abs(uv - out.intrinsics.width / 2.0) <= 0.5)

    def test_idempotent(self, small):
        once = preprocess(small.dataset)
        twice = preprocess(once)
        for a, b in zip(once.frames, twice.frames):
            assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.mask, b.mask)
            assert a.intrinsics == b.intrinsics
            assert np.allclose(a.pose.matrix(), b.pose.matrix(), atol=1e-12)

    def test_behind_camera_dropped(self, small, caplog):
        f = small.dataset[1]
        away = look_at(f.pose.translation * 2.0, target=f.pose.translation * 3.0)
        frames = [small.dataset[0], Frame(1, f.rgb, f.depth, f.mask, away, f.intrinsics), small.dataset[2]]
        with caplog.at_level(logging.WARNING):
            out = preprocess(Dataset(frames))
        assert len(out) == 2 and [fr.index for fr in out.frames] == [0, 1]
        assert "frame 1" in caplog.text
