import json
import struct

import numpy as np
import pytest

from openvoxel.scene import (CameraFormatError, CameraView, SceneFormatError, load_cameras,
                             load_mask, load_scene, save_cameras, save_mask, save_scene)

from conftest import random_scene


def test_round_trip_identity(tmp_path):
    scene = random_scene(50, seed=3, with_labels=True)
    path = tmp_path / "s.ovx"
    save_scene(scene, path)
    assert load_scene(path).equals(scene)


def test_round_trip_many_random(tmp_path):
    for seed in range(20):
        scene = random_scene(10 + seed, seed=seed, with_labels=seed % 2 == 0)
        path = tmp_path / f"s{seed}.ovx"
        save_scene(scene, path)
        assert load_scene(path).equals(scene)


def test_save_deterministic(tmp_path):
    scene = random_scene(30, seed=1)
    save_scene(scene, tmp_path / "a.ovx")
    save_scene(scene, tmp_path / "b.ovx")
    assert (tmp_path / "a.ovx").read_bytes() == (tmp_path / "b.ovx").read_bytes()


def test_save_load_save_idempotent(tmp_path):
    scene = random_scene(30, seed=2, with_labels=True)
    save_scene(scene, tmp_path / "a.ovx")
    save_scene(load_scene(tmp_path / "a.ovx"), tmp_path / "b.ovx")
    assert (tmp_path / "a.ovx").read_bytes() == (tmp_path / "b.ovx").read_bytes()


def test_optional_sections_in_header(tmp_path):
    scene = random_scene(10, seed=4, with_labels=True)
    save_scene(scene, tmp_path / "s.ovx")
    raw = (tmp_path / "s.ovx").read_bytes()
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12 : 12 + hlen])
    names = {s["name"] for s in header["sections"]}
    assert "gt_labels" in names


def test_negative_density_rejected(tmp_path):
    scene = random_scene(5, seed=5)
    save_scene(scene, tmp_path / "s.ovx")
    raw = bytearray((tmp_path / "s.ovx").read_bytes())
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12 : 12 + hlen])
    sec = next(s for s in header["sections"] if s["name"] == "densities")
    off = 12 + hlen + sec["offset"]
    raw[off : off + 4] = np.array([-1.0], "<f4").tobytes()
    (tmp_path / "bad.ovx").write_bytes(bytes(raw))
    with pytest.raises(SceneFormatError, match="densities must be non-negative"):
        load_scene(tmp_path / "bad.ovx")


def test_hand_authored_single_voxel_file(tmp_path):
    """One voxel authored byte-by-byte per the container layout."""
    sections = []
    body = b""
    for name, dtype, values in (
        ("centers", "<f4", [1.0, 2.0, 3.0]),
        ("sizes", "<f4", [0.5]),
        ("densities", "<f4", [4.0]),
        ("colors", "<f4", [0.1, 0.2, 0.3]),
    ):
        blob = np.array(values, dtype).tobytes()
        shape = [1] if name in ("sizes", "densities") else [1, 3]
        sections.append({"name": name, "dtype": dtype, "shape": shape,
                         "offset": len(body), "byte_len": len(blob)})
        body += blob
    header = json.dumps({"n_voxels": 1, "sections": sections, "meta": {}}).encode()
    raw = b"OVX1" + struct.pack("<Q", len(header)) + header + body
    (tmp_path / "one.ovx").write_bytes(raw)
    scene = load_scene(tmp_path / "one.ovx")
    assert scene.n_voxels == 1
    assert np.allclose(scene.centers[0], [1.0, 2.0, 3.0])
    assert scene.sizes[0] == np.float32(0.5)
    assert scene.densities[0] == np.float32(4.0)
    assert np.allclose(scene.colors[0], np.array([0.1, 0.2, 0.3], np.float32))


def test_truncated_section_reported(tmp_path):
    scene = random_scene(5, seed=6)
    save_scene(scene, tmp_path / "s.ovx")
    raw = (tmp_path / "s.ovx").read_bytes()
    (tmp_path / "cut.ovx").write_bytes(raw[:-8])
    with pytest.raises(SceneFormatError, match="colors"):
        load_scene(tmp_path / "cut.ovx")


def test_bad_magic(tmp_path):
    (tmp_path / "x.ovx").write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(SceneFormatError, match="magic"):
        load_scene(tmp_path / "x.ovx")


def test_camera_round_trip(tmp_path, synth_small):
    _, _, _, views = synth_small
    save_cameras(views, tmp_path / "c.json")
    loaded = load_cameras(tmp_path / "c.json")
    assert len(loaded) == len(views)
    for a, b in zip(views, loaded):
        assert np.allclose(a.rotation, b.rotation)
        assert np.allclose(a.translation, b.translation)
        assert (a.width, a.height, a.fx, a.fy, a.cx, a.cy) == \
               (b.width, b.height, b.fx, b.fy, b.cx, b.cy)


def test_camera_rotation_validated():
    with pytest.raises(CameraFormatError):
        CameraView(width=4, height=4, fx=2.0, fy=2.0, cx=2.0, cy=2.0,
                   rotation=np.eye(3) * 2.0, translation=np.zeros(3))


def test_mask_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    mask = rng.integers(0, 300, (16, 16)).astype(np.int32)
    save_mask(mask, tmp_path / "m.png")
    assert np.array_equal(load_mask(tmp_path / "m.png"), mask)
