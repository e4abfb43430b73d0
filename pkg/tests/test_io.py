import numpy as np
import pytest

from depthstab.core import DisparityMap, FlowField, Frame
from depthstab.io import (DataError, list_sequences, read_disparities, read_flo, read_frame,
                          read_labels, read_mask, read_pfm, read_sequence, write_disparities,
                          write_flo, write_frame, write_labels, write_mask, write_pfm,
                          write_sequence)


def test_pfm_round_trip_with_invalid_pixels(tmp_path):
    vals = np.random.default_rng(0).random((5, 7)).astype(np.float32).astype(np.float64)
    valid = np.ones((5, 7), bool)
    valid[1, 2] = False
    write_pfm(tmp_path / "d.pfm", DisparityMap(vals, valid))
    back = read_pfm(tmp_path / "d.pfm")
    assert np.array_equal(back.valid, valid)
    assert np.array_equal(back.values[valid], vals[valid])


def test_pfm_header(tmp_path):
    write_pfm(tmp_path / "d.pfm", np.zeros((2, 3)))
    assert (tmp_path / "d.pfm").read_bytes().startswith(b"Pf\n3 2\n-1.0\n")


def test_pfm_rejects_garbage(tmp_path):
    (tmp_path / "x.pfm").write_bytes(b"P6\n1 1\n255\n")
    with pytest.raises(DataError):
        read_pfm(tmp_path / "x.pfm")


def test_flo_round_trip(tmp_path):
    r = np.random.default_rng(1)
    f = FlowField(r.standard_normal((4, 6)).astype(np.float32), r.standard_normal((4, 6)).astype(np.float32))
    write_flo(tmp_path / "f.flo", f)
    g = read_flo(tmp_path / "f.flo", 3, 4)
    assert np.array_equal(g.as_array(), f.as_array()) and (g.src_index, g.dst_index) == (3, 4)
    raw = (tmp_path / "f.flo").read_bytes()
    assert np.frombuffer(raw[:4], "<f4")[0] == np.float32(202021.25)


def test_flo_bad_magic(tmp_path):
    (tmp_path / "f.flo").write_bytes(b"\x00" * 20)
    with pytest.raises(DataError):
        read_flo(tmp_path / "f.flo")


def test_frame_png_round_trip(tmp_path):
    rgb = np.random.default_rng(2).integers(0, 256, (8, 9, 3)) / 255.0
    write_frame(tmp_path / "f.png", Frame(rgb))
    assert np.array_equal(read_frame(tmp_path / "f.png").rgb, rgb)


def test_labels_and_mask_png(tmp_path):
    lab = np.random.default_rng(3).integers(0, 4, (6, 6))
    write_labels(tmp_path / "l.png", lab)
    assert np.array_equal(read_labels(tmp_path / "l.png"), lab)
    m = lab > 1
    write_mask(tmp_path / "m.png", m)
    assert np.array_equal(read_mask(tmp_path / "m.png"), m)
    with pytest.raises(ValueError):
        write_labels(tmp_path / "bad.png", np.array([[300]]))


def test_sequence_round_trip(tmp_path, scene):
    root = write_sequence(tmp_path / "s", scene, {"extra": 1})
    back = read_sequence(root)
    assert len(back) == len(scene) and back.name == scene.name and back.meta["extra"] == 1
    for a, b in zip(back.frames, scene.frames):
        assert np.abs(a.rgb - b.rgb).max() <= 0.5 / 255 + 1e-12
    for a, b in zip(back.gt_disparity, scene.gt_disparity):
        assert np.allclose(a.values, b.values, atol=1e-7)
    for a, b in zip(back.gt_flow_bwd, scene.gt_flow_bwd):
        assert np.array_equal(a.as_array(), b.as_array()) and (a.src_index, a.dst_index) == (b.src_index, b.dst_index)
    assert all(np.array_equal(a, b) for a, b in zip(back.gt_labels, scene.gt_labels))
    assert np.array_equal(back.flow(2, 5).as_array(), scene.flow(2, 5).as_array())


def test_sequence_write_is_byte_deterministic(tmp_path, scene):
    a = write_sequence(tmp_path / "a", scene)
    b = write_sequence(tmp_path / "b", scene)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert all((a / f).read_bytes() == (b / f).read_bytes() for f in files)


def test_missing_files_are_data_errors(tmp_path, scene):
    with pytest.raises(DataError):
        read_sequence(tmp_path / "nothing")
    root = write_sequence(tmp_path / "s", scene)
    (root / "disp" / "0003.pfm").unlink()
    with pytest.raises(DataError):
        read_sequence(root)


def test_list_and_disparity_dirs(tmp_path, scene):
    write_sequence(tmp_path / "b", scene)
    write_sequence(tmp_path / "a", scene)
    assert [p.name for p in list_sequences(tmp_path)] == ["a", "b"]
    write_disparities(tmp_path / "pred", scene.gt_disparity[:3])
    assert len(read_disparities(tmp_path / "pred")) == 3
