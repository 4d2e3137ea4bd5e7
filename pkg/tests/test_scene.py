import numpy as np
import pytest

from bevinterp.scene import (
    Dataset,
    DatasetFormatError,
    GenerationError,
    GridSpec,
    agent_views,
    boxes_overlap,
    generate_dataset,
    generate_scene,
    load_dataset,
    rasterize,
    rasterize_points,
    raw_cell_counts,
    save_dataset,
)

EXTENT = (0.0, 48.0, 0.0, 24.0)


def box_iou(a, b):
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union


def test_empty_scene_has_only_clutter():
    s = generate_scene(7, 0, EXTENT)
    assert len(s.boxes) == 0
    assert len(s.points) > 0  # clutter at density 0.02 over 1152 m^2


def test_scene_determinism():
    a = generate_scene(123, 4, EXTENT)
    b = generate_scene(123, 4, EXTENT)
    assert a.boxes.tobytes() == b.boxes.tobytes()
    assert a.points.tobytes() == b.points.tobytes()


def test_boxes_disjoint_exhaustive():
    s = generate_scene(42, 5, EXTENT)
    assert len(s.boxes) == 5
    for i in range(5):
        for j in range(i + 1, 5):
            assert box_iou(s.boxes[i], s.boxes[j]) == 0.0
            assert not boxes_overlap(s.boxes[i], s.boxes[j])


def test_boxes_inside_extent():
    s = generate_scene(9, 6, EXTENT)
    x0, x1, y0, y1 = EXTENT
    for cx, cy, w, h in s.boxes:
        assert cx - w / 2 >= x0 and cx + w / 2 <= x1
        assert cy - h / 2 >= y0 and cy + h / 2 <= y1


def test_generation_error_when_extent_too_small():
    with pytest.raises(GenerationError):
        generate_scene(0, 40, (0.0, 10.0, 0.0, 5.0))


def test_rasterize_empty():
    grid = GridSpec(1.0, 4, 8)
    out = rasterize_points(np.zeros((0, 2)), grid)
    assert out.shape == (1, 4, 8)
    assert np.all(out.data == 0)


def test_rasterize_single_point():
    grid = GridSpec(1.0, 4, 4)
    out = rasterize_points(np.array([[0.5, 0.5]]), grid)
    assert out.data[0, 0, 0] == 1 / 8
    assert out.data.sum() == 1 / 8


def test_rasterize_mass_conserved_across_resolutions():
    s = generate_scene(11, 5, EXTENT)
    coarse = GridSpec(1.0, 24, 48)
    fine = GridSpec(0.5, 48, 96)
    inside = (
        (s.points[:, 0] >= 0) & (s.points[:, 0] < 48)
        & (s.points[:, 1] >= 0) & (s.points[:, 1] < 24)
    ).sum()
    assert raw_cell_counts(s.points, coarse).sum() == inside
    assert raw_cell_counts(s.points, fine).sum() == inside
    assert fine.height_cells * fine.width_cells == 4 * coarse.height_cells * coarse.width_cells


def test_rasterize_clips_at_eight():
    grid = GridSpec(1.0, 2, 2)
    pts = np.tile([[0.5, 0.5]], (20, 1))
    out = rasterize_points(pts, grid)
    assert out.data[0, 0, 0] == 1.0


def test_agent_views_partition_scene():
    s = generate_scene(5, 4, EXTENT)
    views = agent_views(s, 2)
    assert len(views) == 2
    (p0, b0), (p1, b1) = views
    assert len(p0) + len(p1) == len(s.points)
    assert len(b0) + len(b1) == len(s.boxes)
    # box visibility split by index parity
    np.testing.assert_array_equal(b0, s.boxes[0::2])
    np.testing.assert_array_equal(b1, s.boxes[1::2])


def test_dataset_roundtrip(tmp_path):
    ds = generate_dataset(99, 10, 3, EXTENT)
    path = tmp_path / "data.pids"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.master_seed == ds.master_seed
    assert back.splits == ds.splits
    assert len(back.scenes) == len(ds.scenes)
    for a, b in zip(ds.scenes, back.scenes):
        assert a.boxes.tobytes() == b.boxes.tobytes()
        assert a.points.tobytes() == b.points.tobytes()
        assert a.extent == b.extent and a.seed == b.seed


def test_dataset_determinism():
    a = generate_dataset(5, 6, 2, EXTENT)
    b = generate_dataset(5, 6, 2, EXTENT)
    for sa, sb in zip(a.scenes, b.scenes):
        assert sa.points.tobytes() == sb.points.tobytes()


def test_splits_disjoint_and_cover():
    ds = generate_dataset(1, 20, 2, EXTENT)
    all_ids = sorted(ds.splits["train"] + ds.splits["val"] + ds.splits["test"])
    assert all_ids == list(range(20))


def test_corrupt_magic_rejected(tmp_path):
    path = tmp_path / "bad.pids"
    path.write_bytes(b"NOPE!\n{}\n")
    with pytest.raises(DatasetFormatError):
        load_dataset(path)


def test_truncated_payload_rejected(tmp_path):
    ds = generate_dataset(3, 2, 2, EXTENT)
    path = tmp_path / "trunc.pids"
    save_dataset(ds, path)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(DatasetFormatError):
        load_dataset(path)


def test_empty_dataset_roundtrip(tmp_path):
    ds = Dataset(scenes=[], splits={"train": [], "val": [], "test": []}, master_seed=0)
    path = tmp_path / "empty.pids"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.scenes == []


def test_rasterize_scene_wrapper():
    s = generate_scene(2, 1, EXTENT)
    grid = GridSpec(1.0, 24, 48)
    out = rasterize(s, grid)
    assert out.shape == (1, 24, 48)
    assert out.data.max() <= 1.0
