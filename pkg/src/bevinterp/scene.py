"""Synthetic 2D BEV worlds: boxes, boundary-sampled points, occupancy grids.

Scenes are pure functions of their seed; datasets are pure functions of a
master seed plus the generation config, persisted as a JSON header followed
by a raw little-endian float64 payload.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

DATASET_MAGIC = b"PIDS1"
DATASET_VERSION = 1

JITTER_SIGMA = 0.05           # m, boundary point jitter
CLUTTER_DENSITY = 0.02        # points / m^2
BOUNDARY_SPACING = 0.3        # m between sampled outline points
MAX_PLACEMENT_TRIALS = 1000


class GenerationError(RuntimeError):
    """Could not place the requested boxes without overlap."""


class DatasetFormatError(ValueError):
    """Bad magic, version, or truncated payload."""


@dataclass(frozen=True)
class GridSpec:
    """Rasterization geometry: rows index y, columns index x."""

    cell_size: float
    height_cells: int
    width_cells: int
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")

    @property
    def extent(self):
        x0, y0 = self.origin
        return (x0, x0 + self.width_cells * self.cell_size,
                y0, y0 + self.height_cells * self.cell_size)

    def cell_centers(self):
        """Return (cx, cy) arrays of shape [H, W]."""
        x0, y0 = self.origin
        xs = x0 + (np.arange(self.width_cells) + 0.5) * self.cell_size
        ys = y0 + (np.arange(self.height_cells) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys)


@dataclass
class Scene:
    """Axis-aligned boxes (cx, cy, w, h) plus 2D hit points inside an extent."""

    boxes: np.ndarray            # [N, 4] float64
    points: np.ndarray           # [M, 2] float64
    extent: tuple                # (x_min, x_max, y_min, y_max)
    seed: int

    def n_boundary_points(self, box_idx: int) -> int:
        return boundary_point_count(self.boxes[box_idx])

    def point_spans(self):
        """Per-box boundary point slices, then the clutter slice.

        Recomputable from the boxes alone because the outline point count is
        a pure function of box size; lets views be derived after a round
        trip without storing provenance.
        """
        spans = []
        start = 0
        for i in range(len(self.boxes)):
            n = self.n_boundary_points(i)
            spans.append((start, start + n))
            start += n
        return spans, (start, len(self.points))


def boundary_point_count(box) -> int:
    _, _, w, h = box
    perimeter = 2.0 * (w + h)
    return max(8, int(round(perimeter / BOUNDARY_SPACING)))


def boxes_overlap(a, b) -> bool:
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    return ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1


def _sample_boundary(box, rng) -> np.ndarray:
    cx, cy, w, h = box
    n = boundary_point_count(box)
    perimeter = 2.0 * (w + h)
    offsets = (np.arange(n) + 0.5) / n * perimeter
    pts = np.empty((n, 2))
    x0, y0 = cx - w / 2, cy - h / 2
    for i, t in enumerate(offsets):
        if t < w:
            pts[i] = (x0 + t, y0)
        elif t < w + h:
            pts[i] = (x0 + w, y0 + (t - w))
        elif t < 2 * w + h:
            pts[i] = (x0 + w - (t - w - h), y0 + h)
        else:
            pts[i] = (x0, y0 + h - (t - 2 * w - h))
    pts += rng.normal(0.0, JITTER_SIGMA, size=pts.shape)
    return pts


def generate_scene(seed: int, n_objects: int, extent) -> Scene:
    """Place n_objects non-overlapping boxes and sample their hit points."""
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    x_min, x_max, y_min, y_max = (float(v) for v in extent)
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in range(n_objects):
        for trial in range(MAX_PLACEMENT_TRIALS + 1):
            if trial == MAX_PLACEMENT_TRIALS:
                raise GenerationError(
                    f"could not place {n_objects} boxes in extent {extent} "
                    f"after {MAX_PLACEMENT_TRIALS} trials"
                )
            w = rng.uniform(3.0, 5.0)
            h = rng.uniform(1.6, 2.4)
            if w > x_max - x_min or h > y_max - y_min:
                continue
            cx = rng.uniform(x_min + w / 2, x_max - w / 2)
            cy = rng.uniform(y_min + h / 2, y_max - h / 2)
            cand = np.array([cx, cy, w, h])
            if not any(boxes_overlap(cand, b) for b in boxes):
                boxes.append(cand)
                break
    boxes = np.array(boxes, dtype=np.float64).reshape(n_objects, 4)

    pts = [_sample_boundary(b, rng) for b in boxes]
    area = (x_max - x_min) * (y_max - y_min)
    n_clutter = int(rng.poisson(CLUTTER_DENSITY * area))
    clutter = np.column_stack([
        rng.uniform(x_min, x_max, size=n_clutter),
        rng.uniform(y_min, y_max, size=n_clutter),
    ])
    pts.append(clutter)
    points = np.vstack(pts) if pts else np.zeros((0, 2))
    return Scene(boxes=boxes, points=points,
                 extent=(x_min, x_max, y_min, y_max), seed=int(seed))


def agent_views(scene: Scene, n_agents: int = 2):
    """Split a scene into per-agent (points, visible_boxes) views.

    Agent a sees the outline points of boxes with index % n_agents == a and
    every n_agents-th clutter point; views are disjoint and cover the scene,
    so each agent misses what the others observe.
    """
    spans, clutter_span = scene.point_spans()
    views = []
    for a in range(n_agents):
        chunks = []
        vis = []
        for i, (s, e) in enumerate(spans):
            if i % n_agents == a:
                chunks.append(scene.points[s:e])
                vis.append(scene.boxes[i])
        cs, ce = clutter_span
        clutter = scene.points[cs:ce]
        chunks.append(clutter[a::n_agents])
        pts = np.vstack(chunks) if chunks else np.zeros((0, 2))
        boxes = np.array(vis).reshape(len(vis), 4)
        views.append((pts, boxes))
    return views


def rasterize_points(points: np.ndarray, grid: GridSpec) -> Tensor:
    """Count points per cell, clip at 8, scale to [0, 1]; returns [1, H, W]."""
    counts = raw_cell_counts(points, grid)
    return Tensor(np.clip(counts, 0.0, 8.0)[None] / 8.0)


def raw_cell_counts(points: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Unclipped per-cell counts (mass-conservation oracle)."""
    x0, y0 = grid.origin
    h, w = grid.height_cells, grid.width_cells
    counts = np.zeros((h, w), dtype=np.float64)
    if len(points):
        col = np.floor((points[:, 0] - x0) / grid.cell_size).astype(int)
        row = np.floor((points[:, 1] - y0) / grid.cell_size).astype(int)
        keep = (col >= 0) & (col < w) & (row >= 0) & (row < h)
        np.add.at(counts, (row[keep], col[keep]), 1.0)
    return counts


def rasterize(scene: Scene, grid: GridSpec) -> Tensor:
    return rasterize_points(scene.points, grid)


@dataclass
class Dataset:
    scenes: list
    splits: dict = field(default_factory=dict)   # name -> list of scene indices
    master_seed: int = 0
    config: dict = field(default_factory=dict)

    def split_scenes(self, name: str):
        return [self.scenes[i] for i in self.splits.get(name, [])]

    def __len__(self):
        return len(self.scenes)


def generate_dataset(master_seed: int, n_scenes: int, n_objects: int, extent,
                     split_fracs=(0.8, 0.1, 0.1)) -> Dataset:
    """Deterministic dataset: per-scene seeds spawned from the master seed."""
    children = np.random.SeedSequence(master_seed).spawn(n_scenes)
    seeds = [int(c.generate_state(1)[0]) for c in children]
    scenes = [generate_scene(s, n_objects, extent) for s in seeds]
    n_train = int(round(split_fracs[0] * n_scenes))
    n_val = int(round(split_fracs[1] * n_scenes))
    splits = {
        "train": list(range(0, n_train)),
        "val": list(range(n_train, min(n_train + n_val, n_scenes))),
        "test": list(range(min(n_train + n_val, n_scenes), n_scenes)),
    }
    config = {
        "n_scenes": n_scenes,
        "n_objects": n_objects,
        "extent": [float(v) for v in extent],
        "split_fracs": list(split_fracs),
    }
    return Dataset(scenes=scenes, splits=splits, master_seed=int(master_seed),
                   config=config)


def save_dataset(ds: Dataset, path):
    header = {
        "version": DATASET_VERSION,
        "master_seed": ds.master_seed,
        "config": ds.config,
        "splits": ds.splits,
        "scenes": [
            {
                "seed": s.seed,
                "n_boxes": int(len(s.boxes)),
                "n_points": int(len(s.points)),
                "extent": [float(v) for v in s.extent],
            }
            for s in ds.scenes
        ],
    }
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC + b"\n")
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for s in ds.scenes:
            f.write(np.ascontiguousarray(s.boxes, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(s.points, dtype="<f8").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != DATASET_MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
        try:
            header = json.loads(f.readline().decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DatasetFormatError(f"unreadable header: {e}") from e
        if header.get("version") != DATASET_VERSION:
            raise DatasetFormatError(
                f"unsupported version {header.get('version')}, expected {DATASET_VERSION}"
            )
        payload = f.read()
    scenes = []
    offset = 0
    for meta in header["scenes"]:
        nb, npts = meta["n_boxes"], meta["n_points"]
        need = (nb * 4 + npts * 2) * 8
        if offset + need > len(payload):
            raise DatasetFormatError("truncated dataset payload")
        boxes = np.frombuffer(payload, dtype="<f8", count=nb * 4,
                              offset=offset).reshape(nb, 4).copy()
        offset += nb * 4 * 8
        points = np.frombuffer(payload, dtype="<f8", count=npts * 2,
                               offset=offset).reshape(npts, 2).copy()
        offset += npts * 2 * 8
        scenes.append(Scene(boxes=boxes, points=points,
                            extent=tuple(meta["extent"]), seed=int(meta["seed"])))
    if offset != len(payload):
        raise DatasetFormatError("trailing bytes in dataset payload")
    return Dataset(scenes=scenes, splits={k: list(v) for k, v in header["splits"].items()},
                   master_seed=int(header["master_seed"]), config=header["config"])
