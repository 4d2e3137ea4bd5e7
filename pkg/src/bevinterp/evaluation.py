"""Fusion, IoU/AP metrics, and occluded two-agent scenario evaluation.

Each test scene is split into two complementary views (each agent sees half
the objects and clutter), forcing collaboration to carry real information.
AP is all-point interpolated over detections pooled across scenes.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ShapeError
from .detection import decode_boxes, head_forward, iou_xywh
from .scene import Dataset, agent_views, rasterize_points


def fuse_max(f_ego, f_interp) -> Tensor:
    """Elementwise maximum of two aligned feature maps."""
    a, b = ad.as_tensor(f_ego), ad.as_tensor(f_interp)
    if a.shape != b.shape:
        raise ShapeError(f"fuse_max shapes differ: {a.shape} vs {b.shape}")
    return ad.maximum(a, b)


def iou_aabb(a, b) -> float:
    """IoU of two axis-aligned (cx, cy, w, h) boxes."""
    return iou_xywh(a, b)


def _match_records(dets_per_scene, gts_per_scene, iou_thr: float):
    """Greedy per-scene matching of globally score-sorted detections."""
    records = []   # (score, order, scene_idx, box)
    order = 0
    for si, dets in enumerate(dets_per_scene):
        for box, score in dets:
            records.append((float(score), order, si, box))
            order += 1
    records.sort(key=lambda r: (-r[0], r[1]))
    matched = [np.zeros(len(np.asarray(g).reshape(-1, 4)), dtype=bool)
               for g in gts_per_scene]
    gts = [np.asarray(g).reshape(-1, 4) for g in gts_per_scene]
    tp = np.zeros(len(records))
    for i, (_, _, si, box) in enumerate(records):
        best, best_j = 0.0, -1
        for j, gt in enumerate(gts[si]):
            if matched[si][j]:
                continue
            v = iou_xywh(box, gt)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_thr:
            matched[si][best_j] = True
            tp[i] = 1.0
    n_gt = sum(len(g) for g in gts)
    return tp, n_gt


def pooled_average_precision(dets_per_scene, gts_per_scene, iou_thr: float) -> float:
    """All-point interpolated AP over detections pooled across scenes."""
    tp, n_gt = _match_records(dets_per_scene, gts_per_scene, iou_thr)
    if n_gt == 0:
        return 1.0 if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(dets, gts, iou_thr: float) -> float:
    """Single-scene AP; dets is a list of ((cx,cy,w,h), score)."""
    return pooled_average_precision([dets], [gts], iou_thr)


MODES = ("collab", "ego_only", "no_interp")


def _channel_fit(feat: Tensor, c1: int) -> Tensor:
    """Truncate or zero-pad channels to c1 (the uninterpreted baseline)."""
    c2 = feat.shape[0]
    if c2 == c1:
        return feat
    if c2 > c1:
        return ad.slice_axis(feat, 0, 0, c1)
    return ad.pad_axis(feat, 0, 0, c1 - c2)


def evaluate_scenario(model, data: Dataset, neighbor_id: str, mode: str,
                      split: str = "test", conf_threshold: float | None = None,
                      nms_iou: float | None = None, n_agents: int = 2,
                      neighbor_transform=None):
    """AP@0.5 / AP@0.7 for one ego-neighbor pairing under occluded views.

    Modes: 'collab' runs the interpreter and max-fuses; 'ego_only' drops the
    neighbor; 'no_interp' max-fuses the spatially resized, channel-truncated
    or zero-padded raw neighbor feature. neighbor_transform optionally
    replaces the interpretation with a custom (f_ego, f_neb) -> Tensor hook.
    """
    from .encoders import encode
    from .interpreter import interpret, resize_neighbor

    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    dcfg = model.config.get("detection", {})
    conf = dcfg.get("conf_threshold", 0.3) if conf_threshold is None else conf_threshold
    nms = dcfg.get("nms_iou", 0.5) if nms_iou is None else nms_iou
    ego_enc = model.encoders[model.ego_id]
    ego_head = model.heads[model.ego_id]
    grid = model.ego_feature_grid
    h1, w1 = model.ego_spec.feature_hw
    dets_all, gts_all = [], []
    for scene in data.split_scenes(split):
        views = agent_views(scene, n_agents)
        f_ego = encode(ego_enc, rasterize_points(views[0][0], ego_enc.spec.grid))
        if mode == "ego_only":
            feature = f_ego.data
        else:
            neb_enc = model.encoders[neighbor_id]
            f_neb = encode(neb_enc, rasterize_points(views[1][0], neb_enc.spec.grid))
            if neighbor_transform is not None:
                aligned = neighbor_transform(f_ego, f_neb)
            elif mode == "collab":
                aligned, _ = interpret(f_ego, f_neb, neighbor_id, model.net, model.prompts)
            else:
                resized = resize_neighbor(f_neb, (h1, w1))
                aligned = _channel_fit(resized.data, model.ego_spec.out_channels)
            feature = fuse_max(f_ego.data, aligned)
        pred = head_forward(ego_head, feature)
        dets_all.append(decode_boxes(pred, grid, conf, nms))
        gts_all.append(scene.boxes)
    return {
        "ap50": pooled_average_precision(dets_all, gts_all, 0.5),
        "ap70": pooled_average_precision(dets_all, gts_all, 0.7),
        "n_scenes": len(gts_all),
    }
