"""Frozen, mutually heterogeneous toy encoders: occupancy grid -> BEV feature.

Each encoder is two 3x3 convs + activation, an optional 2x max-pool, and a
fixed random orthogonal 1x1 channel mix. The mix scrambles channel semantics
without losing information, which is exactly the heterogeneity the channel
selection stage has to undo.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, ShapeError
from .detection import DetectionHead, detection_loss, head_forward, decode_boxes
from .scene import Dataset, GridSpec, rasterize

VALID_CHANNELS = (16, 24, 32, 48)


@dataclass(frozen=True)
class EncoderSpec:
    id: str
    out_channels: int
    downsample: int
    mixing_seed: int
    activation: str
    grid: GridSpec

    def __post_init__(self):
        if self.out_channels not in VALID_CHANNELS:
            raise ValueError(f"out_channels must be one of {VALID_CHANNELS}")
        if self.downsample not in (1, 2):
            raise ValueError("downsample must be 1 or 2")
        if self.activation not in ("relu", "tanh"):
            raise ValueError("activation must be relu or tanh")

    @property
    def feature_hw(self):
        return (self.grid.height_cells // self.downsample,
                self.grid.width_cells // self.downsample)


@dataclass
class BevFeature:
    data: Tensor            # [C, H, W]
    encoder_id: str
    grid: GridSpec

    @property
    def shape(self):
        return self.data.shape


def _orthogonal(n: int, rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


class Encoder:
    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        c = spec.out_channels
        seq = np.random.SeedSequence(entropy=spec.mixing_seed)
        r_conv1, r_conv2, r_mix = (np.random.default_rng(s) for s in seq.spawn(3))
        std1 = np.sqrt(2.0 / 9) if spec.activation == "relu" else np.sqrt(1.0 / 9)
        std2 = np.sqrt(2.0 / (9 * c)) if spec.activation == "relu" else np.sqrt(1.0 / (9 * c))
        pre = f"encoder.{spec.id}"
        self.conv1_w = Parameter(f"{pre}.conv1.w", r_conv1.normal(0, std1, size=(c, 1, 3, 3)))
        self.conv1_b = Parameter(f"{pre}.conv1.b", np.zeros(c))
        self.conv2_w = Parameter(f"{pre}.conv2.w", r_conv2.normal(0, std2, size=(c, c, 3, 3)))
        self.conv2_b = Parameter(f"{pre}.conv2.b", np.zeros(c))
        # information-preserving channel scramble, never trained
        self.mix_w = Parameter(f"{pre}.mix.w", _orthogonal(c, r_mix), frozen=True)

    def parameters(self):
        return [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b, self.mix_w]

    def trainable_parameters(self):
        return [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b]

    def set_frozen(self, frozen: bool):
        for p in self.trainable_parameters():
            p.frozen = frozen

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.trainable_parameters())

    def _act(self, t):
        return ad.relu(t) if self.spec.activation == "relu" else ad.tanh(t)


def build_encoder(spec: EncoderSpec) -> Encoder:
    return Encoder(spec)


def encode(enc: Encoder, grid_tensor: Tensor) -> BevFeature:
    """Forward an occupancy grid [1,H,W] matching the encoder's GridSpec."""
    spec = enc.spec
    expected = (1, spec.grid.height_cells, spec.grid.width_cells)
    if tuple(grid_tensor.shape) != expected:
        raise ShapeError(f"encoder {spec.id} expects input {expected}, got {grid_tensor.shape}")
    x = ad.conv2d(grid_tensor, enc.conv1_w, enc.conv1_b, stride=1, pad=1)
    x = enc._act(x)
    x = ad.conv2d(x, enc.conv2_w, enc.conv2_b, stride=1, pad=1)
    x = enc._act(x)
    if spec.downsample == 2:
        x = ad.max_pool2d(x, 2)
    x = ad.conv1x1(x, enc.mix_w)
    return BevFeature(data=x, encoder_id=spec.id, grid=spec.grid)


class PretrainError(RuntimeError):
    pass


def pretrain_encoder(enc: Encoder, head: DetectionHead, data: Dataset, steps: int,
                     lr: float = 1e-3, seed: int = 0,
                     conf_threshold: float = 0.3, nms_iou: float = 0.5):
    """Train encoder + its own head jointly on single-agent detection, then freeze.

    Returns (encoder, head, val_ap50); the AP is the encoder's homogeneous
    baseline on the val split. With steps=0 the encoder is frozen untouched.
    """
    from .evaluation import average_precision  # local import, avoids a cycle

    train = data.split_scenes("train")
    if steps > 0 and not train:
        raise PretrainError("empty train split")
    from .training import Adam

    params = enc.trainable_parameters() + head.parameters()
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    for step in range(steps):
        scene = train[int(rng.integers(len(train)))]
        for p in params:
            p.tensor.zero_grad()
        feat = encode(enc, rasterize(scene, enc.spec.grid))
        loss = detection_loss(head_forward(head, feat), scene.boxes, _feature_grid(enc.spec))
        if not np.isfinite(loss.item()):
            raise PretrainError(f"non-finite pretraining loss at step {step}")
        loss.backward()
        opt.step()
    enc.set_frozen(True)
    head.set_frozen(True)

    dets_all, gts_all = [], []
    for i, scene in enumerate(data.split_scenes("val")):
        feat = encode(enc, rasterize(scene, enc.spec.grid))
        pred = head_forward(head, feat)
        dets = decode_boxes(pred, _feature_grid(enc.spec), conf_threshold, nms_iou)
        dets_all.append(dets)
        gts_all.append(scene.boxes)
    ap50 = average_precision_multi(dets_all, gts_all, 0.5)
    return enc, head, ap50


def _feature_grid(spec: EncoderSpec) -> GridSpec:
    """Grid describing the encoder's output cells (post-downsample)."""
    return GridSpec(spec.grid.cell_size * spec.downsample,
                    spec.grid.height_cells // spec.downsample,
                    spec.grid.width_cells // spec.downsample,
                    spec.grid.origin)


def average_precision_multi(dets_per_scene, gts_per_scene, iou_thr: float) -> float:
    from .evaluation import pooled_average_precision

    return pooled_average_precision(dets_per_scene, gts_per_scene, iou_thr)


def channel_cosine_matrix(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """|cosine| between every channel of fa [C1,H,W] and fb [C2,H,W]."""
    a = fa.reshape(fa.shape[0], -1)
    b = fb.reshape(fb.shape[0], -1)
    a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return np.abs(a @ b.T)
