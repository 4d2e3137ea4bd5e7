"""Style loss, adversarial alignment, and the two phase composites.

Style matches per-channel mean/std vectors between an interpreted map and
the ego feature. The adversarial objective is realized as alternating BCE:
the discriminator separates ego features from prompted neighbor features,
the interpreter (channel-selection weights + general prompt) tries to fool it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, ShapeError


class TrainingError(RuntimeError):
    """Non-finite loss term, annotated with the offending term name."""


@dataclass
class LossWeights:
    omega: float = 0.5
    lambda_s: float = 1.0
    lambda_g: float = 1.0

    def __post_init__(self):
        if min(self.omega, self.lambda_s, self.lambda_g) < 0:
            raise ValueError("loss weights must be non-negative")


def style_loss(f, f_ego) -> Tensor:
    """L2 distance between per-channel mean vectors plus per-channel std vectors.

    Moments are taken over H*W per channel with the population (1/HW) std.
    Zero iff both moment vectors coincide; gradient is undefined exactly there.
    """
    ft, et = ad.as_tensor(f), ad.as_tensor(f_ego)
    if ft.shape != et.shape:
        raise ShapeError(f"style_loss shapes differ: {ft.shape} vs {et.shape}")
    c = ft.shape[0]

    def moments(t):
        mu = ad.tmean(t, axis=(1, 2))                        # [C]
        centered = t - ad.reshape(mu, (c, 1, 1))
        sd = ad.tsqrt(ad.tmean(centered * centered, axis=(1, 2)))
        return mu, sd

    mu_f, sd_f = moments(ft)
    mu_e, sd_e = moments(et)
    dmu = mu_f - mu_e
    dsd = sd_f - sd_e
    return ad.tsqrt(ad.tsum(dmu * dmu)) + ad.tsqrt(ad.tsum(dsd * dsd))


class Discriminator:
    """Two strided 3x3 convs, global average pool, affine to a single logit."""

    def __init__(self, in_channels: int, hidden: int = 16, seed: int = 0):
        seq = np.random.SeedSequence(entropy=seed)
        r1, r2, r3 = (np.random.default_rng(s) for s in seq.spawn(3))
        self.hidden = hidden
        std1 = np.sqrt(2.0 / (9 * in_channels))
        std2 = np.sqrt(2.0 / (9 * hidden))
        self.conv1_w = Parameter("discriminator.conv1.w",
                                 r1.normal(0, std1, size=(hidden, in_channels, 3, 3)))
        self.conv1_b = Parameter("discriminator.conv1.b", np.zeros(hidden))
        self.conv2_w = Parameter("discriminator.conv2.w",
                                 r2.normal(0, std2, size=(hidden, hidden, 3, 3)))
        self.conv2_b = Parameter("discriminator.conv2.b", np.zeros(hidden))
        self.fc_w = Parameter("discriminator.fc.w",
                              r3.normal(0, 1.0 / np.sqrt(hidden), size=(1, hidden)))
        self.fc_b = Parameter("discriminator.fc.b", np.zeros(1))

    def parameters(self):
        return [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b,
                self.fc_w, self.fc_b]

    def set_frozen(self, frozen: bool):
        for p in self.parameters():
            p.frozen = frozen

    def forward(self, x: Tensor) -> Tensor:
        """x: [C,H,W] -> scalar logit tensor."""
        h = ad.relu(ad.conv2d(x, self.conv1_w, self.conv1_b, stride=2, pad=1))
        h = ad.relu(ad.conv2d(h, self.conv2_w, self.conv2_b, stride=2, pad=1))
        pooled = ad.reshape(ad.tmean(h, axis=(1, 2)), (self.hidden, 1))
        logit = ad.matmul(self.fc_w, pooled) + ad.reshape(self.fc_b.tensor, (1, 1))
        return ad.reshape(logit, (1,))


def bce_with_logits(logit: Tensor, label: float) -> Tensor:
    """Stable binary cross-entropy on a scalar logit."""
    z = ad.reshape(logit, (1, 1))
    pos = ad.softplus(ad.neg(z))     # -log sigmoid(z)
    negv = ad.softplus(z)            # -log (1 - sigmoid(z))
    return ad.tsum(ad.scale(pos, float(label)) + ad.scale(negv, 1.0 - float(label)))


def adversarial_losses(d: Discriminator, f_g: Tensor, f_ego) -> tuple:
    """(loss_d, loss_gen) for alternating updates.

    loss_d sees f_g detached (ego labeled 1, prompted neighbor 0); loss_gen
    drives the live f_g graph toward the ego label and is stepped only on
    the channel-selection weights and the general prompt.
    """
    ego_t = ad.as_tensor(f_ego.data if hasattr(f_ego, "encoder_id") else f_ego)
    loss_d = bce_with_logits(d.forward(ego_t.detach()), 1.0) + \
        bce_with_logits(d.forward(f_g.detach()), 0.0)
    loss_gen = bce_with_logits(d.forward(f_g), 1.0)
    return loss_d, loss_gen


def _check_finite(parts: dict):
    for name, t in parts.items():
        v = t.item() if isinstance(t, Tensor) else float(t)
        if not np.isfinite(v):
            raise TrainingError(f"non-finite loss term {name!r}: {v}")


def phase1_loss(parts: dict, weights: LossWeights):
    """Total = collab + lambda_s*(single + omega*style_s) + lambda_g*(adv_gen + omega*style_g).

    parts must hold tensors for: collab, single, style_s, adv_gen, style_g.
    Returns (total tensor, per-term float breakdown).
    """
    _check_finite(parts)
    w = weights
    ls = parts["single"] + ad.scale(parts["style_s"], w.omega)
    lg = parts["adv_gen"] + ad.scale(parts["style_g"], w.omega)
    total = parts["collab"] + ad.scale(ls, w.lambda_s) + ad.scale(lg, w.lambda_g)
    breakdown = {k: v.item() for k, v in parts.items()}
    breakdown["total"] = total.item()
    return total, breakdown


def phase2_loss(parts: dict, weights: LossWeights):
    """Total = collab + lambda_s*(single + omega*style_s); no adversarial term."""
    _check_finite(parts)
    w = weights
    ls = parts["single"] + ad.scale(parts["style_s"], w.omega)
    total = parts["collab"] + ad.scale(ls, w.lambda_s)
    breakdown = {k: v.item() for k, v in parts.items()}
    breakdown["total"] = total.item()
    return total, breakdown
