"""Training objectives.

Four terms: the standard noise-prediction loss, a cross-entropy that pins
each part token's attention to the part's mask, a consistency penalty that
keeps cross-attention features stable across noise draws, and a Gaussian
prior on the part latents.  All terms are means over their support, so the
blend weights are meaningful at any batch size or resolution.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

ATTN_EPS = 1e-8


def diffusion_loss(eps_pred, eps):
    """Mean squared error over every coordinate of the batch."""
    return F.mse_loss(eps_pred, eps)


def latent_regularizer(latents):
    """Pulls part latents toward the unit Gaussian the sampler assumes."""
    return latents.square().mean()


def downsample_masks(masks, size=16):
    """Area-average binary masks to the attention resolution, re-binarized.

    A cell counts as inside the part when at least half of its source
    pixels are.
    """
    m = masks.float()
    squeeze = m.ndim == 3
    if squeeze:
        m = m[None]
    out = F.adaptive_avg_pool2d(m, size) >= 0.5
    return (out[0] if squeeze else out).float()


def attention_loss(norm_maps, small_masks, sample_weight=None):
    """Cross-entropy between normalized attention and the part masks.

    norm_maps: (B, M, h, w) partition-of-unity attention.
    small_masks: (B, M, h, w) binary, already at attention resolution.
    sample_weight: optional (B,) zero/one mask excluding rows (for example
    samples whose conditioning was dropped for guidance training).
    The mean runs over masked-in (part, pixel) sites only.
    """
    inside = small_masks
    if sample_weight is not None:
        inside = inside * sample_weight.view(-1, 1, 1, 1)
    total = inside.sum()
    if total == 0:
        return norm_maps.sum() * 0.0
    nll = -(norm_maps.clamp_min(ATTN_EPS)).log()
    return (nll * inside).sum() / total


def consistency_loss(model, schedule, x0, t, view, context, eps_a, eps_b):
    """Feature drift between two noisings of the same image at the same t.

    Runs the conditional branch twice with independent noise draws and sums
    the mean squared differences of the cross-attention feature maps over
    the four sites.
    """
    feats_a = model.cross_attention_features(
        schedule.add_noise(x0, eps_a, t), t, view, context
    )
    feats_b = model.cross_attention_features(
        schedule.add_noise(x0, eps_b, t), t, view, context
    )
    loss = 0.0
    for site in feats_a:
        loss = loss + F.mse_loss(feats_a[site], feats_b[site])
    return loss
