"""Reconstruction, prompt-alignment and hinge adversarial losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from ..errors import ConfigError, TrainingError


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def perceptual_from_features(feats_a, feats_b) -> torch.Tensor:
    """LPIPS-style distance: channel-normalized features, squared difference
    summed over channels, averaged over positions, batch and scales."""
    total = 0.0
    for fa, fb in zip(feats_a, feats_b):
        na = F.normalize(fa, dim=1, eps=1e-6)
        nb = F.normalize(fb, dim=1, eps=1e-6)
        total = total + ((na - nb) ** 2).sum(1).mean()
    return total / len(feats_a)


def rec_loss(gen: torch.Tensor, gt: torch.Tensor, encoder) -> tuple[torch.Tensor, torch.Tensor]:
    """``(l2, perceptual)`` between images in [-1, 1]."""
    _same_shape(gen, gt)
    l2 = F.mse_loss(gen, gt)
    perceptual = perceptual_from_features(encoder.image_features(gen), encoder.image_features(gt))
    return l2, perceptual


def alignment_from_embeddings(img_emb: torch.Tensor, text_emb: torch.Tensor) -> torch.Tensor:
    if img_emb.shape[-1] != text_emb.shape[-1]:
        raise ConfigError(
            f"embedding dimension mismatch: image {img_emb.shape[-1]} vs text {text_emb.shape[-1]}"
        )
    cos = F.cosine_similarity(img_emb, text_emb.expand_as(img_emb), dim=-1)
    return (1.0 - cos).mean()


def clip_alignment_loss(gen: torch.Tensor, t_p, encoder) -> torch.Tensor:
    """``1 - cos(image_embed(gen), t_p)``, in [0, 2]."""
    vec = getattr(t_p, "vector", t_p)
    return alignment_from_embeddings(encoder.image_embedding(gen), vec)


class DiscriminatorHead(nn.Module):
    """Patch logits from each scale of the frozen pair-encoder features."""

    def __init__(self, channels=(32, 48, 64), hidden=32):
        super().__init__()
        self.heads = nn.ModuleList(
            [
                nn.Sequential(nn.Conv2d(c, hidden, 3, padding=1), nn.SiLU(), nn.Conv2d(hidden, 1, 1))
                for c in channels
            ]
        )

    def forward(self, feats) -> torch.Tensor:
        return torch.cat([h(f).flatten(1) for h, f in zip(self.heads, feats)], dim=1)

    def frozen_call(self, feats) -> torch.Tensor:
        """Forward with detached parameters: gradients reach ``feats`` only."""
        params = {k: v.detach() for k, v in self.named_parameters()}
        return functional_call(self, params, (feats,))


def hinge_d(real_logits, fake_logits) -> torch.Tensor:
    return F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean()


def hinge_g(fake_logits) -> torch.Tensor:
    return -fake_logits.mean()


def adv_losses(head: DiscriminatorHead, gen, gt, encoder) -> tuple[torch.Tensor, torch.Tensor]:
    """``(adv_g, adv_d)``; adv_g never reaches the head, adv_d never reaches ``gen``."""
    _same_shape(gen, gt)
    feats_fake = encoder.image_features(gen)
    with torch.no_grad():
        feats_real = encoder.image_features(gt)
    adv_g = hinge_g(head.frozen_call(feats_fake))
    adv_d = hinge_d(head(feats_real), head([f.detach() for f in feats_fake]))
    return adv_g, adv_d


@dataclass
class LossBreakdown:
    l2: torch.Tensor | float
    perceptual: torch.Tensor | float
    rec: torch.Tensor | float
    clip: torch.Tensor | float
    adv_g: torch.Tensor | float
    adv_d: torch.Tensor | float
    total: torch.Tensor | float

    def as_floats(self) -> dict[str, float]:
        return {f.name: _scalar(getattr(self, f.name)) for f in fields(self)}


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def total_loss(parts: dict, cfg, step: int | None = None) -> LossBreakdown:
    """``total = rec + w_clip * clip + w_adv * adv_g`` with ``rec = l2 + perceptual``."""
    bad = [k for k, v in parts.items() if not math.isfinite(_scalar(v))]
    if bad:
        where = f" at step {step}" if step is not None else ""
        values = {k: _scalar(v) for k, v in parts.items()}
        raise TrainingError(f"non-finite loss part(s) {bad}{where}: {values}")
    if "rec" in parts:
        rec = parts["rec"]
        l2, perceptual = parts.get("l2", rec), parts.get("perceptual", 0.0)
    else:
        l2, perceptual = parts["l2"], parts["perceptual"]
        rec = l2 + perceptual
    clip, adv_g = parts.get("clip", 0.0), parts.get("adv_g", 0.0)
    total = rec + cfg.w_clip * clip + cfg.w_adv * adv_g
    return LossBreakdown(l2, perceptual, rec, clip, adv_g, parts.get("adv_d", 0.0), total)
