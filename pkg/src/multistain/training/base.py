"""Brief pretraining of the generator base before it is frozen.

Stage one fits the encoder/decoder as an autoencoder over H&E and IHC
tiles; stage two fits the latent UNet as a single-step denoiser of clean
latents under random prompt embeddings.
"""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigError
from ..prompts import CONCRETE_MODES, MARKERS, Polarity, templates
from ..tensors import to_tensor

log = logging.getLogger(__name__)


def _image_pool(records):
    pool = []
    for rec in records:
        pool.append(rec.input_tile)
        pool.extend(rec.targets.values())
    return pool


def _random_texts(rng, n):
    texts = []
    for _ in range(n):
        marker = MARKERS[int(rng.integers(len(MARKERS)))]
        mode = CONCRETE_MODES[int(rng.integers(len(CONCRETE_MODES)))]
        pol = (Polarity.POSITIVE, Polarity.NEGATIVE)[int(rng.integers(2))]
        options = templates(marker, mode, pol)
        texts.append(options[int(rng.integers(len(options)))])
    return texts


def pretrain_base(
    stainer,
    records,
    ae_steps: int = 1500,
    denoise_steps: int = 1000,
    batch_size: int = 16,
    lr: float = 2e-3,
    seed: int = 0,
    log_every: int = 250,
):
    """Fit E/D then Q in place; must run before :func:`apply_lora`."""
    if stainer.lora_attached:
        raise ConfigError("base pretraining must happen before LoRA is attached")
    pool = _image_pool(records)
    if not pool:
        raise ConfigError("no tiles for base pretraining")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)

    def batch():
        idx = rng.integers(len(pool), size=batch_size)
        return to_tensor(np.stack([pool[i] for i in idx]))

    stainer.train()
    ae_params = list(stainer.encoder.parameters()) + list(stainer.decoder.parameters())
    opt = torch.optim.Adam(ae_params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(ae_steps, 1), eta_min=lr * 0.05)
    for step in range(ae_steps):
        x = batch()
        z, _ = stainer.encoder(x)
        recon = stainer.decoder(z)
        loss = F.mse_loss(recon, x) + 0.1 * F.l1_loss(recon, x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if log_every and (step + 1) % log_every == 0:
            log.info("base autoencoder step %d/%d loss %.5f", step + 1, ae_steps, loss.item())

    with torch.no_grad():
        sample = torch.cat([stainer.encoder(batch())[0] for _ in range(8)])
        stainer.latent_scale.fill_(1.0 / float(sample.std().clamp_min(1e-4)))

    sigma = stainer.cfg.noise_sigma
    opt = torch.optim.Adam(stainer.unet.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(denoise_steps, 1), eta_min=lr * 0.05
    )
    for step in range(denoise_steps):
        with torch.no_grad():
            x = stainer.encoder(batch())[0] * stainer.latent_scale
            emb = stainer.pair_encoder.text_embedding(_random_texts(rng, batch_size))
        y = stainer.unet(x + sigma * torch.randn_like(x), emb, stainer.cfg.timestep_index)
        loss = F.mse_loss(y, x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if log_every and (step + 1) % log_every == 0:
            log.info("base denoiser step %d/%d loss %.5f", step + 1, denoise_steps, loss.item())

    stainer.unet.sync_first_layer()
    stainer.unet.forward_calls = 0
    stainer.eval()
    return stainer
