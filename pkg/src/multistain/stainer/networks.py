"""Building blocks of the image encoder, latent UNet and decoder."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def _groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm = nn.GroupNorm(_groups(cout), cout)

    def forward(self, x):
        return F.silu(self.norm(self.conv(x)))


class Upsample(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Encoder(nn.Module):
    """RGB in [-1, 1] -> latent at 1/2**levels resolution, plus per-level features."""

    def __init__(self, widths, latent_channels):
        super().__init__()
        self.conv_in = nn.Conv2d(3, widths[0], 3, padding=1)
        self.blocks = nn.ModuleList([ConvBlock(w, w) for w in widths[:-1]])
        self.downs = nn.ModuleList(
            [ConvBlock(widths[i], widths[i + 1], stride=2) for i in range(len(widths) - 1)]
        )
        self.mid = ConvBlock(widths[-1], widths[-1])
        self.conv_out = nn.Conv2d(widths[-1], latent_channels, 1)

    def forward(self, x):
        h = F.silu(self.conv_in(x))
        feats = []
        for block, down in zip(self.blocks, self.downs):
            h = block(h)
            feats.append(h)
            h = down(h)
        return self.conv_out(self.mid(h)), feats


class Decoder(nn.Module):
    def __init__(self, widths, latent_channels):
        super().__init__()
        self.conv_in = nn.Conv2d(latent_channels, widths[-1], 3, padding=1)
        self.mid = ConvBlock(widths[-1], widths[-1])
        n = len(widths) - 1
        # ups[j] goes from level n-j to level n-j-1
        self.ups = nn.ModuleList([Upsample(widths[n - j], widths[n - j - 1]) for j in range(n)])
        self.blocks = nn.ModuleList([ConvBlock(widths[n - j - 1], widths[n - j - 1]) for j in range(n)])
        self.conv_out = nn.Conv2d(widths[0], 3, 3, padding=1)

    def forward(self, z, skips=None):
        """``skips`` is a per-level list (level 0 = full resolution) of tensors to add."""
        h = self.mid(F.silu(self.conv_in(z)))
        n = len(self.ups)
        for j, (up, block) in enumerate(zip(self.ups, self.blocks)):
            h = up(h)
            if skips is not None:
                h = h + skips[n - j - 1]
            h = block(h)
        return torch.tanh(self.conv_out(h))


def timestep_embedding(t: int, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = float(t) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)])


class ResBlock(nn.Module):
    """Residual block with feature-wise (scale, shift) modulation from the condition."""

    def __init__(self, cin, cout, cond_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.film = nn.Linear(cond_dim, 2 * cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.shortcut = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, cond):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(cond)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.shortcut(x)


class LatentUNet(nn.Module):
    """Prompt-conditioned denoiser operating on latents.

    ``conv_in`` is the trainable first layer; ``conv_in_base`` keeps the
    frozen pretrained copy so the base pipeline stays reproducible.
    """

    time_dim = 32

    def __init__(self, latent_channels, widths, text_dim, cond_dim=64):
        super().__init__()
        self.conv_in = nn.Conv2d(latent_channels, widths[0], 3, padding=1)
        self.conv_in_base = nn.Conv2d(latent_channels, widths[0], 3, padding=1)
        self.cond_mlp = nn.Sequential(
            nn.Linear(text_dim + self.time_dim, cond_dim), nn.SiLU(), nn.Linear(cond_dim, cond_dim)
        )
        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        cin = widths[0]
        for i, w in enumerate(widths):
            self.down_blocks.append(ResBlock(cin, w, cond_dim))
            if i < len(widths) - 1:
                self.downsamplers.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
            cin = w
        self.mid = ResBlock(widths[-1], widths[-1], cond_dim)
        self.upsamplers = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for i in reversed(range(len(widths) - 1)):
            self.upsamplers.append(Upsample(widths[i + 1], widths[i]))
            self.up_blocks.append(ResBlock(2 * widths[i], widths[i], cond_dim))
        self.norm_out = nn.GroupNorm(_groups(widths[0]), widths[0])
        self.conv_out = nn.Conv2d(widths[0], latent_channels, 3, padding=1)
        self.forward_calls = 0
        self.use_base_first_layer = False

    def sync_first_layer(self):
        """Copy the trainable first layer into the frozen base copy."""
        self.conv_in_base.load_state_dict(self.conv_in.state_dict())

    def forward(self, x, text_emb, timestep: int):
        self.forward_calls += 1
        t = timestep_embedding(timestep, self.time_dim).to(x).expand(x.shape[0], -1)
        cond = self.cond_mlp(torch.cat([text_emb, t], dim=1))
        first = self.conv_in_base if self.use_base_first_layer else self.conv_in
        h = first(x)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, cond)
            if i < len(self.downsamplers):
                skips.append(h)
                h = self.downsamplers[i](h)
        h = self.mid(h, cond)
        for up, block in zip(self.upsamplers, self.up_blocks):
            h = up(h)
            h = block(torch.cat([h, skips.pop()], dim=1), cond)
        return self.conv_out(F.silu(self.norm_out(h)))
