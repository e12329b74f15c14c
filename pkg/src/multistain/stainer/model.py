"""Single-step prompt-conditioned latent stainer.

Pipeline: ``x = E(H)``; ``x + z`` with Gaussian ``z``; one UNet call
``y = Q(x + z, t_p)``; ``I = D(y)`` with zero-initialized encoder-to-decoder
skip projections.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
import torch
from torch import nn

from ..errors import ConfigError
from ..prompts import MARKERS, PromptSpec, bank_version
from ..tensors import to_tensor, to_uint8
from ..training.pair_encoder import PairEncoder, state_checksum
from . import lora
from .networks import Decoder, Encoder, LatentUNet


@dataclass
class ModelConfig:
    tile_size: int = 64
    downsample_factor: int = 4
    latent_channels: int = 8
    encoder_widths: tuple[int, ...] = (16, 32, 32)
    unet_widths: tuple[int, ...] = (48, 96)
    text_embed_dim: int = 32
    noise_sigma: float = 0.5
    timestep_index: int = 999
    lora_rank: int = 4
    lora_alpha: float = 16.0
    markers: tuple[str, ...] = MARKERS
    conditioning: str = "film"

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.unet_widths = tuple(int(w) for w in self.unet_widths)
        self.markers = tuple(self.markers)

    @property
    def levels(self) -> int:
        return int(round(math.log2(self.downsample_factor)))

    @property
    def latent_size(self) -> int:
        return self.tile_size // self.downsample_factor

    def validate(self) -> "ModelConfig":
        df = self.downsample_factor
        if df < 1 or 2 ** self.levels != df:
            raise ConfigError(f"downsample_factor must be a power of two, got {df}")
        if self.tile_size % df:
            raise ConfigError(f"tile_size {self.tile_size} not divisible by downsample_factor {df}")
        if len(self.encoder_widths) != self.levels + 1:
            raise ConfigError(
                f"encoder_widths needs {self.levels + 1} entries for downsample_factor {df}"
            )
        if self.latent_size % 2 ** (len(self.unet_widths) - 1):
            raise ConfigError("latent size not divisible by the UNet depth")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.conditioning != "film":
            raise ConfigError(f"unsupported conditioning {self.conditioning!r}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("encoder_widths", "unet_widths", "markers"):
            d[k] = list(d[k])
        return d


class LatentKind(str, Enum):
    CLEAN_INPUT = "CLEAN_INPUT"
    NOISED = "NOISED"
    DENOISED = "DENOISED"


_source_ids = itertools.count(1)


@dataclass
class EncoderFeatures:
    features: list
    source_id: int


@dataclass
class LatentTensor:
    values: torch.Tensor
    kind: LatentKind
    source_id: int
    skip_features: EncoderFeatures | None = field(default=None, repr=False)

    def __post_init__(self):
        if not torch.isfinite(self.values).all():
            raise ValueError(f"non-finite entries in {self.kind.value} latent")


@dataclass
class PromptEmbedding:
    vector: torch.Tensor
    source_text: str

    def __post_init__(self):
        if not torch.isfinite(self.vector).all():
            raise ValueError("non-finite prompt embedding")


class Stainer(nn.Module):
    """Encoder / UNet / decoder plus the frozen prompt encoder.

    Parameter groups: ``base`` (frozen after :func:`apply_lora`), ``lora``,
    ``first_layer`` (``unet.conv_in``) and ``skips``.
    """

    def __init__(self, cfg: ModelConfig, pair_encoder: PairEncoder):
        super().__init__()
        cfg.validate()
        if pair_encoder.embed_dim != cfg.text_embed_dim:
            raise ConfigError(
                f"pair encoder dim {pair_encoder.embed_dim} != text_embed_dim {cfg.text_embed_dim}"
            )
        self.cfg = cfg
        w = cfg.encoder_widths
        self.encoder = Encoder(w, cfg.latent_channels)
        self.unet = LatentUNet(cfg.latent_channels, cfg.unet_widths, cfg.text_embed_dim)
        self.decoder = Decoder(w, cfg.latent_channels)
        self.skips = nn.ModuleList([nn.Conv2d(c, c, 1) for c in w[:-1]])
        for conv in self.skips:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
        self.pair_encoder = pair_encoder.freeze()
        self.register_buffer("latent_scale", torch.tensor(1.0))
        self.lora_attached = False
        self.skips_enabled = True
        self.unet.sync_first_layer()

    # -------------------------------------------------------------- parameters

    def _group_of(self, name: str) -> str:
        if name.startswith("skips."):
            return "skips"
        if name.startswith("unet.conv_in."):
            return "first_layer"
        if ".down.weight" in name or ".up.weight" in name:
            return "lora"
        return "base"

    def param_groups(self) -> dict[str, dict[str, torch.Tensor]]:
        groups = {"base": {}, "lora": {}, "first_layer": {}, "skips": {}}
        for name, p in self.named_parameters():
            if name.startswith("pair_encoder."):
                continue
            groups[self._group_of(name)][name] = p
        return groups

    def base_state(self) -> dict[str, torch.Tensor]:
        state = {k: v for k, v in self.state_dict().items() if self._group_of(k) == "base"}
        return state

    def trainable_state(self) -> dict[str, torch.Tensor]:
        return {
            k: v.detach().clone()
            for k, v in self.state_dict().items()
            if self._group_of(k) != "base"
        }

    def base_checksum(self) -> str:
        return state_checksum(self.base_state())

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def parameter_counts(self) -> dict[str, int]:
        counts = {k: sum(p.numel() for p in g.values()) for k, g in self.param_groups().items()}
        counts["trainable"] = counts["lora"] + counts["first_layer"] + counts["skips"]
        counts["trainable_ratio"] = counts["trainable"] / max(counts["base"], 1)
        return counts

    # --------------------------------------------------------------- switches

    @contextlib.contextmanager
    def base_only(self):
        """Run the frozen base pipeline: LoRA off, skips off, base first layer."""
        prev = (self.skips_enabled, self.unet.use_base_first_layer)
        self.skips_enabled = False
        self.unet.use_base_first_layer = True
        lora.set_enabled(self, False)
        try:
            yield self
        finally:
            self.skips_enabled, self.unet.use_base_first_layer = prev
            lora.set_enabled(self, True)

    # ------------------------------------------------------------- operations

    def _image_tensor(self, tile) -> torch.Tensor:
        if isinstance(tile, torch.Tensor):
            x = tile if tile.dim() == 4 else tile.unsqueeze(0)
        else:
            arr = np.asarray(tile)
            if arr.dtype != np.uint8:
                raise ConfigError(f"expected uint8 RGB tile, got dtype {arr.dtype}")
            x = to_tensor(arr)
        expected = (3, self.cfg.tile_size, self.cfg.tile_size)
        if tuple(x.shape[1:]) != expected:
            raise ConfigError(f"tile shape mismatch: expected {expected}, got {tuple(x.shape[1:])}")
        return x

    def encode_image(self, tile) -> LatentTensor:
        x = self._image_tensor(tile)
        latent, feats = self.encoder(x)
        sid = next(_source_ids)
        return LatentTensor(
            latent * self.latent_scale, LatentKind.CLEAN_INPUT, sid, EncoderFeatures(feats, sid)
        )

    def encode_prompt(self, prompt) -> PromptEmbedding:
        if isinstance(prompt, PromptSpec):
            text = prompt.resolve().text
        else:
            text = str(prompt)
        if not text.strip():
            raise ConfigError("prompt text must be non-empty")
        vec = self.pair_encoder.text_embedding([text])[0]
        return PromptEmbedding(vec, text)

    def noise_like(self, values: torch.Tensor, seed: int) -> torch.Tensor:
        gen = torch.Generator().manual_seed(int(seed))
        return torch.randn(values.shape, generator=gen) * self.cfg.noise_sigma

    def add_noise(self, x: LatentTensor, seed: int) -> LatentTensor:
        if x.kind is not LatentKind.CLEAN_INPUT:
            raise ValueError(f"add_noise expects a CLEAN_INPUT latent, got {x.kind.value}")
        values = x.values if self.cfg.noise_sigma == 0 else x.values + self.noise_like(x.values, seed)
        return LatentTensor(values, LatentKind.NOISED, x.source_id, x.skip_features)

    def _embedding_tensor(self, t_p, batch: int) -> torch.Tensor:
        vec = t_p.vector if isinstance(t_p, PromptEmbedding) else t_p
        if vec.shape[-1] != self.cfg.text_embed_dim:
            raise ConfigError(
                f"prompt embedding dim {vec.shape[-1]} != text_embed_dim {self.cfg.text_embed_dim}"
            )
        return vec.expand(batch, -1) if vec.dim() == 1 else vec

    def denoise_step(self, xn: LatentTensor, t_p) -> LatentTensor:
        if xn.kind is not LatentKind.NOISED:
            raise ValueError(f"denoise_step expects a NOISED latent, got {xn.kind.value}")
        emb = self._embedding_tensor(t_p, xn.values.shape[0])
        y = self.unet(xn.values, emb, self.cfg.timestep_index)
        return LatentTensor(y, LatentKind.DENOISED, xn.source_id, xn.skip_features)

    def decode_latent(self, y: LatentTensor, skip_features: EncoderFeatures | None = None,
                      use_skips: bool = True) -> torch.Tensor:
        """Decode to images in [-1, 1], shape ``(B, 3, H, W)``."""
        skips = None
        if use_skips and self.skips_enabled:
            if skip_features is None:
                raise ValueError("decode_latent needs the encoder skip features of this latent")
            if skip_features.source_id != y.source_id:
                raise ValueError(
                    f"stale skip features: latent from encode #{y.source_id}, "
                    f"features from encode #{skip_features.source_id}"
                )
            skips = [proj(f) for proj, f in zip(self.skips, skip_features.features)]
        return self.decoder(y.values / self.latent_scale, skips)

    def forward(self, images: torch.Tensor, text_emb: torch.Tensor, noise: torch.Tensor | None = None):
        """Batched differentiable pipeline on [-1, 1] tensors (one UNet call)."""
        x = self.encode_image(images)
        if noise is not None:
            xn = LatentTensor(x.values + noise, LatentKind.NOISED, x.source_id, x.skip_features)
        else:
            xn = LatentTensor(x.values, LatentKind.NOISED, x.source_id, x.skip_features)
        y = self.denoise_step(xn, text_emb)
        return self.decode_latent(y, x.skip_features)

    @torch.no_grad()
    def virtual_stain(self, tile, prompt, seed: int = 0) -> np.ndarray:
        """H&E tile (uint8 HWC) + prompt -> stained tile (uint8 HWC)."""
        before = self.unet.forward_calls
        x = self.encode_image(tile)
        xn = self.add_noise(x, seed)
        y = self.denoise_step(xn, self.encode_prompt(prompt))
        out = self.decode_latent(y, x.skip_features)
        calls = self.unet.forward_calls - before
        if calls != 1:
            raise RuntimeError(f"single-step contract violated: {calls} UNet calls")
        result = to_uint8(out)
        return result[0] if np.asarray(tile).ndim == 3 else result

    def model_card(self) -> dict:
        return {
            "prompt_bank_version": bank_version(),
            "markers": list(self.cfg.markers),
            "conditioning": "feature-wise modulation (FiLM) at every UNet block",
            "pair_encoder_checksum": self.pair_encoder.checksum(),
        }


# LoRA targets: every linear and spatial conv except the RGB-facing convs and
# the trainable first UNet layer; 1x1 convs are left to the base.
def designated_layers(stainer: Stainer) -> dict[str, list[str]]:
    def names(module, exclude):
        out = []
        for name, m in module.named_modules():
            if name in exclude:
                continue
            if isinstance(m, nn.Linear) or (isinstance(m, nn.Conv2d) and m.kernel_size != (1, 1)):
                out.append(name)
        return out

    return {
        "encoder": names(stainer.encoder, {"conv_in"}),
        "unet": names(stainer.unet, {"conv_in", "conv_in_base"}),
        "decoder": names(stainer.decoder, {"conv_out"}),
    }


def apply_lora(stainer: Stainer, cfg: ModelConfig | None = None) -> Stainer:
    """Freeze the base and attach rank-r adapters; returns the same object."""
    cfg = cfg or stainer.cfg
    if stainer.lora_attached:
        raise ConfigError("LoRA already attached")
    stainer.unet.sync_first_layer()
    for p in stainer.parameters():
        p.requires_grad_(False)
    for part, names in designated_layers(stainer).items():
        lora.inject(getattr(stainer, part), names, cfg.lora_rank, cfg.lora_alpha)
    for p in itertools.chain(stainer.unet.conv_in.parameters(), stainer.skips.parameters()):
        p.requires_grad_(True)
    for layer in lora.lora_layers(stainer):
        for p in itertools.chain(layer.down.parameters(), layer.up.parameters()):
            p.requires_grad_(True)
    stainer.lora_attached = True
    return stainer
