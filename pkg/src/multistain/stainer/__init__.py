from .checkpoint import load_stainer, save_stainer
from .lora import LoRAConv2d, LoRALinear
from .model import (
    EncoderFeatures,
    LatentKind,
    LatentTensor,
    ModelConfig,
    PromptEmbedding,
    Stainer,
    apply_lora,
    designated_layers,
)

__all__ = [
    "EncoderFeatures",
    "LatentKind",
    "LatentTensor",
    "LoRAConv2d",
    "LoRALinear",
    "ModelConfig",
    "PromptEmbedding",
    "Stainer",
    "apply_lora",
    "designated_layers",
    "load_stainer",
    "save_stainer",
]
