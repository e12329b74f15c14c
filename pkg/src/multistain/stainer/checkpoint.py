"""Versioned checkpoint container shared by stainer, pair encoder and segmenters."""

from __future__ import annotations

from pathlib import Path

import torch

from ..errors import CheckpointError
from ..training.pair_encoder import PairEncoder
from .model import ModelConfig, Stainer, apply_lora

FORMAT = "multistain-checkpoint"
VERSION = 1


def save_container(path, kind: str, payload: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({"format": FORMAT, "version": VERSION, "kind": kind, **payload}, tmp)
    tmp.replace(path)
    return path


def load_container(path, kind: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if blob.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    if blob.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {blob.get('kind')!r} checkpoint, expected {kind!r}")
    return blob


def save_pair_encoder(path, encoder: PairEncoder):
    return save_container(path, "pair_encoder", {"encoder": encoder.to_payload()})


def load_pair_encoder(path) -> PairEncoder:
    return PairEncoder.from_payload(load_container(path, "pair_encoder")["encoder"])


def save_stainer(path, stainer: Stainer, metadata: dict | None = None):
    """Write config, base weights + checksum, trainable tensors and model card."""
    payload = {
        "model_config": stainer.cfg.to_dict(),
        "lora_attached": stainer.lora_attached,
        "base_checksum": stainer.base_checksum(),
        "base_state": {k: v.detach().clone() for k, v in stainer.base_state().items()},
        "trainable_state": stainer.trainable_state(),
        "pair_encoder": stainer.pair_encoder.to_payload(),
        "model_card": stainer.model_card(),
        "metadata": dict(metadata or {}),
    }
    return save_container(path, "stainer", payload)


def load_stainer(path) -> tuple[Stainer, dict]:
    blob = load_container(path, "stainer")
    encoder = PairEncoder.from_payload(blob["pair_encoder"])
    stainer = Stainer(ModelConfig(**blob["model_config"]), encoder)
    if blob["lora_attached"]:
        apply_lora(stainer)
    state = {**blob["base_state"], **blob["trainable_state"]}
    missing, unexpected = stainer.load_state_dict(
        {**state, **{f"pair_encoder.{k}": v for k, v in encoder.state_dict().items()}},
        strict=False,
    )
    if missing or unexpected:
        raise CheckpointError(f"{path}: state mismatch (missing={missing}, unexpected={unexpected})")
    if stainer.base_checksum() != blob["base_checksum"]:
        raise CheckpointError(f"{path}: base checksum mismatch")
    stainer.eval()
    meta = dict(blob["metadata"])
    meta["model_card"] = blob["model_card"]
    return stainer, meta
