"""Uniplex data pipeline, alternating generator/discriminator updates and
the checkpointed training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigError, TrainingError
from ..prompts import MARKERS, Marker, Polarity, PromptMode, PromptSpec, build_prompt
from ..stainer.checkpoint import save_stainer
from ..stainer.model import Stainer
from ..tensors import to_tensor
from .losses import (
    DiscriminatorHead,
    LossBreakdown,
    alignment_from_embeddings,
    hinge_d,
    hinge_g,
    perceptual_from_features,
    total_loss,
)

log = logging.getLogger(__name__)

TRAIN_MODES = ("SP", "MP", "LP", "MxP", "Num", "SMPP", "SMP")
LOG_COLUMNS = ("step", "l2", "perceptual", "clip", "adv_g", "adv_d", "total")


@dataclass
class TrainConfig:
    w_adv: float = 0.4
    w_clip: float = 4.0
    batch_size: int = 1
    total_steps: int = 5000
    lr_generator: float = 1e-4
    lr_discriminator: float = 2e-4
    seed: int = 0
    checkpoint_every: int = 1000
    prompt_mode: str = "MxP"
    log_every: int = 500
    allow_unvalidated: bool = False
    base_ae_steps: int = 1500
    base_denoise_steps: int = 1000
    base_batch_size: int = 16
    base_lr: float = 2e-3

    def validate(self) -> "TrainConfig":
        if self.w_adv < 0 or self.w_clip < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.prompt_mode not in TRAIN_MODES:
            raise ConfigError(
                f"unknown prompt_mode {self.prompt_mode!r}; choose from {', '.join(TRAIN_MODES)}"
            )
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ModePlan:
    """How a training prompt mode maps onto data and prompt texts."""

    markers: tuple[str, ...]
    include_negatives: bool
    text_mode: PromptMode
    inference_mode: PromptMode


def mode_plan(prompt_mode: str) -> ModePlan:
    if prompt_mode == "SMPP":
        return ModePlan((Marker.NUCLEAR.value,), False, PromptMode.MxP, PromptMode.SP)
    if prompt_mode == "SMP":
        return ModePlan((Marker.NUCLEAR.value,), True, PromptMode.MxP, PromptMode.SP)
    mode = PromptMode(prompt_mode)
    inference = PromptMode.SP if mode is PromptMode.MxP else mode
    return ModePlan(MARKERS, True, mode, inference)


@dataclass
class BatchItem:
    record_index: int
    input_tile: np.ndarray
    marker: str
    target: np.ndarray
    prompt: PromptSpec


def check_uniplex(items: list[BatchItem]):
    """Reject any batch that pairs one input with more than one marker."""
    seen: dict[int, str] = {}
    for item in items:
        if not isinstance(item.marker, str) or item.marker not in MARKERS:
            raise ConfigError(f"batch item must carry exactly one marker, got {item.marker!r}")
        if np.asarray(item.target).ndim != 3:
            raise ConfigError("batch item must carry exactly one target image")
        prev = seen.setdefault(item.record_index, item.marker)
        if prev != item.marker:
            raise ConfigError(
                f"multiplex batch: input {item.record_index} paired with {prev} and {item.marker}"
            )


class UniplexSampler:
    """Binds every record to a single marker, mimicking a uniplex corpus."""

    def __init__(self, records, prompt_mode: str = "MxP"):
        self.plan = mode_plan(prompt_mode)
        self.records = list(records)
        self.items = []
        for i, rec in enumerate(self.records):
            if rec.is_negative and not self.plan.include_negatives:
                continue
            marker = self.plan.markers[rec.seed % len(self.plan.markers)]
            if marker not in rec.targets:
                continue
            self.items.append((i, marker))
        if not self.items:
            raise ConfigError(f"no training pairs for prompt mode {prompt_mode}")

    def sample(self, rng: np.random.Generator, batch_size: int) -> list[BatchItem]:
        batch = []
        for _ in range(batch_size):
            i, marker = self.items[int(rng.integers(len(self.items)))]
            rec = self.records[i]
            polarity = Polarity.NEGATIVE if rec.is_negative else Polarity.POSITIVE
            prompt = build_prompt(marker, self.plan.text_mode, polarity).resolve(rng)
            batch.append(BatchItem(i, rec.input_tile, marker, rec.targets[marker], prompt))
        check_uniplex(batch)
        return batch


@dataclass
class TrainerState:
    stainer: Stainer
    head: DiscriminatorHead
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0
    base_checksum: str = ""
    encoder_checksum: str = ""
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, stainer: Stainer, cfg: TrainConfig) -> "TrainerState":
        if not stainer.lora_attached:
            raise ConfigError("attach LoRA adapters before training")
        torch.manual_seed(cfg.seed)
        head = DiscriminatorHead(stainer.pair_encoder.image.widths[1:])
        opt_g = torch.optim.Adam(stainer.trainable_parameters(), lr=cfg.lr_generator, betas=(0.5, 0.999))
        opt_d = torch.optim.Adam(head.parameters(), lr=cfg.lr_discriminator, betas=(0.5, 0.999))
        return cls(stainer, head, opt_g, opt_d, 0, stainer.base_checksum(),
                   stainer.pair_encoder.checksum())

    def snapshot(self) -> dict:
        return {
            "stainer": {k: v.clone() for k, v in self.stainer.trainable_state().items()},
            "head": {k: v.detach().clone() for k, v in self.head.state_dict().items()},
        }

    def restore(self, snap: dict):
        self.stainer.load_state_dict(snap["stainer"], strict=False)
        self.head.load_state_dict(snap["head"])

    def verify_frozen(self):
        if self.stainer.base_checksum() != self.base_checksum:
            raise TrainingError("frozen base parameters changed during training")
        if self.stainer.pair_encoder.checksum() != self.encoder_checksum:
            raise TrainingError("frozen pair encoder changed during training")


def step_noise(stainer: Stainer, batch_size: int, seed: int, step: int) -> torch.Tensor:
    cfg = stainer.cfg
    shape = (batch_size, cfg.latent_channels, cfg.latent_size, cfg.latent_size)
    gen = torch.Generator().manual_seed(int(seed) * 1_000_003 + int(step))
    return torch.randn(shape, generator=gen) * cfg.noise_sigma


def generator_losses(stainer, head, inputs, targets, text_emb, noise, cfg, step=None):
    """Forward the generator and assemble the generator-side objective."""
    enc = stainer.pair_encoder
    gen = stainer(inputs, text_emb, noise)
    emb_gen, feats_gen = enc.image(gen)
    with torch.no_grad():
        feats_gt = enc.image_features(targets)
    parts = {
        "l2": F.mse_loss(gen, targets),
        "perceptual": perceptual_from_features(feats_gen, feats_gt),
        "clip": alignment_from_embeddings(F.normalize(emb_gen, dim=-1), text_emb),
        "adv_g": hinge_g(head.frozen_call(feats_gen)),
    }
    return gen, feats_gen, feats_gt, total_loss(parts, cfg, step)


def train_step(state: TrainerState, batch: list[BatchItem], cfg: TrainConfig):
    """One generator update followed by one discriminator update."""
    check_uniplex(batch)
    stainer, head = state.stainer, state.head
    stainer.train()
    inputs = to_tensor(np.stack([b.input_tile for b in batch]))
    targets = to_tensor(np.stack([b.target for b in batch]))
    with torch.no_grad():
        text_emb = stainer.pair_encoder.text_embedding([b.prompt.text for b in batch])
    noise = step_noise(stainer, len(batch), cfg.seed, state.step)

    try:
        gen, feats_gen, feats_gt, parts = generator_losses(
            stainer, head, inputs, targets, text_emb, noise, cfg, state.step
        )
    except ValueError as exc:
        # latent contracts reject non-finite activations
        raise TrainingError(f"{exc} at step {state.step}") from exc
    state.opt_g.zero_grad()
    parts.total.backward()
    state.opt_g.step()

    adv_d = hinge_d(head(feats_gt), head([f.detach() for f in feats_gen]))
    state.opt_d.zero_grad()
    adv_d.backward()
    state.opt_d.step()
    parts.adv_d = adv_d.detach()

    state.step += 1
    return state, LossBreakdown(**{k: float(v) for k, v in parts.as_floats().items()})


@dataclass
class CheckpointMeta:
    path: Path | None
    step: int
    base_checksum: str
    pair_encoder_checksum: str
    prompt_mode: str
    loss_log: Path | None
    history: list[dict]


def _params_finite(state: TrainerState) -> bool:
    tensors = list(state.stainer.trainable_parameters()) + list(state.head.parameters())
    return all(torch.isfinite(p).all() for p in tensors)


def _checkpoint_metadata(state: TrainerState, cfg: TrainConfig, plan: ModePlan) -> dict:
    return {
        "step": state.step,
        "prompt_mode": cfg.prompt_mode,
        "markers_trained": list(plan.markers),
        "inference_prompt_mode": plan.inference_mode.value,
        "train_config": cfg.to_dict(),
        "pair_encoder_checksum": state.encoder_checksum,
        "discriminator_head": {k: v.detach().clone() for k, v in state.head.state_dict().items()},
    }


def train_loop(records, cfg: TrainConfig, stainer: Stainer, out_dir=None,
               state: TrainerState | None = None) -> CheckpointMeta:
    """Train LoRA/skip/first-layer weights on uniplex pairs.

    Writes ``loss_log.csv``, cadence checkpoints and ``stainer.pt`` when
    ``out_dir`` is given. A non-finite loss or parameter halts training after
    writing ``last_good.pt`` from the last parameters that gave a finite loss.
    """
    cfg.validate()
    if not stainer.pair_encoder.validated and not cfg.allow_unvalidated:
        raise ConfigError(
            "pair encoder is flagged unvalidated; pretrain it or pass allow_unvalidated"
        )
    plan = mode_plan(cfg.prompt_mode)
    sampler = UniplexSampler(records, cfg.prompt_mode)
    state = state or TrainerState.create(stainer, cfg)
    rng = np.random.default_rng(cfg.seed)

    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    writer = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_path = out / "loss_log.csv"
        fh = log_path.open("a", newline="")
        writer = csv.writer(fh)
        if log_path.stat().st_size == 0:
            writer.writerow(LOG_COLUMNS)

    # params that last produced a finite loss; an update can be finite yet blow up the next forward
    good = state.snapshot()
    try:
        for _ in range(cfg.total_steps):
            batch = sampler.sample(rng, cfg.batch_size)
            snap = state.snapshot()
            try:
                _, parts = train_step(state, batch, cfg)
                if not _params_finite(state):
                    raise TrainingError(f"non-finite parameters after step {state.step}")
            except TrainingError:
                state.restore(good)
                if out is not None:
                    save_stainer(out / "last_good.pt", stainer, _checkpoint_metadata(state, cfg, plan))
                raise
            good = snap
            row = parts.as_floats()
            row["step"] = state.step
            state.history.append(row)
            if writer is not None:
                writer.writerow([row[c] if c == "step" else repr(row[c]) for c in LOG_COLUMNS])
            if cfg.log_every and state.step % cfg.log_every == 0:
                log.info("step %d total %.4f rec %.4f clip %.4f adv_g %.4f adv_d %.4f",
                         state.step, row["total"], row["rec"], row["clip"], row["adv_g"], row["adv_d"])
            if out is not None and state.step % cfg.checkpoint_every == 0:
                state.verify_frozen()
                save_stainer(out / "checkpoints" / f"step_{state.step:06d}.pt", stainer,
                             _checkpoint_metadata(state, cfg, plan))
    finally:
        if writer is not None:
            fh.close()

    state.verify_frozen()
    stainer.eval()
    path = None
    if out is not None:
        path = save_stainer(out / "stainer.pt", stainer, _checkpoint_metadata(state, cfg, plan))
    return CheckpointMeta(path, state.step, state.base_checksum, state.encoder_checksum,
                          cfg.prompt_mode, log_path, state.history)


def loss_identity_error(row: dict, w_clip: float = 4.0, w_adv: float = 0.4) -> float:
    rec = row["l2"] + row["perceptual"]
    return abs(row["total"] - (rec + w_clip * row["clip"] + w_adv * row["adv_g"]))


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def loss_trend(history: list[dict]) -> tuple[float, float]:
    """Median total over the first and last 10% of steps."""
    totals = np.array([h["total"] for h in history])
    k = max(1, int(math.ceil(0.1 * len(totals))))
    return float(np.median(totals[:k])), float(np.median(totals[-k:]))
