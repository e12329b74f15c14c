"""Small contrastive image/text encoder used as the frozen prompt encoder,
perceptual feature extractor, discriminator backbone and FID feature network.
"""

from __future__ import annotations

import hashlib
import logging
import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigError
from ..prompts import (
    CONCRETE_MODES,
    MARKERS,
    Marker,
    Polarity,
    bank_vocabulary,
    templates,
    tokenize,
)
from ..tensors import to_tensor

log = logging.getLogger(__name__)

PAD, OOV = "<pad>", "<oov>"


class Tokenizer:
    def __init__(self, words=None):
        words = bank_vocabulary() if words is None else [w for w in words if w not in (PAD, OOV)]
        self.vocab = [PAD, OOV, *words]
        self.index = {w: i for i, w in enumerate(self.vocab)}

    def __len__(self):
        return len(self.vocab)

    def encode(self, texts: list[str]) -> torch.Tensor:
        ids = []
        for text in texts:
            tokens = tokenize(text)
            if not tokens:
                raise ConfigError(f"prompt {text!r} has no tokens")
            ids.append([self.index.get(t, 1) for t in tokens])
        width = max(len(row) for row in ids)
        return torch.tensor([row + [0] * (width - len(row)) for row in ids], dtype=torch.long)


def _block(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(min(8, cout), cout),
        nn.SiLU(),
    )


class ImageBranch(nn.Module):
    widths = (16, 32, 48, 64)

    def __init__(self, embed_dim: int):
        super().__init__()
        w = self.widths
        self.stem = _block(3, w[0], 1)
        self.stages = nn.ModuleList([_block(w[i], w[i + 1], 2) for i in range(3)])
        self.proj = nn.Linear(w[-1], embed_dim)

    def forward(self, x):
        feats = []
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return self.proj(h.mean(dim=(2, 3))), feats


class TextBranch(nn.Module):
    def __init__(self, vocab_size: int, embed_dim: int, hidden: int = 64):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, hidden, padding_idx=0)
        self.mlp = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, embed_dim))

    def forward(self, ids):
        mask = (ids != 0).float().unsqueeze(-1)
        pooled = (self.embed(ids) * mask).sum(1) / mask.sum(1).clamp_min(1.0)
        return self.mlp(pooled)


class PairEncoder(nn.Module):
    """Image and text branches sharing one embedding space."""

    def __init__(self, embed_dim: int = 32, vocab: list[str] | None = None):
        super().__init__()
        self.embed_dim = embed_dim
        self.tokenizer = Tokenizer(vocab)
        self.image = ImageBranch(embed_dim)
        self.text = TextBranch(len(self.tokenizer), embed_dim)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1 / 0.07)))
        self.validated = False
        self.frozen = False
        self.metrics: dict = {}

    # images are float tensors in [-1, 1], (B, 3, H, W)
    def image_embedding(self, x, normalize=True):
        emb, _ = self.image(x)
        return F.normalize(emb, dim=-1) if normalize else emb

    def image_features(self, x) -> list[torch.Tensor]:
        return self.image(x)[1]

    def text_embedding(self, texts: list[str], normalize=True):
        ids = self.tokenizer.encode(texts)
        emb = self.text(ids)
        return F.normalize(emb, dim=-1) if normalize else emb

    def freeze(self) -> "PairEncoder":
        self.frozen = True
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def checksum(self) -> str:
        return state_checksum(self.state_dict())

    def to_payload(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "vocab": self.tokenizer.vocab,
            "state": {k: v.detach().clone() for k, v in self.state_dict().items()},
            "validated": bool(self.validated),
            "metrics": {k: float(v) for k, v in self.metrics.items()},
            "checksum": self.checksum(),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "PairEncoder":
        enc = cls(payload["embed_dim"], payload["vocab"])
        enc.load_state_dict(payload["state"])
        enc.validated = bool(payload["validated"])
        enc.metrics = dict(payload.get("metrics", {}))
        return enc.freeze()


def state_checksum(state: dict) -> str:
    h = hashlib.sha256()
    for key in sorted(state):
        t = state[key].detach().cpu().contiguous()
        h.update(key.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------ pretraining


def _class_label(marker: str, negative: bool) -> str:
    # negative targets are identical across markers, so they form one class
    return "NEGATIVE" if negative else marker


def _check_classes(records):
    present = {m for r in records if not r.is_negative for m in r.targets}
    missing = [m for m in MARKERS if m not in present]
    if missing:
        raise ConfigError(f"pair-encoder dataset has no positive tiles for marker(s): {missing}")
    if not any(r.is_negative for r in records):
        log.warning("pair-encoder dataset has no negative tiles; negative prompts stay untrained")


def _sample_pairs(records, rng, n):
    images, texts, labels = [], [], []
    for _ in range(n):
        rec = records[int(rng.integers(len(records)))]
        marker = MARKERS[int(rng.integers(len(MARKERS)))]
        polarity = Polarity.NEGATIVE if rec.is_negative else Polarity.POSITIVE
        mode = CONCRETE_MODES[int(rng.integers(len(CONCRETE_MODES)))]
        options = templates(marker, mode, polarity)
        images.append(rec.targets[marker])
        texts.append(options[int(rng.integers(len(options)))])
        labels.append(_class_label(marker, rec.is_negative))
    return to_tensor(np.stack(images)), texts, labels


def contrastive_loss(img_emb, txt_emb, labels, logit_scale):
    """Symmetric InfoNCE; in-batch items of the same class count as positives."""
    logits = logit_scale.exp().clamp(max=100.0) * img_emb @ txt_emb.t()
    lab = np.asarray(labels)
    same = torch.from_numpy((lab[:, None] == lab[None, :]).astype(np.float32))
    target = same / same.sum(1, keepdim=True)
    loss_i = -(target * F.log_softmax(logits, dim=1)).sum(1).mean()
    loss_t = -(target * F.log_softmax(logits.t(), dim=1)).sum(1).mean()
    return 0.5 * (loss_i + loss_t)


@torch.no_grad()
def retrieval_check(encoder: PairEncoder, records, n_pairs: int = 200, seed: int = 0) -> dict:
    """Compare matched vs mismatched prompt similarity on ``n_pairs`` images.

    A positive image's mismatched prompt is the other marker's positive
    prompt; a negative image's is the positive prompt of its marker.
    """
    rng = np.random.default_rng(seed)
    images, matched, mismatched = [], [], []
    for _ in range(n_pairs):
        rec = records[int(rng.integers(len(records)))]
        marker = MARKERS[int(rng.integers(len(MARKERS)))]
        mode = CONCRETE_MODES[int(rng.integers(len(CONCRETE_MODES)))]
        images.append(rec.targets[marker])
        if rec.is_negative:
            good = templates(marker, mode, Polarity.NEGATIVE)
            bad = templates(marker, mode, Polarity.POSITIVE)
        else:
            other = next(m for m in MARKERS if m != marker)
            good = templates(marker, mode, Polarity.POSITIVE)
            bad = templates(other, mode, Polarity.POSITIVE)
        j = int(rng.integers(len(good)))
        matched.append(good[j])
        mismatched.append(bad[j])
    img = encoder.image_embedding(to_tensor(np.stack(images)))
    cos_m = (img * encoder.text_embedding(matched)).sum(-1)
    cos_x = (img * encoder.text_embedding(mismatched)).sum(-1)
    return {
        "retrieval_accuracy": float((cos_m > cos_x).float().mean()),
        "cos_matched": float(cos_m.mean()),
        "cos_mismatched": float(cos_x.mean()),
    }


def pretrain_pair_encoder(
    records,
    steps: int = 2000,
    seed: int = 0,
    embed_dim: int = 32,
    batch_size: int = 32,
    lr: float = 2e-3,
    holdout_fraction: float = 0.1,
    min_accuracy: float = 0.8,
    log_every: int = 200,
) -> PairEncoder:
    """Contrastively train a :class:`PairEncoder` and return it frozen.

    With ``steps == 0`` the untrained encoder comes back flagged unvalidated.
    """
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    records = list(records)
    _check_classes(records)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_hold = max(1, int(round(len(records) * holdout_fraction))) if len(records) > 10 else 0
    held = [records[i] for i in order[:n_hold]] or records
    train = [records[i] for i in order[n_hold:]] or records

    enc = PairEncoder(embed_dim)
    if steps == 0:
        enc.validated = False
        return enc.freeze()

    opt = torch.optim.AdamW(enc.parameters(), lr=lr, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps, eta_min=lr * 0.05)
    enc.train()
    for step in range(steps):
        images, texts, labels = _sample_pairs(train, rng, batch_size)
        images = images + 0.03 * torch.randn_like(images)
        loss = contrastive_loss(
            enc.image_embedding(images), enc.text_embedding(texts), labels, enc.logit_scale
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if log_every and (step + 1) % log_every == 0:
            log.info("pair-encoder step %d/%d loss %.4f", step + 1, steps, loss.item())
    enc.eval()
    enc.metrics = retrieval_check(enc, held, n_pairs=200, seed=seed + 1)
    enc.validated = enc.metrics["retrieval_accuracy"] >= min_accuracy
    if not enc.validated:
        log.warning("pair encoder failed retrieval check: %s", enc.metrics)
    return enc.freeze()
