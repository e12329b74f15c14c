"""Small UNet gland segmenter used for the downstream-segmentation metrics.

One segmenter is trained on stain-rendered tiles (paired protocol) and one
on H&E input tiles (unpaired protocol).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigError, DatasetError
from ..stainer.checkpoint import load_container, save_container
from ..tensors import to_tensor
from .stain import MaskSource, StainMask

log = logging.getLogger(__name__)


class InputKind(str, Enum):
    STAIN = "STAIN"
    INPUT_HE = "INPUT_HE"


@dataclass
class SegConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    steps: int = 800
    batch_size: int = 16
    lr: float = 2e-3
    holdout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(d["widths"])
        return d


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    )


class SegUNet(nn.Module):
    def __init__(self, widths=(16, 32, 64)):
        super().__init__()
        self.down = nn.ModuleList()
        c = 3
        for w in widths:
            self.down.append(_block(c, w))
            c = w
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(nn.ConvTranspose2d(c, w, 2, stride=2))
            self.fuse.append(_block(2 * w, w))
            c = w
        self.head = nn.Conv2d(c, 1, 1)

    def forward(self, x):
        skips = []
        for i, blk in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = blk(x)
            skips.append(x)
        for up, fuse, s in zip(self.up, self.fuse, reversed(skips[:-1])):
            x = fuse(torch.cat([up(x), s], 1))
        return self.head(x)


@dataclass
class SegModel:
    net: SegUNet
    input_kind: InputKind
    cfg: SegConfig
    heldout_dice: float | None = None
    extra: dict = field(default_factory=dict)

    def save(self, path):
        return save_container(path, "segmenter", {
            "state": {k: v.detach().clone() for k, v in self.net.state_dict().items()},
            "input_kind": self.input_kind.value,
            "config": self.cfg.to_dict(),
            "heldout_dice": self.heldout_dice,
        })

    @classmethod
    def load(cls, path) -> "SegModel":
        blob = load_container(path, "segmenter")
        cfg = SegConfig(**blob["config"])
        net = SegUNet(cfg.widths)
        net.load_state_dict(blob["state"])
        net.eval()
        return cls(net, InputKind(blob["input_kind"]), cfg, blob["heldout_dice"])


def _examples(records, kind: InputKind):
    tiles, masks = [], []
    for rec in records:
        if rec.gland_mask is None:
            raise DatasetError(f"record {rec.seed} has no gland mask")
        sources = [rec.input_tile] if kind is InputKind.INPUT_HE else list(rec.targets.values())
        for t in sources:
            tiles.append(t)
            masks.append(rec.gland_mask)
    return np.stack(tiles), np.stack(masks).astype(np.float32)


def _soft_dice(logits, target):
    p = torch.sigmoid(logits)
    inter = (p * target).sum((1, 2, 3))
    denom = p.sum((1, 2, 3)) + target.sum((1, 2, 3))
    return (1 - (2 * inter + 1) / (denom + 1)).mean()


@torch.no_grad()
def predict(net: SegUNet, tiles: np.ndarray, batch: int = 64) -> np.ndarray:
    net.eval()
    out = []
    for i in range(0, len(tiles), batch):
        out.append((net(to_tensor(tiles[i:i + batch]))[:, 0] > 0).numpy())
    return np.concatenate(out) if out else np.zeros((0,) + tiles.shape[1:3], bool)


def train_gland_segmenter(records, input_kind=InputKind.STAIN, cfg: SegConfig | None = None) -> SegModel:
    """Fit a gland segmenter; the held-out split DICE is stored on the model."""
    from .metrics import dice

    cfg = cfg or SegConfig()
    kind = InputKind(input_kind)
    records = list(records)
    if not records:
        raise DatasetError("no records for segmenter training")
    if any(getattr(r, "gland_mask", None) is None for r in records):
        raise DatasetError("segmenter training needs gland masks on every record")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(records))
    n_hold = int(round(cfg.holdout * len(records)))
    if len(records) - n_hold < 1:
        raise ConfigError("holdout leaves no training records")
    hold = [records[i] for i in order[:n_hold]]
    train = [records[i] for i in order[n_hold:]]
    x, y = _examples(train, kind)

    torch.manual_seed(cfg.seed)
    net = SegUNet(cfg.widths)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.steps, 1))
    net.train()
    for step in range(cfg.steps):
        idx = rng.integers(len(x), size=cfg.batch_size)
        xb = to_tensor(x[idx])
        if rng.random() < 0.5:
            xb = xb.flip(-1)
            yb = torch.from_numpy(y[idx][:, None]).flip(-1)
        else:
            yb = torch.from_numpy(y[idx][:, None])
        logits = net(xb)
        loss = F.binary_cross_entropy_with_logits(logits, yb) + _soft_dice(logits, yb)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if (step + 1) % 200 == 0:
            log.info("segmenter[%s] step %d/%d loss %.4f", kind.value, step + 1, cfg.steps, loss.item())
    net.eval()

    held = None
    if hold:
        hx, hy = _examples(hold, kind)
        pred = predict(net, hx)
        held = float(np.mean([dice(p, t.astype(bool)) for p, t in zip(pred, hy)]))
        log.info("segmenter[%s] held-out DICE %.3f", kind.value, held)
    return SegModel(net, kind, cfg, held)


def segment_glands(model: SegModel, tile: np.ndarray) -> StainMask:
    tile = np.asarray(tile)
    if tile.dtype != np.uint8 or tile.ndim != 3 or tile.shape[-1] != 3:
        raise ConfigError(f"expected a uint8 HxWx3 tile, got {tile.dtype} {tile.shape}")
    return StainMask(predict(model.net, tile[None])[0], MaskSource.SEGMENTER)
