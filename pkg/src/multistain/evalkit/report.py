"""Paired / unpaired evaluation of stainer outputs and report files."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from ..errors import ConfigError, DatasetError
from ..prompts import Marker, Polarity, PromptMode, build_prompt
from ..tensors import to_tensor
from . import metrics
from .segmentation import InputKind, SegModel, predict
from .stain import DEFAULT_THRESHOLD, StainMatrix, dab_mask

log = logging.getLogger(__name__)


class Protocol(str, Enum):
    PAIRED = "PAIRED"
    UNPAIRED = "UNPAIRED"


SEG_FIELDS = ("seg_dice", "seg_iou", "seg_hausdorff")
PAIRED_FIELDS = ("mse_pct", "ssim_pct", "fid") + SEG_FIELDS + (
    "dab_dice", "dab_iou", "dab_hausdorff", "negative_fp_pct")
FIELDS = {Protocol.PAIRED: PAIRED_FIELDS, Protocol.UNPAIRED: SEG_FIELDS}


@dataclass
class MetricsReport:
    """Per-marker metrics. dice/iou are fractions in [0, 1]; *_pct are percent."""

    protocol: Protocol
    model_id: str
    tile_count: int
    per_marker: dict[str, dict[str, float]]
    stain_matrix: dict = field(default_factory=lambda: StainMatrix.default().to_dict())
    threshold: float = DEFAULT_THRESHOLD
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.protocol = Protocol(self.protocol)
        allowed = set(FIELDS[self.protocol])
        for marker, vals in self.per_marker.items():
            unknown = set(vals) - allowed
            if unknown:
                raise ConfigError(f"{self.protocol.value} report cannot hold {sorted(unknown)} for {marker}")
            for k, v in vals.items():
                if k.endswith("_pct") and not (-1e-9 <= v <= 100 + 1e-9):
                    raise ValueError(f"{marker}.{k}={v} outside [0, 100]")

    def header(self) -> dict:
        return {
            "protocol": self.protocol.value,
            "model_id": self.model_id,
            "tile_count": self.tile_count,
            "stain_matrix": self.stain_matrix,
            "dab_threshold_od": self.threshold,
            "units": {"dice": "fraction", "iou": "fraction", "hausdorff": "pixels",
                      "mse_pct": "mean squared error on [0,1] pixels x 100",
                      "ssim_pct": "SSIM x 100", "negative_fp_pct": "percent of pixels"},
        }

    def to_dict(self) -> dict:
        return {"header": self.header(), "per_marker": self.per_marker, "extra": self.extra}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        h = d["header"]
        return cls(h["protocol"], h["model_id"], h["tile_count"], d["per_marker"],
                   h["stain_matrix"], h["dab_threshold_od"], d.get("extra", {}))

    def write(self, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out / f"{stem}.json", out / f"{stem}.csv"
        jpath.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        cols = FIELDS[self.protocol]
        with cpath.open("w", newline="") as fh:
            fh.write(f"# stain_matrix={json.dumps(self.stain_matrix['rows'])}\n")
            fh.write(f"# dab_threshold_od={self.threshold}\n")
            w = csv.writer(fh)
            w.writerow(["model_id", "protocol", "marker", "tile_count", *cols])
            for marker, vals in self.per_marker.items():
                w.writerow([self.model_id, self.protocol.value, marker, self.tile_count,
                            *[repr(vals[c]) if c in vals else "" for c in cols]])
        return jpath, cpath


def read_report(path) -> MetricsReport:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"report not found: {path}")
    return MetricsReport.from_dict(json.loads(path.read_text()))


def _mask_scores(preds, gts, prefix):
    return {
        f"{prefix}_dice": float(np.mean([metrics.dice(p, g) for p, g in zip(preds, gts)])),
        f"{prefix}_iou": float(np.mean([metrics.iou(p, g) for p, g in zip(preds, gts)])),
        f"{prefix}_hausdorff": float(np.mean([metrics.hausdorff(p, g) for p, g in zip(preds, gts)])),
    }


def pair_encoder_extractor(encoder):
    """Unnormalized image embeddings from a frozen pair encoder, as numpy."""

    @torch.no_grad()
    def extract(tiles):
        tiles = np.asarray(tiles)
        return np.concatenate([
            encoder.image_embedding(to_tensor(tiles[i:i + 128]), normalize=False).numpy()
            for i in range(0, len(tiles), 128)
        ])

    return extract


def _check_segmenter(seg: SegModel | None, kind: InputKind, role: str):
    if seg is None:
        raise ConfigError(f"{role} segmenter required")
    if seg.input_kind is not kind:
        raise ConfigError(f"{role} segmenter must be trained on {kind.value}, got {seg.input_kind.value}")


def evaluate_outputs(generated: dict, records, protocol=Protocol.PAIRED, *,
                     stain_segmenter: SegModel | None = None,
                     he_segmenter: SegModel | None = None,
                     extractor=None, matrix: StainMatrix | None = None,
                     threshold: float = DEFAULT_THRESHOLD, model_id: str = "model",
                     fid_shrinkage: bool = True) -> MetricsReport:
    """Score ``generated[marker]`` (uint8 tiles aligned with ``records``)."""
    protocol = Protocol(protocol)
    matrix = matrix or StainMatrix.default()
    records = list(records)
    if not records:
        raise DatasetError("no records to evaluate")
    _check_segmenter(stain_segmenter, InputKind.STAIN, "stain")
    per_marker = {}
    he_masks = None
    if protocol is Protocol.UNPAIRED:
        _check_segmenter(he_segmenter, InputKind.INPUT_HE, "H&E")
        he_masks = predict(he_segmenter.net, np.stack([r.input_tile for r in records]))
    for marker, gen in generated.items():
        marker = Marker(marker).value
        gen = np.asarray(gen)
        if len(gen) != len(records):
            raise ConfigError(f"{marker}: {len(gen)} outputs for {len(records)} records")
        seg_gen = predict(stain_segmenter.net, gen)
        if protocol is Protocol.UNPAIRED:
            per_marker[marker] = _mask_scores(seg_gen, he_masks, "seg")
            continue
        missing = [r.seed for r in records if r.targets is None or marker not in r.targets]
        if missing:
            raise DatasetError(f"PAIRED protocol needs {marker} targets; missing for seeds {missing[:5]}")
        gt = np.stack([r.targets[marker] for r in records])
        vals = {
            "mse_pct": float(np.mean([metrics.mse_pct(a, b) for a, b in zip(gen, gt)])),
            "ssim_pct": float(np.mean([metrics.ssim_pct(a, b) for a, b in zip(gen, gt)])),
        }
        vals["fid"] = (metrics.fid(gen, gt, extractor, shrinkage=fid_shrinkage)
                       if extractor is not None else float("nan"))
        vals.update(_mask_scores(seg_gen, predict(stain_segmenter.net, gt), "seg"))
        gen_dab = [dab_mask(t, matrix, threshold).pixels for t in gen]
        gt_dab = [dab_mask(t, matrix, threshold).pixels for t in gt]
        vals.update(_mask_scores(gen_dab, gt_dab, "dab"))
        neg = [m.mean() for m, r in zip(gen_dab, records) if r.is_negative]
        vals["negative_fp_pct"] = float(np.mean(neg) * 100) if neg else 0.0
        per_marker[marker] = vals
    return MetricsReport(protocol, model_id, len(records), per_marker, matrix.to_dict(), threshold)


def stain_all(stainer, records, mode=PromptMode.SP, markers=None) -> dict[str, np.ndarray]:
    """Single-step inference per marker with the positive prompt of ``mode``;
    negative tiles get the same positive prompt as any other tile."""
    markers = markers or stainer.cfg.markers
    out = {}
    for m in markers:
        prompt = build_prompt(m, mode, Polarity.POSITIVE)
        out[Marker(m).value] = np.stack([
            stainer.virtual_stain(r.input_tile, prompt, seed=r.seed) for r in records
        ])
    return out


def evaluate_pairset(stainer, records, protocol=Protocol.PAIRED, *, stain_segmenter=None,
                     he_segmenter=None, matrix=None, threshold=DEFAULT_THRESHOLD,
                     model_id="model", inference_mode=PromptMode.SP) -> MetricsReport:
    records = list(records)
    protocol = Protocol(protocol)
    if protocol is Protocol.PAIRED and any(r.targets is None for r in records):
        raise DatasetError("PAIRED protocol requires target stains on every record")
    generated = stain_all(stainer, records, inference_mode)
    report = evaluate_outputs(
        generated, records, protocol, stain_segmenter=stain_segmenter, he_segmenter=he_segmenter,
        extractor=pair_encoder_extractor(stainer.pair_encoder), matrix=matrix,
        threshold=threshold, model_id=model_id,
    )
    if protocol is Protocol.PAIRED:
        report.extra["compartment"] = compartment_scores(generated, records, matrix, threshold)
    return report


def compartment_scores(generated: dict, records, matrix=None, threshold=DEFAULT_THRESHOLD) -> dict:
    """DAB-mask DICE of each prompt's outputs against each compartment on
    positive tiles, plus the DAB-positive pixel fraction on negative tiles."""
    matrix = matrix or StainMatrix.default()
    pos = [i for i, r in enumerate(records) if not r.is_negative]
    neg = [i for i, r in enumerate(records) if r.is_negative]
    out = {}
    for marker, gen in generated.items():
        masks = [dab_mask(t, matrix, threshold).pixels for t in gen]
        row = {}
        for comp in Marker:
            gts = [records[i].compartment_mask(comp) for i in pos]
            row[f"dice_vs_{comp.value}"] = (
                float(np.mean([metrics.dice(masks[i], g) for i, g in zip(pos, gts)])) if pos else float("nan"))
        row["negative_fp_fraction"] = float(np.mean([masks[i].mean() for i in neg])) if neg else 0.0
        out[Marker(marker).value] = row
    return out
