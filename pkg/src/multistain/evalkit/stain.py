"""Optical-density color deconvolution and DAB-channel masks."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..errors import ConfigError

HEMATOXYLIN = (0.650, 0.704, 0.286)
DAB = (0.269, 0.568, 0.778)
DEFAULT_THRESHOLD = 0.15
MAX_CONDITION = 1e4


class MaskSource(str, Enum):
    DAB_THRESH = "DAB_THRESH"
    SEGMENTER = "SEGMENTER"
    GROUND_TRUTH = "GROUND_TRUTH"


@dataclass(frozen=True)
class StainMatrix:
    """Rows are unit OD vectors: hematoxylin, complement, DAB.

    The complement row stands in for eosin on H-DAB slides.
    """

    rows: np.ndarray
    names: tuple[str, str, str] = ("hematoxylin", "eosin", "dab")

    def __post_init__(self):
        m = np.asarray(self.rows, dtype=np.float64)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise ConfigError(f"stain matrix must be a finite 3x3 array, got shape {m.shape}")
        norms = np.linalg.norm(m, axis=1)
        if np.any(norms < 1e-12):
            raise ConfigError("stain matrix has a zero row")
        m = m / norms[:, None]
        cond = np.linalg.cond(m)
        if not np.isfinite(cond) or cond >= MAX_CONDITION:
            raise ConfigError(f"stain matrix is singular or ill-conditioned (cond={cond:.3g})")
        object.__setattr__(self, "rows", m)

    @classmethod
    def default(cls) -> "StainMatrix":
        h, d = np.array(HEMATOXYLIN), np.array(DAB)
        h, d = h / np.linalg.norm(h), d / np.linalg.norm(d)
        third = np.cross(h, d)
        return cls(np.stack([h, third, d]))

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.rows)

    @property
    def dab_index(self) -> int:
        return self.names.index("dab")

    def to_dict(self) -> dict:
        return {"rows": self.rows.round(6).tolist(), "names": list(self.names)}

    @classmethod
    def from_dict(cls, d: dict) -> "StainMatrix":
        return cls(np.asarray(d["rows"], dtype=np.float64), tuple(d.get("names", cls.names)))


@dataclass
class StainMask:
    pixels: np.ndarray
    source: MaskSource
    threshold_used: float | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {px.shape}")
        if px.dtype != bool:
            if not np.isin(px, (0, 1)).all():
                raise ValueError("mask must be binary")
            px = px.astype(bool)
        self.pixels = px
        self.source = MaskSource(self.source)

    @property
    def fraction(self) -> float:
        return float(self.pixels.mean())


def optical_density(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise ConfigError(f"expected an HxWx3 RGB tile, got shape {rgb.shape}")
    return -np.log10((rgb.astype(np.float64) + 1.0) / 256.0)


def concentrations(rgb: np.ndarray, matrix: StainMatrix | None = None) -> np.ndarray:
    """Per-pixel stain amounts, shape HxWx3, in matrix row order."""
    matrix = matrix or StainMatrix.default()
    return optical_density(rgb) @ matrix.inverse


def dab_mask(rgb: np.ndarray, matrix: StainMatrix | None = None,
             threshold: float = DEFAULT_THRESHOLD) -> StainMask:
    matrix = matrix or StainMatrix.default()
    dab = concentrations(rgb, matrix)[..., matrix.dab_index]
    return StainMask(dab > threshold, MaskSource.DAB_THRESH, float(threshold))
