"""Procedural paired H&E / uniplex-IHC tiles with compartment ground truth.

Glands are rings of epithelium (cytoplasm with embedded nuclei) around a
lumen, sitting on textured stroma with scattered stromal nuclei. Every tile
carries an H&E-like input, one target per marker and the three compartment
masks. Targets are registered to the input by construction.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DatasetError
from .prompts import (
    MARKERS,
    Marker,
    Polarity,
    PromptMode,
    PromptSpec,
    bank_version,
    build_prompt,
)

MANIFEST_NAME = "manifest.json"
DATASET_FORMAT_VERSION = 1

# Golden-ratio Weyl sequence; keeps the negative fraction of consecutive
# seeds within O(log n / n) of the target.
_WEYL = 0.6180339887498949

DEFAULT_COLORS = {
    "hematoxylin": {"mean": [75, 60, 150], "jitter": 10},
    "eosin": {"mean": [205, 120, 170], "jitter": 10},
    "dab": {"mean": [100, 70, 40], "jitter": 10},
}

_LUMEN_HE = np.array([246.0, 242.0, 246.0])
_IHC_BACKGROUND = np.array([238.0, 235.0, 238.0])
_IHC_CYTOPLASM = np.array([226.0, 222.0, 228.0])
_IHC_LUMEN = np.array([248.0, 247.0, 248.0])
_WHITE = np.array([255.0, 255.0, 255.0])


class TextureMode(str, Enum):
    PER_TILE = "PER_TILE"
    SHARED = "SHARED"


@dataclass
class TissueSpec:
    tile_size: int = 64
    gland_count_range: tuple[int, int] = (1, 3)
    nuclei_per_gland_range: tuple[int, int] = (6, 10)
    background_texture_seed_mode: TextureMode = TextureMode.PER_TILE
    negative_fraction: float = 0.2
    color_params: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_COLORS))
    downsample_factor: int = 4

    def __post_init__(self):
        self.gland_count_range = tuple(int(v) for v in self.gland_count_range)
        self.nuclei_per_gland_range = tuple(int(v) for v in self.nuclei_per_gland_range)
        self.background_texture_seed_mode = TextureMode(self.background_texture_seed_mode)

    def validate(self) -> "TissueSpec":
        if self.tile_size < 32 or self.tile_size % self.downsample_factor:
            raise ConfigError(
                f"tile_size must be >= 32 and a multiple of {self.downsample_factor}, "
                f"got {self.tile_size}"
            )
        for name in ("gland_count_range", "nuclei_per_gland_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"{name} must be a non-negative interval, got {(lo, hi)}")
        if self.nuclei_per_gland_range[0] < 1 and self.gland_count_range[1] > 0:
            raise ConfigError("glands need at least one nucleus")
        if not 0.0 <= self.negative_fraction <= 1.0:
            raise ConfigError(f"negative_fraction must be in [0, 1], got {self.negative_fraction}")
        for stain in ("hematoxylin", "eosin", "dab"):
            if stain not in self.color_params:
                raise ConfigError(f"color_params missing {stain!r}")
            mean = np.asarray(self.color_params[stain]["mean"], dtype=float)
            if mean.shape != (3,) or mean.min() < 0 or mean.max() > 255:
                raise ConfigError(f"color mean for {stain} must be an RGB triple in [0, 255]")
            if float(self.color_params[stain].get("jitter", 0)) < 0:
                raise ConfigError(f"color jitter for {stain} must be >= 0")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gland_count_range"] = list(self.gland_count_range)
        d["nuclei_per_gland_range"] = list(self.nuclei_per_gland_range)
        d["background_texture_seed_mode"] = self.background_texture_seed_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TissueSpec":
        return cls(**d)


@dataclass(eq=False)
class SampleRecord:
    input_tile: np.ndarray
    targets: dict[str, np.ndarray]
    gland_mask: np.ndarray
    nuclei_mask: np.ndarray
    cytoplasm_mask: np.ndarray
    is_negative: bool
    prompts: dict[tuple[str, str], PromptSpec]
    seed: int

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        if (self.seed, self.is_negative) != (other.seed, other.is_negative):
            return False
        if self.prompts != other.prompts or set(self.targets) != set(other.targets):
            return False
        arrays = ["input_tile", "gland_mask", "nuclei_mask", "cytoplasm_mask"]
        if not all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays):
            return False
        return all(np.array_equal(self.targets[k], other.targets[k]) for k in self.targets)

    def compartment_mask(self, marker) -> np.ndarray:
        marker = Marker(marker)
        return self.nuclei_mask if marker is Marker.NUCLEAR else self.cytoplasm_mask

    def prompt(self, marker, mode=PromptMode.SP) -> PromptSpec:
        return self.prompts[(Marker(marker).value, PromptMode(mode).value)]


def is_negative_seed(seed: int, negative_fraction: float) -> bool:
    return (seed * _WEYL) % 1.0 < negative_fraction


def _jittered(rng, params) -> np.ndarray:
    mean = np.asarray(params["mean"], dtype=float)
    jitter = float(params.get("jitter", 0))
    return np.clip(mean + rng.uniform(-jitter, jitter, size=3), 0, 255)


def _blend(color, target, amount) -> np.ndarray:
    return (1.0 - amount) * color + amount * target


def _texture(rng, size, scale) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=3.0 * scale, mode="wrap")
    return field_ / (field_.std() + 1e-8)


def _ellipse(yy, xx, cy, cx, a, b, theta) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


_EIGHT = np.ones((3, 3), dtype=bool)


def _place_glands(rng, n_glands, nuclei_counts, size, scale):
    """Pick non-overlapping circular glands large enough for their nuclei."""
    glands = []
    for k in nuclei_counts[:n_glands]:
        rn = rng.uniform(1.05, 1.35) * scale
        thickness = max(3.4 * scale, 2.6 * rn + 1.2)
        ring_min = k * (2.0 * rn + 2.4) / (2.0 * math.pi)
        radius = max(ring_min + thickness / 2.0, rng.uniform(7.0, 10.5) * scale)
        min_radius = max(ring_min + thickness / 2.0, 4.0)
        placed = False
        while not placed:
            lo, hi = radius + 1.0, size - radius - 2.0
            if hi > lo:
                for _ in range(300):
                    cy, cx = rng.uniform(lo, hi, size=2)
                    if all(math.hypot(cy - g[0], cx - g[1]) > radius + g[2] + 3.0 for g in glands):
                        glands.append((cy, cx, radius, thickness, rn, k))
                        placed = True
                        break
            if not placed:
                if radius <= min_radius + 1e-9:
                    break
                radius = max(radius * 0.9, min_radius)
        if not placed:
            break  # tile is full; remaining glands are dropped
    return glands


def generate_tile(spec: TissueSpec, seed: int) -> SampleRecord:
    """Render one paired record; a pure function of ``(spec, seed)``."""
    spec.validate()
    size = spec.tile_size
    scale = size / 64.0
    rng = np.random.default_rng([int(seed), 7919])
    tex_rng = np.random.default_rng(
        [0, 104729] if spec.background_texture_seed_mode is TextureMode.SHARED else [int(seed), 104729]
    )

    colors = spec.color_params
    hema = _jittered(rng, colors["hematoxylin"])
    eosin = _jittered(rng, colors["eosin"])
    dab = _jittered(rng, colors["dab"])

    g_lo, g_hi = spec.gland_count_range
    negative = g_hi == 0 or is_negative_seed(seed, spec.negative_fraction)
    n_glands = 0 if negative else int(rng.integers(max(g_lo, 1), g_hi + 1))
    nuclei_counts = [
        int(rng.integers(spec.nuclei_per_gland_range[0], spec.nuclei_per_gland_range[1] + 1))
        for _ in range(n_glands)
    ]

    yy, xx = np.mgrid[0:size, 0:size].astype(float) + 0.5
    gland = np.zeros((size, size), dtype=bool)
    lumen = np.zeros_like(gland)
    nuclei = np.zeros_like(gland)

    for cy, cx, radius, thickness, rn, k in _place_glands(rng, n_glands, nuclei_counts, size, scale):
        dist = np.hypot(yy - cy, xx - cx)
        this_gland = dist <= radius
        this_lumen = dist < radius - thickness
        epithelium = this_gland & ~this_lumen
        gland |= this_gland
        lumen |= this_lumen
        ring = radius - thickness / 2.0
        theta0 = rng.uniform(0, 2 * math.pi)
        step = 2 * math.pi / k
        for j in range(k):
            theta = theta0 + j * step + rng.uniform(-0.12, 0.12) * step
            r = ring + rng.uniform(-0.25, 0.25)
            ny, nx = cy + r * math.sin(theta), cx + r * math.cos(theta)
            elong = rng.uniform(1.0, 1.25)
            a = min(rn * elong, thickness / 2.0 - 0.3)
            for shrink in (1.0, 0.8, 0.6, 0.0):
                blob = _ellipse(yy, xx, ny, nx, max(a * shrink, 0.1), max(rn * shrink, 0.1), theta)
                blob[min(int(ny), size - 1), min(int(nx), size - 1)] = True
                blob &= epithelium
                if not (ndimage.binary_dilation(blob, _EIGHT) & nuclei).any():
                    nuclei |= blob
                    break

    cytoplasm = gland & ~lumen & ~nuclei

    # stromal nuclei: elongated, outside glands, never part of the marker masks
    stromal = np.zeros_like(gland)
    keep_out = ndimage.binary_dilation(gland, _EIGHT, iterations=2)
    n_stromal = int(round(rng.integers(2, 7) * scale * scale))
    for _ in range(n_stromal):
        sy, sx = rng.uniform(2, size - 2, size=2)
        blob = _ellipse(yy, xx, sy, sx, 2.3 * scale, 0.85 * scale, rng.uniform(0, math.pi))
        if not (blob & keep_out).any():
            stromal |= blob

    texture = _texture(tex_rng, size, scale)
    noise_he = rng.normal(0, 2.0, size=(size, size, 3))
    noise_ihc = rng.normal(0, 1.5, size=(size, size, 3))

    he = np.empty((size, size, 3))
    he[:] = _blend(eosin, _WHITE, 0.6)
    he += 6.0 * texture[..., None]
    he[cytoplasm] = eosin
    he[lumen] = _LUMEN_HE
    he[stromal] = _blend(hema, _WHITE, 0.15)
    he[nuclei] = hema
    he = np.clip(np.rint(he + noise_he), 0, 255).astype(np.uint8)

    ihc = np.empty((size, size, 3))
    ihc[:] = _IHC_BACKGROUND
    ihc += 2.5 * texture[..., None]
    ihc[cytoplasm] = _IHC_CYTOPLASM
    ihc[lumen] = _IHC_LUMEN
    ihc[stromal | nuclei] = _blend(hema, _WHITE, 0.5)

    targets = {}
    for marker in MARKERS:
        img = ihc.copy()
        img[nuclei if marker == Marker.NUCLEAR.value else cytoplasm] = dab
        targets[marker] = np.clip(np.rint(img + noise_ihc), 0, 255).astype(np.uint8)

    is_negative = not gland.any()
    polarity = Polarity.NEGATIVE if is_negative else Polarity.POSITIVE
    prompts = {
        (marker, mode.value): build_prompt(marker, mode, polarity)
        for marker in MARKERS
        for mode in PromptMode
    }
    return SampleRecord(
        input_tile=he,
        targets=targets,
        gland_mask=gland,
        nuclei_mask=nuclei,
        cytoplasm_mask=cytoplasm,
        is_negative=is_negative,
        prompts=prompts,
        seed=int(seed),
    )


def generate_dataset(spec: TissueSpec, n_tiles: int, seed: int = 0) -> list[SampleRecord]:
    """Tiles for seeds ``seed, seed + 1, ...``."""
    spec.validate()
    return [generate_tile(spec, seed + i) for i in range(n_tiles)]


# --------------------------------------------------------------------- storage


@dataclass
class Manifest:
    path: Path
    data: dict

    @property
    def records(self) -> list[dict]:
        return self.data["records"]


def _save_png(array: np.ndarray, path: Path):
    if array.dtype == bool:
        array = array.astype(np.uint8) * 255
    Image.fromarray(array).save(path, format="PNG")


def _load_png(path: Path, mask: bool = False) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing image file: {path}")
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except Exception as exc:
        raise DatasetError(f"unreadable image file: {path} ({exc})") from exc
    if mask:
        return arr > 127
    return arr


def write_dataset(records, directory, spec: TissueSpec | None = None) -> Manifest:
    """Write records as lossless PNGs plus ``manifest.json`` (written last)."""
    root = Path(directory)
    (root / "tiles").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(records):
        stem = f"tiles/{i:05d}"
        files = {
            "input": f"{stem}_input.png",
            "gland_mask": f"{stem}_gland.png",
            "nuclei_mask": f"{stem}_nuclei.png",
            "cytoplasm_mask": f"{stem}_cyto.png",
        }
        for marker in rec.targets:
            files[f"target_{marker}"] = f"{stem}_target_{marker.lower()}.png"
        _save_png(rec.input_tile, root / files["input"])
        _save_png(rec.gland_mask, root / files["gland_mask"])
        _save_png(rec.nuclei_mask, root / files["nuclei_mask"])
        _save_png(rec.cytoplasm_mask, root / files["cytoplasm_mask"])
        for marker, img in rec.targets.items():
            _save_png(img, root / files[f"target_{marker}"])
        entries.append(
            {
                "index": i,
                "seed": rec.seed,
                "is_negative": bool(rec.is_negative),
                "files": files,
                "prompts": [p.to_dict() for _, p in sorted(rec.prompts.items())],
            }
        )
    data = {
        "format_version": DATASET_FORMAT_VERSION,
        "prompt_bank_version": bank_version(),
        "spec": spec.to_dict() if spec is not None else None,
        "seeds": [rec.seed for rec in records],
        "tile_count": len(records),
        "records": entries,
    }
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(data, indent=1, sort_keys=True))
    return Manifest(path, data)


def load_manifest(directory) -> Manifest:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    try:
        data = json.loads(path.read_text())
        data["records"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"corrupt manifest: {path} ({exc})") from exc
    return Manifest(path, data)


def load_dataset(directory) -> list[SampleRecord]:
    root = Path(directory)
    manifest = load_manifest(root)
    records = []
    for entry in manifest.records:
        files = entry["files"]
        targets = {
            key[len("target_"):]: _load_png(root / rel)
            for key, rel in sorted(files.items())
            if key.startswith("target_")
        }
        prompts = {}
        for pd in entry["prompts"]:
            p = PromptSpec.from_dict(pd)
            prompts[(p.marker.value, p.mode.value)] = p
        records.append(
            SampleRecord(
                input_tile=_load_png(root / files["input"]),
                targets=targets,
                gland_mask=_load_png(root / files["gland_mask"], mask=True),
                nuclei_mask=_load_png(root / files["nuclei_mask"], mask=True),
                cytoplasm_mask=_load_png(root / files["cytoplasm_mask"], mask=True),
                is_negative=bool(entry["is_negative"]),
                prompts=prompts,
                seed=int(entry["seed"]),
            )
        )
    return records


def dataset_spec(directory) -> TissueSpec | None:
    spec = load_manifest(directory).data.get("spec")
    return TissueSpec.from_dict(spec) if spec else None
