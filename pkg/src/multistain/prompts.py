"""Prompt taxonomy: markers, prompt modes and the versioned prompt bank."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from importlib import resources

import numpy as np

from .errors import ConfigError


class Marker(str, Enum):
    NUCLEAR = "NUCLEAR"
    CYTO = "CYTO"


class PromptMode(str, Enum):
    SP = "SP"
    MP = "MP"
    LP = "LP"
    MxP = "MxP"
    Num = "Num"


class Polarity(str, Enum):
    POSITIVE = "POSITIVE"
    NEGATIVE = "NEGATIVE"


MARKERS = tuple(m.value for m in Marker)
# modes that have their own templates in the bank
CONCRETE_MODES = (PromptMode.SP, PromptMode.MP, PromptMode.LP, PromptMode.Num)
MIXED_POOL = (PromptMode.SP, PromptMode.MP, PromptMode.LP)


@lru_cache(maxsize=1)
def load_bank() -> dict:
    text = resources.files("multistain").joinpath("data/prompt_bank.json").read_text()
    return json.loads(text)


def bank_version() -> str:
    return load_bank()["version"]


def parse_marker(value) -> Marker:
    if isinstance(value, Marker):
        return value
    try:
        return Marker(str(value).upper())
    except ValueError:
        raise ConfigError(
            f"unknown marker {value!r}; known markers: {', '.join(MARKERS)}"
        ) from None


def parse_mode(value) -> PromptMode:
    if isinstance(value, PromptMode):
        return value
    for mode in PromptMode:
        if mode.value.lower() == str(value).lower():
            return mode
    raise ConfigError(
        f"unknown prompt mode {value!r}; known modes: {', '.join(m.value for m in PromptMode)}"
    )


def parse_polarity(value) -> Polarity:
    if isinstance(value, Polarity):
        return value
    try:
        return Polarity(str(value).upper())
    except ValueError:
        raise ConfigError(f"unknown polarity {value!r}") from None


def templates(marker, mode, polarity) -> list[str]:
    marker, mode, polarity = parse_marker(marker), parse_mode(mode), parse_polarity(polarity)
    if mode is PromptMode.MxP:
        raise ConfigError("MxP has no templates of its own; resolve it first")
    return list(load_bank()["markers"][marker.value][polarity.value][mode.value])


@dataclass(frozen=True)
class PromptSpec:
    marker: Marker
    mode: PromptMode
    polarity: Polarity
    text: str

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ConfigError("prompt text must be non-empty")

    @property
    def is_mixed(self) -> bool:
        return self.mode is PromptMode.MxP

    def resolve(self, rng: np.random.Generator | None = None) -> "PromptSpec":
        """Return a concrete prompt.

        MxP draws its mode uniformly from SP/MP/LP. With an rng the template
        is drawn too; without one the canonical (first) template is used and
        an unresolved MxP falls back to the SP canonical text.
        """
        mode = self.mode
        if mode is PromptMode.MxP:
            if rng is None:
                mode = PromptMode.SP
            else:
                mode = MIXED_POOL[int(rng.integers(len(MIXED_POOL)))]
        elif rng is None:
            return self
        options = templates(self.marker, mode, self.polarity)
        idx = 0 if rng is None else int(rng.integers(len(options)))
        return replace(self, mode=mode, text=options[idx])

    def to_dict(self) -> dict:
        return {
            "marker": self.marker.value,
            "mode": self.mode.value,
            "polarity": self.polarity.value,
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptSpec":
        return cls(
            parse_marker(d["marker"]),
            parse_mode(d["mode"]),
            parse_polarity(d["polarity"]),
            d["text"],
        )


def build_prompt(marker, mode, polarity=Polarity.POSITIVE) -> PromptSpec:
    """Look up the canonical prompt for ``(marker, mode, polarity)``.

    MxP returns a mode-tagged reference whose concrete text is chosen by
    :meth:`PromptSpec.resolve` at sampling time.
    """
    marker, mode, polarity = parse_marker(marker), parse_mode(mode), parse_polarity(polarity)
    if mode is PromptMode.MxP:
        text = f"<MxP:{marker.value}:{polarity.value}>"
    else:
        text = templates(marker, mode, polarity)[0]
    return PromptSpec(marker, mode, polarity, text)


def freeform_prompt(text: str, marker=Marker.NUCLEAR) -> PromptSpec:
    return PromptSpec(parse_marker(marker), PromptMode.SP, Polarity.POSITIVE, text)


_TOKEN_RE = re.compile(r"[a-z0-9\-]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def bank_vocabulary() -> list[str]:
    """Sorted set of every token used by the bank."""
    words = set()
    for per_marker in load_bank()["markers"].values():
        for per_polarity in per_marker.values():
            for texts in per_polarity.values():
                for t in texts:
                    words.update(tokenize(t))
    return sorted(words)
