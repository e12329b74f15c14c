import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multistain.errors import ConfigError, DatasetError
from multistain.evalkit.stain import dab_mask
from multistain.prompts import Polarity
from multistain.synthdata import (
    TextureMode, TissueSpec, dataset_spec, generate_dataset, generate_tile, load_dataset,
    load_manifest, write_dataset,
)
from oracles import flood_fill_components


def test_deterministic():
    spec = TissueSpec()
    assert generate_tile(spec, 7) == generate_tile(spec, 7)
    assert generate_tile(spec, 7) != generate_tile(spec, 8)


def test_no_glands_gives_negative_tile():
    rec = generate_tile(TissueSpec(gland_count_range=(0, 0)), 3)
    assert rec.is_negative
    for m in (rec.gland_mask, rec.nuclei_mask, rec.cytoplasm_mask):
        assert not m.any()
    # both targets are the same recolored background apart from per-tile noise
    a, b = (rec.targets[k].astype(int) for k in ("NUCLEAR", "CYTO"))
    assert np.array_equal(a, b)


@pytest.mark.parametrize("seed", range(0, 40, 3))
def test_nuclei_component_count_matches_flood_fill(seed):
    spec = TissueSpec(gland_count_range=(3, 3), nuclei_per_gland_range=(10, 10), negative_fraction=0.0)
    rec = generate_tile(spec, seed)
    assert flood_fill_components(rec.nuclei_mask.tolist(), connectivity=8) == 30


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_mask_invariants(seed):
    rec = generate_tile(TissueSpec(), seed)
    assert not (rec.nuclei_mask & ~rec.gland_mask).any()
    assert not (rec.cytoplasm_mask & ~rec.gland_mask).any()
    assert not (rec.nuclei_mask & rec.cytoplasm_mask).any()
    assert rec.is_negative == (not rec.gland_mask.any())
    assert rec.is_negative == (not rec.nuclei_mask.any()) == (not rec.cytoplasm_mask.any())
    shapes = {rec.input_tile.shape, *(t.shape for t in rec.targets.values())}
    assert shapes == {(64, 64, 3)}


def test_renderer_matches_dab_masks():
    for rec in generate_dataset(TissueSpec(), 60, seed=500):
        for marker in ("NUCLEAR", "CYTO"):
            got = dab_mask(rec.targets[marker]).pixels
            assert (got != rec.compartment_mask(marker)).mean() <= 0.01


def test_negative_fraction_exact_over_dataset():
    recs = generate_dataset(TissueSpec(negative_fraction=0.2), 500, seed=0)
    assert abs(np.mean([r.is_negative for r in recs]) - 0.2) < 0.01
    recs = generate_dataset(TissueSpec(negative_fraction=0.0), 50, seed=0)
    assert not any(r.is_negative for r in recs)


def test_prompts_cover_every_marker_mode_pair():
    rec = generate_tile(TissueSpec(negative_fraction=0.0), 1)
    assert len(rec.prompts) == 2 * 5
    assert all(p.polarity is Polarity.POSITIVE for p in rec.prompts.values())
    neg = generate_tile(TissueSpec(gland_count_range=(0, 0)), 1)
    assert all(p.polarity is Polarity.NEGATIVE for p in neg.prompts.values())


def test_shared_texture_mode():
    spec = TissueSpec(background_texture_seed_mode=TextureMode.SHARED, gland_count_range=(0, 0))
    a, b = generate_tile(spec, 1), generate_tile(spec, 2)
    assert a != b  # colors still jitter per tile


@pytest.mark.parametrize("kwargs", [
    {"tile_size": 16},
    {"tile_size": 66},
    {"negative_fraction": 1.5},
    {"gland_count_range": (3, 1)},
    {"color_params": {"hematoxylin": {"mean": [0, 0, 300]}, "eosin": {"mean": [1, 1, 1]},
                      "dab": {"mean": [1, 1, 1]}}},
])
def test_invalid_spec(kwargs):
    with pytest.raises(ConfigError):
        generate_tile(TissueSpec(**kwargs), 0)


def test_roundtrip(tmp_path):
    spec = TissueSpec()
    recs = generate_dataset(spec, 10, seed=3)
    write_dataset(recs, tmp_path, spec)
    loaded = load_dataset(tmp_path)
    assert loaded == recs
    assert dataset_spec(tmp_path).to_dict() == spec.to_dict()
    m = load_manifest(tmp_path).data
    assert m["seeds"] == list(range(3, 13))
    assert m["prompt_bank_version"]
    assert all(f.endswith(".png") for e in m["records"] for f in e["files"].values())


def test_manifest_bytes_stable(tmp_path):
    recs = generate_dataset(TissueSpec(), 4, seed=0)
    write_dataset(recs, tmp_path / "a", TissueSpec())
    write_dataset(recs, tmp_path / "b", TissueSpec())
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()


def test_load_errors(tmp_path):
    with pytest.raises(DatasetError, match="manifest not found"):
        load_dataset(tmp_path)
    recs = generate_dataset(TissueSpec(), 3, seed=0)
    write_dataset(recs, tmp_path)
    victim = tmp_path / load_manifest(tmp_path).records[1]["files"]["target_CYTO"]
    victim.unlink()
    with pytest.raises(DatasetError, match=str(victim.name)):
        load_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DatasetError, match="corrupt manifest"):
        load_dataset(tmp_path)


def test_spec_dict_roundtrip():
    spec = TissueSpec(gland_count_range=(2, 2), negative_fraction=0.5)
    again = TissueSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again.to_dict() == spec.to_dict()
