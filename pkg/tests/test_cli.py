import csv
import hashlib
import json

import numpy as np
import pytest
import yaml
from PIL import Image

from multistain.cli import EXIT_CONFIG, EXIT_RUNTIME, main
from multistain.evalkit.report import SEG_FIELDS, read_report
from multistain.stainer.checkpoint import load_stainer
from multistain.synthdata import load_dataset

pytestmark = pytest.mark.filterwarnings("ignore::multistain.evalkit.metrics.SmallSampleWarning")

FAST = {
    "data": {"n_tiles": 40},
    "encoder": {"steps": 20, "batch_size": 8},
    "train": {"base_ae_steps": 10, "base_denoise_steps": 10, "checkpoint_every": 5},
    "eval": {"seg_steps": 20, "grid_tiles": 2},
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "fast.yaml"
    cfg.write_text(yaml.safe_dump(FAST))
    assert run("--config", cfg, "gen-data", "--out", root / "data", "--seed", 0) == 0
    assert run("--config", cfg, "train", "--data", root / "data", "--out", root / "run",
               "--steps", 10, "--prompt-mode", "MxP", "--allow-unvalidated") == 0
    return root


def test_unknown_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"train": {"learning_rate": 1.0}}))
    assert run("--config", bad, "gen-data", "--out", tmp_path / "d") == EXIT_CONFIG
    assert "learning_rate" in capsys.readouterr().err
    bad.write_text(yaml.safe_dump({"trian": {}}))
    assert run("--config", bad, "gen-data", "--out", tmp_path / "d") == EXIT_CONFIG


def test_gen_data_counts_and_negatives(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path / "d", "--n-tiles", 20, "--negative-fraction", 0) == 0
    out = capsys.readouterr().out
    assert "negative\t0" in out
    recs = load_dataset(tmp_path / "d")
    assert len(recs) == 20 and not any(r.is_negative for r in recs)
    assert all(set(r.targets) == {"NUCLEAR", "CYTO"} for r in recs)


def test_gen_data_same_seed_same_manifest(tmp_path):
    digests = []
    for name in ("a", "b"):
        assert run("gen-data", "--out", tmp_path / name, "--n-tiles", 8, "--seed", 4) == 0
        digests.append(hashlib.sha256((tmp_path / name / "manifest.json").read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_train_outputs(work):
    run_dir = work / "run"
    with (run_dir / "loss_log.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10
    _, meta = load_stainer(run_dir / "stainer.pt")
    assert meta["prompt_mode"] == "MxP" and meta["inference_prompt_mode"] == "SP"
    resolved = yaml.safe_load((run_dir / "resolved_config.yaml").read_text())
    assert resolved["train"]["total_steps"] == 10 and resolved["command"] == "train"
    assert (run_dir / "base.pt").is_file() and (run_dir / "pair_encoder.pt").is_file()


def test_train_refuses_unvalidated_encoder(work, tmp_path):
    code = run("--config", work / "fast.yaml", "train", "--data", work / "data",
               "--out", tmp_path / "r", "--steps", 1, "--encoder", work / "run/pair_encoder.pt")
    assert code == EXIT_CONFIG


def test_nan_injection_keeps_last_good(work, tmp_path):
    code = run("--config", work / "fast.yaml", "train", "--data", work / "data", "--out", tmp_path / "r",
               "--base", work / "run/base.pt", "--steps", 5, "--lr", 1e30, "--allow-unvalidated")
    assert code == EXIT_RUNTIME
    st, _ = load_stainer(tmp_path / "r/last_good.pt")
    assert all(np.isfinite(v.numpy()).all() for v in st.trainable_state().values())


def test_infer_all_markers_reproducible(work, tmp_path):
    tile = load_dataset(work / "data")[0].input_tile
    Image.fromarray(tile).save(tmp_path / "he.png")
    args = ("infer", "--checkpoint", work / "run/stainer.pt", "--input", tmp_path / "he.png",
            "--marker", "all", "--seed", 3)
    assert run(*args, "--out", tmp_path / "o1") == 0
    assert run(*args, "--out", tmp_path / "o2") == 0
    files = sorted(p.name for p in (tmp_path / "o1").glob("*.png"))
    assert files == ["he_CYTO.png", "he_NUCLEAR.png"]
    for f in files:
        assert (tmp_path / "o1" / f).read_bytes() == (tmp_path / "o2" / f).read_bytes()


def test_infer_marker_typo(work, tmp_path, capsys):
    code = run("infer", "--checkpoint", work / "run/stainer.pt", "--input", work / "data",
               "--marker", "NUCLAER", "--out", tmp_path / "o")
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "NUCLEAR" in err and "CYTO" in err


def test_infer_freeform_gate(work, tmp_path):
    base = ("infer", "--checkpoint", work / "run/stainer.pt", "--input", work / "data",
            "--marker", "NUCLEAR", "--prompt-text", "glowing purple unicorn", "--out", tmp_path / "o")
    assert run(*base) == EXIT_CONFIG
    assert run(*base, "--allow-freeform") == 0


@pytest.fixture(scope="module")
def evaluated(work):
    cfg = work / "fast.yaml"
    ck = work / "run/stainer.pt"
    assert run("--config", cfg, "eval", "--checkpoint", ck, "--data", work / "data",
               "--seg-data", work / "data", "--protocol", "unpaired", "--out", work / "ev_u") == 0
    assert run("--config", cfg, "eval", "--checkpoint", ck, "--data", work / "data",
               "--segmenter", work / "ev_u", "--out", work / "ev_p", "--model-id", "a") == 0
    assert run("--config", cfg, "eval", "--checkpoint", ck, "--data", work / "data",
               "--segmenter", work / "ev_u", "--out", work / "ev_p2", "--model-id", "b") == 0
    return work


def test_unpaired_eval_seg_only(evaluated):
    rep = read_report(evaluated / "ev_u/metrics.json")
    for vals in rep.per_marker.values():
        assert set(vals) == set(SEG_FIELDS)
    assert (evaluated / "ev_u/seg_he.pt").is_file()
    assert rep.tile_count == FAST["data"]["n_tiles"]


def test_paired_eval_writes_extras(evaluated):
    rep = read_report(evaluated / "ev_p/metrics.json")
    assert rep.extra["prompt_mode"] == "MxP"
    assert set(rep.extra["compartment"]) == {"NUCLEAR", "CYTO"}
    assert (evaluated / "ev_p/samples.png").is_file()
    assert (evaluated / "ev_p/resolved_config.yaml").is_file()


def test_report_two_models(evaluated, tmp_path, capsys):
    assert run("report", evaluated / "ev_p/metrics.json", evaluated / "ev_p2/metrics.json",
               "--out", tmp_path / "rep") == 0
    with (tmp_path / "rep/comparison.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    for marker in ("NUCLEAR", "CYTO"):
        assert sorted(r["model_id"] for r in rows if r["marker"] == marker) == ["a", "b"]
    assert (tmp_path / "rep/metric_bars.png").is_file()
    assert json.loads((tmp_path / "rep/compartment.json").read_text()).keys() == {"a", "b"}


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("MULTISTAIN_OUTPUT_ROOT", str(tmp_path / "root"))
    monkeypatch.chdir(tmp_path)
    assert run("gen-data", "--out", "rel", "--n-tiles", 2) == 0
    assert (tmp_path / "root/rel/manifest.json").is_file()
    assert (tmp_path / "root/rel/resolved_config.yaml").is_file()


def test_missing_dataset_is_error(tmp_path):
    code = run("train", "--data", tmp_path / "nothing", "--out", tmp_path / "r", "--steps", 1)
    assert code in (EXIT_CONFIG, EXIT_RUNTIME) and code != 0
