"""``multistain`` command line: data, pretraining, training, inference, evaluation, reports.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .errors import ConfigError, MultistainError
from .evalkit import plots
from .evalkit.report import FIELDS, Protocol, compartment_scores, evaluate_outputs, \
    pair_encoder_extractor, read_report, stain_all
from .evalkit.segmentation import InputKind, SegConfig, SegModel, train_gland_segmenter
from .evalkit.stain import DEFAULT_THRESHOLD, StainMatrix, dab_mask
from .prompts import MARKERS, Polarity, PromptMode, bank_vocabulary, build_prompt, \
    freeform_prompt, parse_marker, tokenize
from .stainer.checkpoint import load_pair_encoder, load_stainer, save_pair_encoder, save_stainer
from .stainer.model import ModelConfig, Stainer, apply_lora
from .synthdata import TissueSpec, generate_dataset, load_dataset, load_manifest, write_dataset
from .training.base import pretrain_base
from .training.loop import TRAIN_MODES, TrainConfig, read_loss_log, train_loop
from .training.pair_encoder import pretrain_pair_encoder

log = logging.getLogger("multistain")

EXIT_CONFIG = 2
EXIT_RUNTIME = 3
OUTPUT_ROOT_ENV = "MULTISTAIN_OUTPUT_ROOT"


# ------------------------------------------------------------------ config


@dataclass
class DataSection:
    n_tiles: int = 2000
    spec: dict = field(default_factory=lambda: TissueSpec().to_dict())


@dataclass
class EncoderSection:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-3
    min_accuracy: float = 0.8


@dataclass
class EvalSection:
    threshold: float = DEFAULT_THRESHOLD
    stain_matrix: list | None = None
    seg_steps: int = 400
    seg_batch_size: int = 16
    fid_shrinkage: bool = True
    grid_tiles: int = 6


SECTIONS = {
    "data": DataSection,
    "encoder": EncoderSection,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, raw: dict | None) -> "RunConfig":
        raw = dict(raw or {})
        unknown = set(raw) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        cfg = cls()
        if "seed" in raw:
            cfg.seed = int(raw["seed"])
        for name, kind in SECTIONS.items():
            section = raw.get(name) or {}
            if not isinstance(section, dict):
                raise ConfigError(f"config section {name!r} must be a mapping")
            known = {f.name for f in fields(kind)}
            bad = set(section) - known
            if bad:
                raise ConfigError(f"unknown key(s) in {name!r}: {sorted(bad)}")
            if name == "data" and "spec" in section:
                spec = TissueSpec().to_dict()
                bad = set(section["spec"]) - set(spec)
                if bad:
                    raise ConfigError(f"unknown key(s) in 'data.spec': {sorted(bad)}")
                spec.update(section["spec"])
                section = {**section, "spec": spec}
            try:
                setattr(cfg, name, kind(**{**_section_dict(getattr(cfg, name)), **section}))
            except TypeError as exc:
                raise ConfigError(f"bad values in {name!r}: {exc}") from exc
        return cfg

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            out[name] = _section_dict(getattr(self, name))
        return out

    def tissue_spec(self) -> TissueSpec:
        return TissueSpec.from_dict(self.data.spec).validate()

    def stain_matrix(self) -> StainMatrix:
        if self.eval.stain_matrix is None:
            return StainMatrix.default()
        return StainMatrix(np.asarray(self.eval.stain_matrix, dtype=float))


def _section_dict(obj) -> dict:
    d = obj.to_dict() if hasattr(obj, "to_dict") else asdict(obj)
    return json.loads(json.dumps(d))


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"unparseable config {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping at top level")
    return RunConfig.from_dict(raw)


def output_dir(value) -> Path:
    """Relative output paths are placed under ``$MULTISTAIN_OUTPUT_ROOT`` when set."""
    path = Path(value)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_resolved(cfg: RunConfig, out: Path, command: str, extra: dict | None = None) -> Path:
    payload = {"command": command, **cfg.to_dict()}
    if extra:
        payload["inputs"] = extra
    path = out / "resolved_config.yaml"
    path.write_text(yaml.safe_dump(payload, sort_keys=True))
    return path


def _override(section, **values):
    for key, val in values.items():
        if val is not None:
            setattr(section, key, val)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: RunConfig) -> Path:
    _override(cfg.data, n_tiles=args.n_tiles)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.negative_fraction is not None:
        cfg.data.spec["negative_fraction"] = args.negative_fraction
    if args.tile_size is not None:
        cfg.data.spec["tile_size"] = args.tile_size
    spec = cfg.tissue_spec()
    if cfg.data.n_tiles < 1:
        raise ConfigError("n_tiles must be >= 1")
    out = output_dir(args.out)
    records = generate_dataset(spec, cfg.data.n_tiles, cfg.seed)
    manifest = write_dataset(records, out, spec)
    write_resolved(cfg, out, "gen-data")
    n_neg = sum(r.is_negative for r in records)
    print("class\tcount")
    print(f"positive\t{len(records) - n_neg}")
    print(f"negative\t{n_neg}")
    for m in MARKERS:
        n = sum(m in r.targets for r in records)
        print(f"target_{m}\t{n}")
    return manifest.path


def _pretrain_encoder(records, cfg: RunConfig):
    return pretrain_pair_encoder(
        records, steps=cfg.encoder.steps, seed=cfg.seed, embed_dim=cfg.model.text_embed_dim,
        batch_size=cfg.encoder.batch_size, lr=cfg.encoder.lr, min_accuracy=cfg.encoder.min_accuracy,
    )


def cmd_pretrain_encoder(args, cfg: RunConfig) -> Path:
    _override(cfg.encoder, steps=args.steps)
    if args.seed is not None:
        cfg.seed = args.seed
    records = load_dataset(args.data)
    out = output_dir(args.out)
    enc = _pretrain_encoder(records, cfg)
    path = save_pair_encoder(out / "pair_encoder.pt", enc)
    (out / "encoder_metrics.json").write_text(
        json.dumps({"validated": enc.validated, **enc.metrics}, indent=2, sort_keys=True))
    write_resolved(cfg, out, "pretrain-encoder", {"data": str(args.data)})
    print(f"validated\t{enc.validated}")
    for k, v in sorted(enc.metrics.items()):
        print(f"{k}\t{v}")
    return path


def cmd_train(args, cfg: RunConfig) -> Path:
    _override(cfg.train, total_steps=args.steps, prompt_mode=args.prompt_mode,
              lr_generator=args.lr, checkpoint_every=args.checkpoint_every)
    if args.allow_unvalidated:
        cfg.train.allow_unvalidated = True
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.train.seed = cfg.seed
    cfg.train.validate()
    cfg.model.validate()
    records = load_dataset(args.data)
    out = output_dir(args.out)
    inputs = {"data": str(args.data)}

    if args.base:
        stainer, meta = load_stainer(args.base)
        if stainer.lora_attached:
            raise ConfigError(f"{args.base} already has LoRA attached; pass a base checkpoint")
        inputs["base"] = str(args.base)
        stainer.cfg.lora_rank, stainer.cfg.lora_alpha = cfg.model.lora_rank, cfg.model.lora_alpha
        cfg.model = stainer.cfg
    else:
        if args.encoder:
            encoder = load_pair_encoder(args.encoder)
            inputs["encoder"] = str(args.encoder)
        else:
            log.warning("no --encoder given; pretraining the pair encoder (%d steps)", cfg.encoder.steps)
            encoder = _pretrain_encoder(records, cfg)
            save_pair_encoder(out / "pair_encoder.pt", encoder)
        if not encoder.validated and not cfg.train.allow_unvalidated:
            raise ConfigError("pair encoder is flagged unvalidated; pretrain it or pass --allow-unvalidated")
        stainer = Stainer(cfg.model, encoder)
        log.info("pretraining the generator base")
        pretrain_base(stainer, records, ae_steps=cfg.train.base_ae_steps,
                      denoise_steps=cfg.train.base_denoise_steps,
                      batch_size=cfg.train.base_batch_size, lr=cfg.train.base_lr, seed=cfg.seed)
        save_stainer(out / "base.pt", stainer, {"stage": "base"})
    apply_lora(stainer)
    write_resolved(cfg, out, "train", inputs)
    meta = train_loop(records, cfg.train, stainer, out)
    print(f"checkpoint\t{meta.path}")
    print(f"steps\t{meta.step}")
    print(f"prompt_mode\t{meta.prompt_mode}")
    return meta.path


def _read_tiles(paths) -> list[tuple[str, np.ndarray]]:
    tiles = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            if (p / "manifest.json").is_file():
                entries = load_manifest(p).records
                tiles.extend((f"{e['index']:05d}", np.array(Image.open(p / e["files"]["input"])))
                             for e in entries)
            else:
                tiles.extend(_read_tiles(sorted(p.glob("*.png"))))
            continue
        if not p.is_file():
            raise ConfigError(f"input tile not found: {p}")
        with Image.open(p) as im:
            tiles.append((p.stem, np.array(im.convert("RGB"))))
    if not tiles:
        raise ConfigError("no input tiles")
    return tiles


def _safe_tag(text: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in text)[:40] or "prompt"


def cmd_infer(args, cfg: RunConfig) -> list[Path]:
    stainer, meta = load_stainer(args.checkpoint)
    mode = PromptMode(meta.get("inference_prompt_mode", "SP"))
    seed = cfg.seed if args.seed is None else args.seed
    if args.prompt_text is not None:
        unknown = sorted(set(tokenize(args.prompt_text)) - set(bank_vocabulary()))
        if unknown and not args.allow_freeform:
            raise ConfigError(f"prompt words outside the vocabulary {unknown}; pass --allow-freeform")
    jobs = []
    if args.marker.lower() == "all":
        if args.prompt_text is not None:
            raise ConfigError("--prompt-text cannot be combined with --marker all")
        jobs = [(m, build_prompt(m, mode, Polarity.POSITIVE)) for m in stainer.cfg.markers]
    else:
        try:
            marker = parse_marker(args.marker).value
        except ConfigError:
            if not (args.allow_freeform and args.prompt_text):
                raise
            jobs = [(_safe_tag(args.marker), freeform_prompt(args.prompt_text))]
        else:
            if args.prompt_text is not None:
                jobs = [(marker, freeform_prompt(args.prompt_text, marker))]
            else:
                jobs = [(marker, build_prompt(marker, mode, Polarity.POSITIVE))]
    tiles = _read_tiles(args.input)
    out = output_dir(args.out)
    written = []
    for stem, tile in tiles:
        for tag, prompt in jobs:
            img = stainer.virtual_stain(tile, prompt, seed=seed)
            path = out / f"{stem}_{tag}.png"
            Image.fromarray(img).save(path, format="PNG")
            written.append(path)
    write_resolved(cfg, out, "infer", {"checkpoint": str(args.checkpoint),
                                       "prompts": {t: p.text for t, p in jobs}, "seed": seed})
    print(f"outputs\t{len(written)}")
    return written


def _segmenters(args, cfg: RunConfig, out: Path, protocol: Protocol):
    kinds = [InputKind.STAIN] + ([InputKind.INPUT_HE] if protocol is Protocol.UNPAIRED else [])
    names = {InputKind.STAIN: "seg_stain.pt", InputKind.INPUT_HE: "seg_he.pt"}
    models = {}
    if args.segmenter:
        for k in kinds:
            models[k] = SegModel.load(Path(args.segmenter) / names[k])
        return models
    if not args.seg_data:
        raise ConfigError("eval needs --segmenter DIR or --seg-data DATASET to train segmenters")
    records = load_dataset(args.seg_data)
    seg_cfg = SegConfig(steps=cfg.eval.seg_steps, batch_size=cfg.eval.seg_batch_size, seed=cfg.seed)
    for k in kinds:
        models[k] = train_gland_segmenter(records, k, seg_cfg)
        models[k].save(out / names[k])
        print(f"segmenter_{k.value}_heldout_dice\t{models[k].heldout_dice:.4f}")
    return models


def cmd_eval(args, cfg: RunConfig) -> Path:
    _override(cfg.eval, threshold=args.threshold)
    if args.seed is not None:
        cfg.seed = args.seed
    protocol = Protocol(args.protocol.upper())
    matrix = cfg.stain_matrix()
    stainer, meta = load_stainer(args.checkpoint)
    records = load_dataset(args.data)
    if protocol is Protocol.PAIRED and not all(r.targets for r in records):
        raise ConfigError("paired protocol needs target stains in the dataset; use --protocol unpaired")
    out = output_dir(args.out)
    segs = _segmenters(args, cfg, out, protocol)
    mode = PromptMode(meta.get("inference_prompt_mode", "SP"))
    generated = stain_all(stainer, records, mode)
    model_id = args.model_id or f"{meta.get('prompt_mode', 'model')}:{Path(args.checkpoint).stem}"
    report = evaluate_outputs(
        generated, records, protocol, stain_segmenter=segs[InputKind.STAIN],
        he_segmenter=segs.get(InputKind.INPUT_HE),
        extractor=pair_encoder_extractor(stainer.pair_encoder), matrix=matrix,
        threshold=cfg.eval.threshold, model_id=model_id, fid_shrinkage=cfg.eval.fid_shrinkage,
    )
    report.extra["prompt_mode"] = meta.get("prompt_mode")
    report.extra["checkpoint"] = str(args.checkpoint)
    if protocol is Protocol.PAIRED:
        report.extra["compartment"] = compartment_scores(generated, records, matrix, cfg.eval.threshold)
    jpath, _ = report.write(out)
    k = min(cfg.eval.grid_tiles, len(records))
    if k:
        idx = np.linspace(0, len(records) - 1, k).astype(int)
        masks = {m: [dab_mask(generated[m][i], matrix, cfg.eval.threshold).pixels.astype(float)
                     for i in idx] for m in generated}
        targets = ({m: [records[i].targets[m] for i in idx] for m in generated}
                   if protocol is Protocol.PAIRED else None)
        plots.sample_grid([records[i].input_tile for i in idx],
                          {m: [generated[m][i] for i in idx] for m in generated},
                          out / "samples.png", targets, masks)
    write_resolved(cfg, out, "eval", {"checkpoint": str(args.checkpoint), "data": str(args.data),
                                      "protocol": protocol.value})
    _print_table([report])
    return jpath


def comparison_rows(reports) -> tuple[list[str], list[list]]:
    cols = []
    for r in reports:
        for c in FIELDS[r.protocol]:
            if c not in cols:
                cols.append(c)
    header = ["marker", "model_id", "protocol", "tile_count", *cols]
    rows = []
    markers = sorted({m for r in reports for m in r.per_marker})
    for m in markers:
        for r in reports:
            if m not in r.per_marker:
                continue
            vals = r.per_marker[m]
            rows.append([m, r.model_id, r.protocol.value, r.tile_count,
                         *[f"{vals[c]:.6g}" if c in vals else "" for c in cols]])
    return header, rows


def _print_table(reports):
    header, rows = comparison_rows(reports)
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    sys.stdout.write(buf.getvalue())


def _fp_direction(reports) -> str | None:
    by_mode = {r.extra.get("prompt_mode"): r for r in reports if r.protocol is Protocol.PAIRED}
    if "SMPP" not in by_mode or "SMP" not in by_mode:
        return None
    fp = {k: by_mode[k].per_marker.get("NUCLEAR", {}).get("negative_fp_pct") for k in ("SMPP", "SMP")}
    if None in fp.values():
        return None
    rel = ">" if fp["SMPP"] > fp["SMP"] else ("<" if fp["SMPP"] < fp["SMP"] else "=")
    return f"SMPP negative_fp_pct {fp['SMPP']:.4f} {rel} SMP {fp['SMP']:.4f}"


def cmd_report(args, cfg: RunConfig) -> Path:
    reports = [read_report(p) for p in args.reports]
    out = output_dir(args.out)
    header, rows = comparison_rows(reports)
    table = out / "comparison.csv"
    with table.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    _print_table(reports)
    plots.metric_bars(reports, out / "metric_bars.png")
    comp = [(r.model_id, r.extra["compartment"]) for r in reports if "compartment" in r.extra]
    if comp:
        summary = {mid: c for mid, c in comp}
        (out / "compartment.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        print("# compartment DAB DICE (positive tiles) and negative-tile FP fraction")
        print("model_id\tprompt\tdice_vs_NUCLEAR\tdice_vs_CYTO\tnegative_fp_fraction")
        for mid, c in comp:
            for m, row in c.items():
                print(f"{mid}\t{m}\t{row['dice_vs_NUCLEAR']:.4f}\t{row['dice_vs_CYTO']:.4f}\t"
                      f"{row['negative_fp_fraction']:.5f}")
    direction = _fp_direction(reports)
    if direction:
        print(f"# {direction} (informational)")
    for r in reports:
        log_path = Path(r.extra.get("checkpoint", "")).parent / "loss_log.csv"
        if r.extra.get("checkpoint") and log_path.is_file():
            hist = read_loss_log(log_path)
            if hist:
                plots.loss_curves(hist, out / f"loss_{_safe_tag(r.model_id)}.png")
    write_resolved(cfg, out, "report", {"reports": [str(p) for p in args.reports]})
    return table


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multistain", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML run config (sections: data, encoder, model, train, eval)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic paired dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-tiles", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--negative-fraction", type=float)
    g.add_argument("--tile-size", type=int)
    g.set_defaults(func=cmd_gen_data)

    e = sub.add_parser("pretrain-encoder", help="contrastively pretrain the pair encoder")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--steps", type=int)
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_pretrain_encoder)

    t = sub.add_parser("train", help="train LoRA / skip / first-layer weights")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--encoder", help="pair-encoder checkpoint (pretrained here if omitted)")
    t.add_argument("--base", help="pretrained base stainer checkpoint (base.pt of an earlier run)")
    t.add_argument("--steps", type=int)
    t.add_argument("--prompt-mode", choices=TRAIN_MODES)
    t.add_argument("--lr", type=float, help="generator learning rate")
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--allow-unvalidated", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="virtually stain H&E tiles")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True, nargs="+", help="PNG files, folders or dataset dirs")
    i.add_argument("--marker", required=True, help=f"one of {', '.join(MARKERS)} or 'all'")
    i.add_argument("--prompt-text")
    i.add_argument("--allow-freeform", action="store_true")
    i.add_argument("--out", required=True)
    i.add_argument("--seed", type=int)
    i.set_defaults(func=cmd_infer)

    v = sub.add_parser("eval", help="paired or unpaired evaluation")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--protocol", choices=["paired", "unpaired", "PAIRED", "UNPAIRED"], default="paired")
    v.add_argument("--out", required=True)
    v.add_argument("--segmenter", help="directory holding seg_stain.pt (and seg_he.pt)")
    v.add_argument("--seg-data", help="dataset used to train the gland segmenters")
    v.add_argument("--threshold", type=float, help="DAB optical-density threshold")
    v.add_argument("--model-id")
    v.add_argument("--seed", type=int)
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="cross-model comparison table and plots")
    r.add_argument("reports", nargs="+", help="metrics.json files")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MultistainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
