"""
Command-line entry point.
One subcommand per pipeline stage; every stage reads and writes manifests
and leaves a JSON run report carrying the config hash and seed.

Usage:
    python -m src.cli toy-gen --out data/toy
    python -m src.cli --config configs/toy.yaml quantize-fit --manifest data/toy/manifest.jsonl
"""

import sys
import json
import logging
import argparse
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import ExperimentConfig, LOG_FORMAT, LOG_LEVEL, load_config, save_config, config_hash
from .audio import build_vocoder, load_waveform, mel_from_file, save_waveform
from .quantizer import (
    build_feature_extractor, fit_codebook_from_config, quantize, deduplicate,
    save_codebook, load_codebook,
)
from .manifest import (
    read_corpus, read_augmented, write_manifest, write_units, read_units,
    manifest_header, index_by_id, class_counts, resolve_path,
)
from .model import build_model, load_model, save_model
from .decoder import save_alignment
from .trainer import load_examples, split_validation, fit, finetune
from .augment import build_plan, validate_plan, plan_totals, render, transfer, evaluate_transfer
from .baselines import BaselineAugSpec, render_baselines
from .ser import (
    build_feature_fn, cross_validate, induce_imbalance, write_predictions,
    results_from_predictions, report, augmentation_sweep,
)
from .toy import generate_corpus
from .workers import run_with_stats
from .errors import ConfigError, DataError, EmoAugError

logger = logging.getLogger(__name__)


# =============================================================================
# HELPERS
# =============================================================================

def _work_path(cfg: ExperimentConfig, value: Optional[str], default: str) -> Path:
    return Path(value) if value else Path(cfg.paths.work_dir) / default


def _required(value: Optional[str], flag: str, config_field: str) -> str:
    if not value:
        raise ConfigError(f"missing; pass {flag} or set it in the config", config_field)
    return value


def _meta(cfg: ExperimentConfig, seed: int) -> dict:
    return {"config_hash": config_hash(cfg), "seed": seed}


def _parse_keep(values: Optional[list]) -> dict:
    """emotion=fraction pairs for induced imbalance."""
    keep = {}
    for item in values or []:
        emotion, _, fraction = item.partition("=")
        try:
            keep[emotion] = float(fraction)
        except ValueError:
            raise ConfigError(f"expected emotion=fraction, got {item!r}", "keep")
    return keep


def write_run_report(cfg: ExperimentConfig, command: str, seed: int, outputs: dict) -> Path:
    """Write <work_dir>/reports/<command>.json."""
    path = Path(cfg.paths.work_dir) / "reports" / f"{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"command": command, **_meta(cfg, seed), "outputs": outputs},
                               indent=2, default=str))
    save_config(cfg, path.parent / "config.yaml")
    return path


def _load_units_and_corpus(cfg: ExperimentConfig, args: argparse.Namespace):
    manifest = _required(args.manifest or cfg.paths.manifest, "--manifest", "paths.manifest")
    units_path = _required(args.units or cfg.paths.units, "--units", "paths.units")
    return manifest, read_corpus(manifest), read_units(units_path)


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_toy_gen(cfg: ExperimentConfig, args: argparse.Namespace) -> dict:
    seed = cfg.seed if args.seed is None else args.seed
    manifest = generate_corpus(args.out, args.speakers, args.per_cell, seed,
                               cfg.dsp.sample_rate, max_workers=args.workers)
    return {"seed": seed, "manifest": str(manifest)}


def _extract_all(cfg: ExperimentConfig, records, manifest: str, workers: Optional[int]) -> tuple[list, dict]:
    fe = build_feature_extractor(cfg.quantizer, cfg.dsp)

    def extract(r):
        x = load_waveform(resolve_path(r.path, manifest), cfg.dsp) if cfg.quantizer.feature_source == "mel" else None
        return fe.extract(x, key=r.utt_id)

    return run_with_stats(extract, list(records), workers, label="feature matrix")


def cmd_quantize_fit(cfg: ExperimentConfig, args: argparse.Namespace) -> dict:
    if args.k is not None:
        cfg.quantizer.k = args.k
        cfg.quantizer.validate()
    manifest = _required(args.manifest or cfg.paths.manifest, "--manifest", "paths.manifest")
    features, stats = _extract_all(cfg, read_corpus(manifest), manifest, args.workers)
    cb = fit_codebook_from_config([f for f in features if f is not None], cfg.quantizer)
    out = save_codebook(cb, _work_path(cfg, args.out or cfg.paths.codebook, "codebook.npz"))
    return {"seed": cfg.quantizer.seed, "codebook": str(out), "k": cb.k, "feature_dim": cb.feature_dim,
            "final_inertia": cb.inertia_history[-1] if cb.inertia_history else None, "extraction": stats}


def cmd_quantize(cfg: ExperimentConfig, args: argparse.Namespace) -> dict:
    manifest = _required(args.manifest or cfg.paths.manifest, "--manifest", "paths.manifest")
    cb = load_codebook(_required(args.codebook or cfg.paths.codebook, "--codebook", "paths.codebook"))
    fe = build_feature_extractor(cfg.quantizer, cfg.dsp)
    if fe.dim != cb.feature_dim:
        raise ConfigError(f"codebook has dim {cb.feature_dim}, features have {fe.dim}", "quantizer.feature_dim")
    records = read_corpus(manifest)

    def unitize(r):
        x = load_waveform(resolve_path(r.path, manifest), cfg.dsp) if cfg.quantizer.feature_source == "mel" else None
        return deduplicate(quantize(x, fe, cb, key=r.utt_id))

    results, stats = run_with_stats(unitize, records, args.workers, label="utterance")
    units = {r.utt_id: u for r, u in zip(records, results) if u is not None}
    out = write_units(_work_path(cfg, args.out or cfg.paths.units, "units.jsonl"), units,
                      manifest_header("units", config_hash(cfg), cfg.quantizer.seed, k=cb.k))
    return {"seed": cfg.quantizer.seed, "units": str(out), "utterances": len(units), "quantization": stats}


def cmd_train(cfg: ExperimentConfig, args: argparse.Namespace) -> dict:
    manifest, records, units = _load_units_and_corpus(cfg, args)
    examples = load_examples(records, units, cfg.dsp, manifest)
    train, val = split_validation(examples, cfg.train.val_size, cfg.train.val_fallback_fraction, cfg.train.seed)
    n_units = next(iter(units.values())).k
    model = build_model(n_units, cfg.dsp.n_mels, cfg.model)
    checkpoint = _work_path(cfg, args.out or cfg.paths.checkpoint, "emoaug.pt")
    meta = {**_meta(cfg, cfg.train.seed), "dsp": asdict(cfg.dsp)}
    state = fit(model, train, val, cfg.train, max_epochs=args.max_epochs, checkpoint_path=checkpoint,
                curve_path=checkpoint.with_suffix(".curve.csv"), meta=meta)
    save_model(model, checkpoint, {**meta, "train_state": state.to_meta()})
    return {"seed": cfg.train.seed, "checkpoint": str(checkpoint), "train": len(train), "val": len(val),
            **state.to_meta()}


def cmd_finetune(cfg: ExperimentConfig, args: argparse.Namespace) -> dict:
    manifest, records, units = _load_units_and_corpus(cfg, args)
    model, _ = load_model(_required(args.checkpoint or cfg.paths.checkpoint, "--checkpoint", "paths.checkpoint"))
    examples = load_examples(records, units, cfg.dsp, manifest)
    out = _work_path(cfg, args.out, "emoaug_finetuned.pt")
    meta = {**_meta(cfg, cfg.train.seed), "dsp": asdict(cfg.dsp)}
    state = finetune(model, examples, cfg.train, val_size=args.val_size, max_epochs=args.max_epochs,
                     checkpoint_path=out, curve_path=out.with_suffix(".curve.csv"), meta=meta)
    save_model(model, out, {**meta, "train_state": state.to_meta()})
    return {"seed": cfg.train.seed, "checkpoint": str(out), **state.to_meta()}


def cmd_transfer(cfg: ExperimentConfig, args: argparse.Namespace) -> dict:
    manifest, records, units = _load_units_and_corpus(cfg, args)
    model, _ = load_model(_required(args.checkpoint or cfg.paths.checkpoint, "--checkpoint", "paths.checkpoint"))
    corpus = index_by_id(records)
    if args.source not in units:
        raise DataError(f"no units for source {args.source}")
    ref_path = resolve_path(corpus[args.reference].path, manifest) if args.reference in corpus else Path(args.reference)
    gen = transfer(units[args.source], mel_from_file(ref_path, cfg.dsp), model, cfg.dsp, seed=args.seed)
    wav = build_vocoder(cfg.dsp, args.external_vocoder)(gen.mel, seed=args.seed)
    out = save_waveform(wav, args.out)
    save_alignment(gen.alignment, Path(args.out).with_suffix(".alignment"))
    return {"seed": args.seed, "output": str(out), "frames": gen.mel.n_frames, "truncated": gen.truncated}


def cmd_augment(cfg: ExperimentConfig, args: argparse.Namespace) -> dict:
    manifest, records, units = _load_units_and_corpus(cfg, args)
    n = cfg.augment.n if args.n is None else args.n
    balance = cfg.augment.balance or args.balance
    seed = cfg.augment.seed if args.seed is None else args.seed
    plan = build_plan(records, n, balance, seed)
    validate_plan(plan, records)

    out_dir = _work_path(cfg, args.out_dir, "augmented")
    header = manifest_header("augmented", config_hash(cfg), seed, method="emoaug", n=n, balance=balance)
    write_manifest(out_dir / "plan.jsonl", plan.rows, manifest_header("plan", config_hash(cfg), seed, n=n))
    model, _ = load_model(_required(args.checkpoint or cfg.paths.checkpoint, "--checkpoint", "paths.checkpoint"))
    rendered, stats = render(plan, records, units, model, build_vocoder(cfg.dsp, args.external_vocoder),
                             out_dir / "wavs", out_dir / "manifest.jsonl", manifest, cfg.dsp, header,
                             drop_truncated=cfg.augment.drop_truncated, max_workers=args.workers)
    return {"seed": seed, "manifest": str(out_dir / "manifest.jsonl"), "planned": len(plan),
            "with_replacement": plan.n_with_replacement, "skipped": plan.skipped,
            "totals": plan_totals(plan, records), "render": stats}


def cmd_baseline_aug(cfg: ExperimentConfig, args: argparse.Namespace) -> dict:
    manifest = _required(args.manifest or cfg.paths.manifest, "--manifest", "paths.manifest")
    seed = cfg.augment.seed if args.seed is None else args.seed
    spec = BaselineAugSpec(args.method, tuple(cfg.augment.speed_factors), tuple(cfg.augment.pitch_semitones))
    out_dir = _work_path(cfg, args.out_dir, f"baseline_{args.method}")
    header = manifest_header("augmented", config_hash(cfg), seed, method=args.method)
    rendered, stats = render_baselines(read_corpus(manifest), spec, out_dir / "wavs", out_dir / "manifest.jsonl",
                                       manifest, cfg.dsp, seed, header, args.workers)
    return {"seed": seed, "manifest": str(out_dir / "manifest.jsonl"), "rendered": len(rendered), "render": stats}


def _ser_inputs(cfg: ExperimentConfig, args: argparse.Namespace):
    manifest = _required(args.manifest or cfg.paths.manifest, "--manifest", "paths.manifest")
    records = read_corpus(manifest)
    keep = _parse_keep(args.keep)
    if keep:
        records = induce_imbalance(records, keep, cfg.ser.seed)
        logger.info(f"Induced imbalance: {class_counts(records)}")
    aug = [row for path in args.aug or [] for row in read_augmented(path)]
    features, dim = build_feature_fn(cfg.ser, cfg.dsp, manifest)
    return records, aug, features, dim


def cmd_ser_train(cfg: ExperimentConfig, args: argparse.Namespace) -> dict:
    if args.epochs:
        cfg.ser.epochs = args.epochs
    records, aug, features, dim = _ser_inputs(cfg, args)
    results = cross_validate(records, features, dim, cfg.ser, aug)
    out_dir = _work_path(cfg, args.out_dir, "ser")
    predictions = write_predictions(results, out_dir / "predictions.csv")
    summary = report(results, out_dir, run_info=_meta(cfg, cfg.ser.seed))
    return {"seed": cfg.ser.seed, "predictions": str(predictions), "wa_mean": summary["wa_mean"],
            "ua_mean": summary["ua_mean"], "augmented_rows": len(aug)}


def cmd_ser_eval(cfg: ExperimentConfig, args: argparse.Namespace) -> dict:
    results = results_from_predictions(args.predictions)
    out_dir = _work_path(cfg, args.out_dir, "ser_eval")
    summary = report(results, out_dir, run_info=_meta(cfg, cfg.ser.seed))
    return {"seed": cfg.ser.seed, "report_dir": str(out_dir), "wa_mean": summary["wa_mean"],
            "ua_mean": summary["ua_mean"]}


def cmd_report(cfg: ExperimentConfig, args: argparse.Namespace) -> dict:
    baseline = results_from_predictions(args.baseline)
    augmented = results_from_predictions(args.augmented)
    aggregate = baseline[0].confusion
    for r in baseline[1:]:
        aggregate = aggregate + r.confusion
    out_dir = _work_path(cfg, args.out_dir, "report")
    summary = report(augmented, out_dir, baseline=aggregate, run_info=_meta(cfg, cfg.ser.seed))
    return {"seed": cfg.ser.seed, "report_dir": str(out_dir), "ua_mean": summary["ua_mean"],
            "recall_deltas": summary["recall_deltas"]}


def cmd_ser_sweep(cfg: ExperimentConfig, args: argparse.Namespace) -> dict:
    if args.epochs:
        cfg.ser.epochs = args.epochs
    records, aug, features, dim = _ser_inputs(cfg, args)
    out = _work_path(cfg, args.out, "ser_sweep.csv")
    table = augmentation_sweep(records, aug, features, dim, cfg.ser, args.ns, out, balance=args.balance)
    return {"seed": cfg.ser.seed, "table": str(out), "rows": table.to_dict(orient="records")}


def cmd_evaluate_transfer(cfg: ExperimentConfig, args: argparse.Namespace) -> dict:
    manifest, records, units = _load_units_and_corpus(cfg, args)
    model, _ = load_model(_required(args.checkpoint or cfg.paths.checkpoint, "--checkpoint", "paths.checkpoint"))
    cb = load_codebook(_required(args.codebook or cfg.paths.codebook, "--codebook", "paths.codebook"))
    fe = build_feature_extractor(cfg.quantizer, cfg.dsp)

    rng = np.random.default_rng(args.seed)
    usable = [r for r in records if r.utt_id in units]
    sources = rng.choice(len(usable), size=min(args.pairs, len(usable)), replace=False)
    pairs = []
    for i in sources:
        others = [r for r in usable if r.emotion != usable[i].emotion] or usable
        pairs.append((usable[i], others[int(rng.integers(len(others)))]))

    summary = evaluate_transfer(model, pairs, units, fe, cb, build_vocoder(cfg.dsp, args.external_vocoder),
                                manifest, cfg.dsp, args.seed)
    out = _work_path(cfg, args.out, "transfer_eval.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({**_meta(cfg, args.seed), **summary}, indent=2))
    return {"seed": args.seed, "report": str(out), **{k: v for k, v in summary.items() if k != "rows"}}


COMMANDS = {
    "toy-gen": cmd_toy_gen,
    "quantize-fit": cmd_quantize_fit,
    "quantize": cmd_quantize,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "transfer": cmd_transfer,
    "augment": cmd_augment,
    "baseline-aug": cmd_baseline_aug,
    "ser-train": cmd_ser_train,
    "ser-eval": cmd_ser_eval,
    "report": cmd_report,
    "ser-sweep": cmd_ser_sweep,
    "evaluate-transfer": cmd_evaluate_transfer,
}


# =============================================================================
# PARSER
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emoaug", description="Style-transfer augmentation for emotion recognition")
    parser.add_argument("--config", help="Experiment YAML (defaults when omitted)")
    parser.add_argument("--workers", type=int, default=None, help="Worker threads (default EMOAUG_WORKERS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy-gen", help="Synthesize the toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--per-cell", type=int, default=10)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("quantize-fit", help="Fit the K-means codebook")
    p.add_argument("--manifest")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out")

    p = sub.add_parser("quantize", help="Write deduplicated unit sequences")
    p.add_argument("--manifest")
    p.add_argument("--codebook")
    p.add_argument("--out")

    for name, help_text in (("train", "Train the reconstruction model"), ("finetune", "Fine-tune on a target corpus")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--manifest")
        p.add_argument("--units")
        p.add_argument("--out")
        p.add_argument("--max-epochs", type=int, default=None)
        if name == "finetune":
            p.add_argument("--checkpoint")
            p.add_argument("--val-size", type=int, default=None)

    p = sub.add_parser("transfer", help="Re-speak one utterance in a reference's style")
    p.add_argument("--manifest")
    p.add_argument("--units")
    p.add_argument("--checkpoint")
    p.add_argument("--source", required=True, help="Source utt_id")
    p.add_argument("--reference", required=True, help="Reference utt_id or WAV path")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--external-vocoder", action="store_true")

    p = sub.add_parser("augment", help="Plan and render the augmented corpus")
    p.add_argument("--manifest")
    p.add_argument("--units")
    p.add_argument("--checkpoint")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--balance", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir")
    p.add_argument("--external-vocoder", action="store_true")

    p = sub.add_parser("baseline-aug", help="Render a baseline augmentation")
    p.add_argument("--method", required=True, choices=["copypaste", "speed", "pitch"])
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir")

    for name, help_text in (("ser-train", "Cross-validated SER training"), ("ser-sweep", "Augmentation-times sweep")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--manifest")
        p.add_argument("--aug", action="append", help="Augmented manifest (repeatable)")
        p.add_argument("--keep", action="append", help="emotion=fraction to induce imbalance (repeatable)")
        p.add_argument("--epochs", type=int, default=None)
        if name == "ser-train":
            p.add_argument("--out-dir")
        else:
            p.add_argument("--ns", type=int, nargs="+", default=None)
            p.add_argument("--out")
            p.add_argument("--balance", action="store_true", help="Include class-balancing rows")

    p = sub.add_parser("ser-eval", help="WA/UA and confusion matrix from predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out-dir")

    p = sub.add_parser("report", help="Compare a baseline and an augmented SER run")
    p.add_argument("--baseline", required=True, help="Baseline predictions CSV")
    p.add_argument("--augmented", required=True, help="Augmented predictions CSV")
    p.add_argument("--out-dir")

    p = sub.add_parser("evaluate-transfer", help="Unit recovery and duration shift of transfers")
    p.add_argument("--manifest")
    p.add_argument("--units")
    p.add_argument("--checkpoint")
    p.add_argument("--codebook")
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--external-vocoder", action="store_true")
    return parser


def main(argv: Optional[list] = None) -> int:
    """
    Run one subcommand.

    Returns:
        0 on success, 2 on configuration errors, 1 on any other failure
    """
    logging.basicConfig(level=getattr(logging, LOG_LEVEL.upper(), logging.INFO), format=LOG_FORMAT)
    args = build_parser().parse_args(argv)

    try:
        cfg = load_config(args.config)
        torch.manual_seed(cfg.seed)
        outputs = COMMANDS[args.command](cfg, args)
        seed = outputs.pop("seed", cfg.seed)
        path = write_run_report(cfg, args.command, seed, outputs)
        logger.info(f"{args.command} done; run report {path}")
        return 0
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return 2
    except EmoAugError as e:
        logger.exception(f"{args.command} failed: {e}")
        return 1
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
