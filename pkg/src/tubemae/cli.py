"""Command-line entry points. Every command writes into its own run directory.

Run directories contain the resolved config (``config.ini``), metrics CSVs and, for
pre-training, a checkpoint. Re-running a command from a run directory's ``config.ini`` with
the same seed reproduces its CSVs byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import logging
import sys
from pathlib import Path

import numpy as np

from .audits import AuditRow, chamfer_oracle_suite, gradient_suite
from .backbone import Encoder, export_attention, write_attention_csv
from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, render_config
from .dataio import (Sample, default_classes, read_manifest, synthetic_dataset,
                     synthetic_segmentation_dataset, write_dataset, write_manifest)
from .errors import ConfigError, ContractError, FormatError, NumericError
from .masking import flatten_grid
from .metrics import THRESHOLDS, segmentation_summary, write_metrics_csv
from .pipeline import (build_pretrainer, clip_batch, encoder_from_tensors, fewshot_split, finetune,
                       linear_probe, pretrain, segmentation_head_finetune, state_tensors, substream)

log = logging.getLogger("tubemae")

COMMANDS = ("gen-data", "pretrain", "probe", "finetune", "fewshot", "eval-seg", "export-attn",
            "grad-check", "chamfer-oracle")


class RunError(RuntimeError):
    """A requested phase could not complete (missing input, failed audit)."""


# ---------------------------------------------------------------- run setup


def _resolve(args) -> tuple[RunConfig, list[str]]:
    cfg = load_config(args.config)
    notes = [f"command: {args.command}", f"config file: {args.config or '(defaults)'}"]
    overrides: dict[str, dict] = {}
    if args.seed is not None:
        overrides["train"] = {"seed": args.seed}
        overrides["eval"] = {"seed": args.seed}
    if args.epochs is not None:
        section = "train" if args.command == "pretrain" else "eval"
        current = getattr(cfg, section)
        values = {"epochs": args.epochs}
        if current.warmup_epochs >= args.epochs:
            values["warmup_epochs"] = args.epochs - 1
        overrides.setdefault(section, {}).update(values)
    for section, values in overrides.items():
        notes.append(f"flag override [{section}] " + ", ".join(f"{k}={v}" for k, v in values.items()))
    return cfg.with_overrides(overrides), notes


def _run_dir(args) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
        path = Path("runs") / f"{args.command}-{stamp}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _model_hash(cfg: RunConfig) -> bytes:
    """Identity of everything a checkpoint's tensors depend on."""
    fields = [cfg.model, cfg.data.clip(), cfg.data.points, cfg.loss]
    return config_hash(repr(fields))


def _classes(cfg: RunConfig):
    return default_classes(cfg.data.classes, cfg.data.domain, cfg.data.noise_sigma)


def _ratios(cfg: RunConfig) -> dict[str, float]:
    return {"train": cfg.data.train_ratio, "test": 1.0 - cfg.data.train_ratio}


def _dataset(cfg: RunConfig, args) -> list[Sample]:
    if args.data:
        path = Path(args.data)
        if not path.exists():
            raise RunError(f"manifest {path} does not exist")
        return read_manifest(path)
    d = cfg.data
    return synthetic_dataset(_classes(cfg), d.videos_per_class, d.frames, d.points,
                             substream(cfg.train.seed, "data"), _ratios(cfg), args.workers)


def _segmentation_dataset(cfg: RunConfig, args) -> list[Sample]:
    if args.data:
        return _dataset(cfg, args)
    d = cfg.data
    return synthetic_segmentation_dataset(_classes(cfg), d.segmentation_videos, d.frames, d.points,
                                          substream(cfg.train.seed, "segmentation-data"),
                                          d.segments, _ratios(cfg))


def _split(samples: list[Sample]) -> tuple[list[Sample], list[Sample]]:
    train = [s for s in samples if s.split == "train"]
    test = [s for s in samples if s.split == "test"]
    if not train or not test:
        raise RunError("dataset needs both train and test samples")
    return train, test


def _fresh_state(cfg: RunConfig):
    return build_pretrainer(cfg.model.model(), cfg.model.tube(), cfg.data.clip(), cfg.data.points,
                            cfg.loss.build(), cfg.train)


def _encoder(cfg: RunConfig, checkpoint: str | None) -> Encoder:
    """Online encoder from a pre-training checkpoint, or the untrained initialization."""
    if checkpoint is None:
        return _fresh_state(cfg).model.online
    path = Path(checkpoint)
    if not path.exists():
        raise RunError(f"checkpoint {path} does not exist")
    tensors, _, stored = load_checkpoint(path)
    if stored != _model_hash(cfg):
        raise RunError(f"checkpoint {path} was written under a different model/data config")
    return encoder_from_tensors(tensors, cfg.model.model())


def _write_rows(path: Path, header: tuple[str, ...], rows: list[tuple]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig, args, run: Path) -> None:
    if args.segmentation:
        samples = _segmentation_dataset(cfg, args)
    else:
        samples = _dataset(cfg, args)
    out = Path(args.out) if args.out else run / "data"
    manifest = write_dataset(out, samples)
    counts: dict[tuple[str, int], int] = {}
    for s in samples:
        counts[(s.split, s.label)] = counts.get((s.split, s.label), 0) + 1
    _write_rows(run / "dataset.csv", ("split", "label", "videos"),
                [(split, label, n) for (split, label), n in sorted(counts.items())])
    log.info("wrote %d videos, manifest %s", len(samples), manifest)


def cmd_pretrain(cfg: RunConfig, args, run: Path) -> None:
    train, _ = _split(_dataset(cfg, args))
    state = _fresh_state(cfg)
    history = pretrain(state, train, cfg.data.clip(), cfg.model.tube(), cfg.mask, cfg.train)
    keys = ("epoch", "lr", "geo", "lat", "motion", "global", "total")
    _write_rows(run / "pretrain_metrics.csv", keys, [tuple(row[k] for k in keys) for row in history])
    save_checkpoint(run / "checkpoint.u4dc", state_tensors(state), state.step, _model_hash(cfg))


def cmd_probe(cfg: RunConfig, args, run: Path) -> None:
    train, test = _split(_dataset(cfg, args))
    acc = linear_probe(_encoder(cfg, args.checkpoint), train, test, cfg.data.clip(),
                       cfg.model.tube(), cfg.eval)
    write_metrics_csv(run / "metrics.csv", [("linear_probe_accuracy", acc, "")])


def cmd_finetune(cfg: RunConfig, args, run: Path) -> None:
    train, test = _split(_dataset(cfg, args))
    result = finetune(_encoder(cfg, args.checkpoint), train, test, cfg.data.clip(), cfg.model.tube(),
                      cfg.eval, fraction=args.fraction)
    _write_rows(run / "finetune_metrics.csv", ("epoch", "loss", "accuracy"),
                [(h["epoch"], h["loss"], h["accuracy"]) for h in result.history])
    write_metrics_csv(run / "metrics.csv", [("finetune_accuracy", result.accuracy, "")])


def cmd_fewshot(cfg: RunConfig, args, run: Path) -> None:
    samples = _dataset(cfg, args)
    if not args.data:
        write_dataset(run / "data", samples)
        base = "data/"
    else:
        base = str(Path(args.data).resolve().parent) + "/"
    train, held = fewshot_split(samples, args.n_way, args.m_shot, substream(cfg.eval.seed, "fewshot"))
    for name, subset in (("train_manifest.tsv", train), ("eval_manifest.tsv", held)):
        write_manifest(run / name, [Sample(s.video, name.split("_")[0], base + s.path) for s in subset])
    rows = [("train_videos", float(len(train)), ""), ("eval_videos", float(len(held)), "")]
    if not args.split_only:
        # classifier indices are the sampled classes renumbered 0..n_way-1
        chosen = sorted({s.label for s in train})
        remap = {c: i for i, c in enumerate(chosen)}
        relabel = lambda subset: [Sample(dataclasses.replace(s.video, label=remap[s.label]), s.split, s.path)  # noqa: E731
                                  for s in subset]
        result = finetune(_encoder(cfg, args.checkpoint), relabel(train), relabel(held), cfg.data.clip(),
                          cfg.model.tube(), cfg.eval, num_classes=args.n_way)
        rows.append(("fewshot_accuracy", result.accuracy, ""))
    write_metrics_csv(run / "metrics.csv", rows)


def cmd_eval_seg(cfg: RunConfig, args, run: Path) -> None:
    train, test = _split(_segmentation_dataset(cfg, args))
    result = segmentation_head_finetune(_encoder(cfg, args.checkpoint), train, test, cfg.data.clip(),
                                        cfg.model.tube(), len(cfg.data.classes), cfg.eval)
    summary = segmentation_summary(result.predictions, result.targets)
    rows = [("frame_accuracy", summary["acc"], ""), ("edit", summary["edit"], "")]
    rows += [("f1", summary[f"f1@{int(round(t * 100))}"], f"{t:.2f}") for t in THRESHOLDS]
    write_metrics_csv(run / "metrics.csv", rows)


def cmd_export_attn(cfg: RunConfig, args, run: Path) -> None:
    samples = _dataset(cfg, args)
    if not 0 <= args.video < len(samples):
        raise RunError(f"video index {args.video} out of range [0, {len(samples)})")
    encoder = _encoder(cfg, args.checkpoint)
    tubes, _ = clip_batch([samples[args.video]], cfg.data.clip(), cfg.model.tube(),
                          substream(cfg.eval.seed, "eval"), augment=False)
    batch = encoder.embed(tubes)
    anchors = tubes.anchors.reshape(1, -1, 4)
    layer = len(encoder.blocks.layers) - 1 if args.layer is None else args.layer
    record = export_attention(encoder, flatten_grid(batch), anchors, layer)
    write_attention_csv(run / "attention.csv", [record])


def _audit_report(run: Path, name: str, rows: list[AuditRow]) -> None:
    _write_rows(run / name, ("check", "max_rel_err", "tolerance", "result"),
                [(r.name, f"{r.max_rel_err:.6e}", f"{float(r.tolerance):.1e}",
                  "pass" if r.passed else "fail") for r in rows])
    for r in rows:
        log.info("%-32s %.3e %s", r.name, r.max_rel_err, "pass" if r.passed else "FAIL")
    failed = [r.name for r in rows if not r.passed]
    if failed:
        raise RunError(f"audit failed: {', '.join(failed)}")


def cmd_grad_check(cfg: RunConfig, args, run: Path) -> None:
    _audit_report(run, "grad_check.csv", gradient_suite(cfg.train.seed))


def cmd_chamfer_oracle(cfg: RunConfig, args, run: Path) -> None:
    _audit_report(run, "chamfer_oracle.csv", chamfer_oracle_suite(cfg.train.seed, args.pairs))


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "finetune": cmd_finetune,
    "fewshot": cmd_fewshot,
    "eval-seg": cmd_eval_seg,
    "export-attn": cmd_export_attn,
    "grad-check": cmd_grad_check,
    "chamfer-oracle": cmd_chamfer_oracle,
}


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run config; omitted sections use defaults")
    common.add_argument("--seed", type=int, help="master seed (overrides [train]/[eval] seed)")
    common.add_argument("--epochs", type=int, help="epochs for this command's training phase")
    common.add_argument("--workers", type=int, default=1, help="processes for data generation")
    common.add_argument("--run-dir", help="output directory (default runs/<command>-<timestamp>)")
    common.add_argument("--data", help="dataset manifest; default generates from [data]")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tubemae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset to disk")
    gen.add_argument("--out", help="dataset directory (default <run-dir>/data)")
    gen.add_argument("--segmentation", action="store_true", help="chained-motion videos with frame labels")
    sub.add_parser("pretrain", parents=[common], help="self-supervised pre-training")
    for name, text in (("probe", "linear probe on frozen features"),
                       ("finetune", "end-to-end classification fine-tuning"),
                       ("fewshot", "n-way m-shot split and fine-tuning"),
                       ("eval-seg", "per-frame segmentation fine-tuning and metrics"),
                       ("export-attn", "dump one encoder layer's attention weights")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="pre-training checkpoint; omitted means random init")
    sub.choices["finetune"].add_argument("--fraction", type=float, default=1.0,
                                         help="stratified fraction of the training split")
    fs = sub.choices["fewshot"]
    fs.add_argument("--n-way", type=int, default=5)
    fs.add_argument("--m-shot", type=int, default=1)
    fs.add_argument("--split-only", action="store_true", help="write the manifests and stop")
    ea = sub.choices["export-attn"]
    ea.add_argument("--layer", type=int, help="encoder layer (default: last)")
    ea.add_argument("--video", type=int, default=0, help="dataset index of the video")
    sub.add_parser("grad-check", parents=[common], help="finite-difference audit of every objective")
    co = sub.add_parser("chamfer-oracle", parents=[common], help="Chamfer loss vs double-loop oracle")
    co.add_argument("--pairs", type=int, default=200)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.workers < 1:
            raise RunError("--workers must be >= 1")
        cfg, notes = _resolve(args)
        run = _run_dir(args)
        (run / "config.ini").write_text(render_config(cfg, notes))
        HANDLERS[args.command](cfg, args, run)
    except (ConfigError, RunError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, FormatError, NumericError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    log.info("run directory: %s", run)
    return 0


if __name__ == "__main__":
    sys.exit(main())
