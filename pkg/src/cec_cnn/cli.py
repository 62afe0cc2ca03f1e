"""``cec-cnn`` command line: gen-data | train | eval | erf.

Exit codes:
    0  success
    2  dataset manifest missing (or invalid command line)
    3  non-finite training loss
    4  checkpoint architecture hash does not match the configuration
    5  unknown ERF layer or channel
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import List, Optional

from . import data as dp
from .arch import build_network
from .checkpoint import SpecHashMismatch, load_checkpoint, save_checkpoint
from .config import RunConfig
from .erf import (calibrate_batchnorm, compute_erf, render_erf, rf_footprint, support_within_footprint)
from .metrics import METRIC_NAMES
from .plotting import plot_erf_panel, plot_history, plot_metric_runs
from .training import NonFiniteLossError, train, evaluate_repeated

EXIT_OK, EXIT_NO_MANIFEST, EXIT_NONFINITE, EXIT_SPEC_MISMATCH, EXIT_UNKNOWN_LAYER = 0, 2, 3, 4, 5

log = logging.getLogger("cec_cnn")


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _thread_limit(cfg: RunConfig):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=1 if cfg.deterministic else max(cfg.threads, 1))


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.input_size is not None:
        cfg.set_input_size(args.input_size)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.repeats is not None:
        cfg.repeats = args.repeats
    if args.threads is not None:
        cfg.threads = args.threads
    if args.deterministic:
        cfg.deterministic = True
    if getattr(args, "data", None):
        cfg.data_dir = args.data
    return cfg


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    records = dp.generate_synthetic(cfg.num_patients, cfg.rois_per_patient, cfg.class_params, cfg.seed)
    manifest = dp.write_dataset(records, out)
    n_pos = sum(r.label == dp.CANCER for r in records)
    oracle = dp.nearest_centroid_accuracy(records)
    report = (f"patients {cfg.num_patients}\nrois {len(records)}\ncancer {n_pos}\n"
              f"non_cancer {len(records) - n_pos}\ndifficulty {cfg.class_params.difficulty}\n"
              f"oracle_accuracy {oracle:.4f}\nmanifest_sha256 {file_sha256(manifest)}\n")
    (out / "generation_report.txt").write_text(report)
    cfg.data_dir = str(out)
    cfg.write_resolved(out)
    sys.stdout.write(report)
    return EXIT_OK


def _load_records(cfg: RunConfig):
    manifest = Path(cfg.data_dir) / "manifest.csv"
    if not manifest.is_file():
        _err(f"dataset manifest not found: {manifest}")
        return None
    return dp.read_dataset(manifest)


def cmd_train(cfg: RunConfig) -> int:
    records = _load_records(cfg)
    if records is None:
        return EXIT_NO_MANIFEST
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out)
    split = dp.split_by_patient(records, cfg.split_fraction, cfg.seed)
    split.write(out / "split.csv")
    tcfg = cfg.train_config()
    model = build_network(cfg.arch, seed=cfg.seed)

    hist_path = out / "history.csv"
    fh = open(hist_path, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(["epoch", "loss", "lr", "seconds"])

    def on_epoch(rec):
        writer.writerow([rec.epoch, repr(rec.loss), repr(rec.lr), f"{rec.seconds:.3f}"])
        fh.flush()
        if cfg.checkpoint_every and rec.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(model, out / f"model_e{rec.epoch:03d}", {"epoch": str(rec.epoch)})

    try:
        result = train(model, split.select(records, "train"), tcfg, on_epoch=on_epoch)
    except NonFiniteLossError as exc:
        _err(f"training aborted: {exc}")
        return EXIT_NONFINITE
    finally:
        fh.close()
    save_checkpoint(model, out / "model", {"epoch": str(tcfg.epochs)})
    if result.history:
        plot_history(result.history, out / "history.png")
        last = result.history[-1]
        print(f"final_loss {last.loss!r}\nfinal_lr {last.lr!r}\ntrain_accuracy {last.accuracy:.4f}")
    return EXIT_OK


def table_row(name: str, input_size: int, summary) -> List[str]:
    mean, std = summary.mean, summary.std
    return [name, f"{input_size}x{input_size}"] + [f"{100 * mean[k]:.1f} ±{100 * std[k]:.1f}" for k in METRIC_NAMES]


TABLE_HEADER = ["CNN", "Input", "Recall", "Precision", "F1", "Accuracy"]


def _checkpoint_stem(cfg: RunConfig, checkpoint: Optional[str]) -> Path:
    return Path(checkpoint) if checkpoint else Path(cfg.out) / "model"


def cmd_eval(cfg: RunConfig, checkpoint: Optional[str] = None) -> int:
    stem = _checkpoint_stem(cfg, checkpoint)
    try:
        model = load_checkpoint(stem, spec=cfg.arch)
    except SpecHashMismatch as exc:
        _err(str(exc))
        return EXIT_SPEC_MISMATCH
    records = _load_records(cfg)
    if records is None:
        return EXIT_NO_MANIFEST
    split_file = stem.parent / "split.csv"
    split = (dp.SplitManifest.read(split_file, cfg.seed) if split_file.is_file()
             else dp.split_by_patient(records, cfg.split_fraction, cfg.seed))
    test = split.select(records, "test")
    summary = evaluate_repeated(model, test, cfg.repeats, cfg.arch.input_size, cfg.seed)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out)
    row = table_row("CEC-CNN", cfg.arch.input_size, summary)
    with open(out / "table.csv", "w", newline="") as fh:
        csv.writer(fh).writerows([TABLE_HEADER, row])
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "mean", "std"])
        w.writerows([k, repr(summary.mean[k]), repr(summary.std[k])] for k in METRIC_NAMES)
    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "tp", "tn", "fp", "fn"] + list(METRIC_NAMES))
        for i, (c, m) in enumerate(zip(summary.counts, summary.runs)):
            w.writerow([i, c.tp, c.tn, c.fp, c.fn] + [repr(getattr(m, k)) for k in METRIC_NAMES])
    widths = [max(len(a), len(b)) for a, b in zip(TABLE_HEADER, row)]
    text = "\n".join(" | ".join(v.ljust(n) for v, n in zip(r, widths)) for r in (TABLE_HEADER, row)) + "\n"
    (out / "metrics.txt").write_text(text)
    plot_metric_runs(summary, out / "metrics.png", title=f"{cfg.repeats} test repeats")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_erf(cfg: RunConfig, checkpoint: Optional[str], layer: Optional[str], channels: List[int]) -> int:
    if checkpoint:
        try:
            model = load_checkpoint(checkpoint, spec=cfg.arch)
        except SpecHashMismatch as exc:
            _err(str(exc))
            return EXIT_SPEC_MISMATCH
    else:
        model = build_network(cfg.arch, seed=cfg.seed)
        calibrate_batchnorm(model, seed=cfg.seed)
    layer = layer or model.head_input
    if layer not in model.nodes:
        _err(f"unknown layer {layer!r}; available layers:\n  " + "\n  ".join(model.layer_names()))
        return EXIT_UNKNOWN_LAYER
    out = Path(cfg.out) / "erf"
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(Path(cfg.out))
    footprint = rf_footprint(model, layer)
    maps, rows = [], []
    for ch in channels or [0]:
        try:
            erf = compute_erf(model, layer, ch, runs=cfg.erf_runs, seed=cfg.seed)
        except (IndexError, ValueError) as exc:
            _err(str(exc))
            return EXIT_UNKNOWN_LAYER
        render_erf(erf, out / f"{layer}_c{ch}")
        maps.append(erf)
        inside = support_within_footprint(erf, footprint)
        rows.append([layer, ch, f"{erf.support_radius():.4f}", erf.max_radius(), str(inside).lower()])
    plot_erf_panel(maps, out / "erf_panel.png")
    header = ["layer", "channel", "support_radius", "max_radius", "within_theoretical_rf"]
    with open(out / "erf_report.csv", "w", newline="") as fh:
        csv.writer(fh).writerows([header] + rows)
    print(",".join(header))
    for r in rows:
        print(",".join(str(v) for v in r))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--input-size", type=int, choices=(32, 64))
    common.add_argument("--epochs", type=int)
    common.add_argument("--repeats", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cec-cnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="split, train and checkpoint")
    t.add_argument("--data", help="dataset directory containing manifest.csv")
    e = sub.add_parser("eval", parents=[common], help="repeated random-crop test evaluation")
    e.add_argument("--data", help="dataset directory containing manifest.csv")
    e.add_argument("--checkpoint", help="checkpoint stem (default <out>/model)")
    r = sub.add_parser("erf", parents=[common], help="effective receptive field maps")
    r.add_argument("--checkpoint", help="checkpoint stem; omitted = fresh model with calibrated batch norm")
    r.add_argument("--layer", help="node name (default: head input)")
    r.add_argument("--channel", type=int, action="append", default=[], help="repeatable")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = _resolve(args)
    with _thread_limit(cfg):
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        return cmd_erf(cfg, args.checkpoint, args.layer, args.channel)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
