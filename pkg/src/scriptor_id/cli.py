"""``scriptor-id`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .corpus import load_patch_sets, write_manifest
from .errors import ConfigError, DataError, ScriptorError, SpecError
from .plot import write_line_chart
from .preprocess import extract_page
from .synthdata import generate_corpus
from .train import (
    Dataset,
    evaluate_multi_tuple,
    evaluate_topk,
    result_rows,
    sweep,
    sweep_rows,
    train,
    write_results_csv,
)

log = logging.getLogger("scriptor_id")

PAGE_SUFFIXES = {".pgm", ".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}


def thread_limit() -> int:
    """Parallelism cap from ``SCRIPTOR_THREADS`` (default: all cores)."""
    raw = os.environ.get("SCRIPTOR_THREADS")
    if raw is None or raw.strip() == "":
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"SCRIPTOR_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"SCRIPTOR_THREADS must be a positive integer, got {raw!r}")
    return value


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    if args.out:
        out = Path(args.out)
    elif cfg.source is not None:
        out = Path(cfg.source).resolve().parent
    else:
        out = Path.cwd()
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out) if args.out else cfg.paths.corpus
    if out is None:
        raise ConfigError("[paths] corpus (or --out) is required for synth")
    counts = generate_corpus(cfg.synth, out)
    s = cfg.synth
    print(f"corpus {out}: {s.num_writers} writers, {sum(counts.values())} patches "
          f"(" + ", ".join(f"{k} {v}" for k, v in counts.items()) + ")")
    return 0


def _pages(root: Path) -> list[tuple[Path, str]]:
    """``(page, writer)`` pairs: ``<root>/<writer>/<page>`` or ``<root>/<writer>_<rest>``."""
    pages = []
    for path in sorted(root.rglob("*")):
        if not path.is_file() or path.suffix.lower() not in PAGE_SUFFIXES:
            continue
        rel = path.relative_to(root)
        writer = rel.parts[0] if len(rel.parts) > 1 else path.stem.split("_")[0]
        pages.append((path, writer))
    return pages


def cmd_preprocess(cfg: ExperimentConfig, args) -> int:
    cfg.require("pages")
    out = Path(args.out) if args.out else cfg.paths.patches
    if out is None:
        raise ConfigError("[paths] patches (or --out) is required for preprocess")
    out.mkdir(parents=True, exist_ok=True)
    pages = _pages(cfg.paths.pages)
    if not pages:
        raise DataError(f"no page images found under {cfg.paths.pages}")
    records, skipped = [], 0
    for page, writer in pages:
        page_id = "_".join(page.relative_to(cfg.paths.pages).with_suffix("").parts)
        try:
            records += extract_page(page, out, writer, cfg.preprocess, page_id=page_id)
        except DataError as exc:
            skipped += 1
            print(f"warning: {page}: {exc}", file=sys.stderr)
    write_manifest(out / "manifest.tsv", records)
    print(f"{len(records)} patches from {len(pages) - skipped} pages ({skipped} skipped) -> {out}")
    return 0


def _load_split(cfg: ExperimentConfig, split: str):
    cfg.require(f"{split}_manifest")
    return load_patch_sets(cfg.paths.manifest(split))


def cmd_train(cfg: ExperimentConfig, args) -> int:
    train_set = _load_split(cfg, "train")
    val_set = _load_split(cfg, "val")
    out = _out_dir(args, cfg)
    ckpt = cfg.paths.checkpoint or out / "model.ckpt"
    model, history = train(cfg.training, train_set, val_set)
    save_checkpoint(model, ckpt)
    history.write_csv(out / "history.csv")
    if args.plot:
        write_line_chart(out / "history.svg", [r.epoch for r in history.records],
                         [r.val_top1 for r in history.records], title="Validation top-1",
                         x_label="epoch", y_label="top-1 (%)")
    print(f"best validation top-1 {history.best_val_top1:.2f}% at epoch {history.best_epoch}; "
          f"checkpoint {ckpt}")
    return 0


def _check_spec(model, cfg: ExperimentConfig, ckpt: Path):
    if model.net.spec != cfg.training.spec:
        raise SpecError(f"checkpoint {ckpt} holds spec {model.net.spec} but the config asks for "
                        f"{cfg.training.spec}")


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args, cfg)
    ev = cfg.eval
    name = ev.experiment
    rows, plot_x, plot_y, x_label = [], [], [], "n"

    if cfg.sweep is not None and cfg.sweep.retrain:
        data = Dataset(_load_split(cfg, "train"), _load_split(cfg, "val"), _load_split(cfg, "test"))
        grid = cfg.sweep.grid
        workers = min(thread_limit(), len(grid.cells()))
        results = sweep(grid, cfg.training, data, ev.k_list, ev.trials, workers=workers)
        rows = sweep_rows(name, results)
        x_label = _swept_axis(grid)
        for r in results:
            if r.report is not None:
                plot_x.append(_axis_value(r, x_label))
                plot_y.append(r.report.mean(1))
        failed = [r for r in results if r.error]
        write_results_csv(out / "results.csv", rows)
        if args.plot:
            _plot(out, plot_x, plot_y, x_label)
        for r in failed:
            print(f"error: sweep cell {r.cell}: {r.error}", file=sys.stderr)
        print(f"{len(results) - len(failed)}/{len(results)} sweep cells -> {out / 'results.csv'}")
        return 1 if failed else 0

    cfg.require("checkpoint")
    ckpt = cfg.paths.checkpoint
    model = load_checkpoint(ckpt)
    _check_spec(model, cfg, ckpt)
    test_set = _load_split(cfg, "test")
    if cfg.sweep is not None:
        grid = cfg.sweep.grid
        if len(grid.n_s) > 1 or len(grid.writers) > 1 or len(grid.aggregation) > 1 or len(grid.k) > 1 \
                or grid.n_s != (None,) or grid.writers != (None,):
            raise ConfigError("without retrain only [sweep] n can vary; set retrain = true to sweep other axes")
        ns = grid.n
    else:
        ns = (ev.n or cfg.training.n,)
    for n in ns:
        if ev.t > 1:
            report = evaluate_multi_tuple(model, test_set, n, ev.t, ev.seed, ev.k_list, ev.trials, ev.fusion).report
        else:
            report = evaluate_topk(model, test_set, n, ev.k_list, ev.trials, ev.seed)
        rows += result_rows(name, report, writers=len(test_set), n=n, n_s=None,
                            aggregation=model.aggregation, k=model.k, epochs="", seed=ev.seed)
        plot_x.append(n)
        plot_y.append(report.mean(1))
        print(f"n={n}: top-1 {report.mean(1):.2f}% (var {report.var(1):.2f}) over {report.trials} trials")
    write_results_csv(out / "results.csv", rows)
    if args.plot:
        _plot(out, plot_x, plot_y, x_label)
    return 0


def _swept_axis(grid) -> str:
    for axis in ("n", "n_s", "writers", "k"):
        if len(getattr(grid, axis)) > 1:
            return axis
    return "n"


def _axis_value(row, axis: str):
    return {"n": row.cell.n, "n_s": row.n_s, "writers": row.writers, "k": row.cell.k or 0}[axis]


def _plot(out: Path, xs, ys, x_label: str):
    write_line_chart(out / "accuracy.svg", xs, ys, title=f"Mean top-1 vs {x_label}",
                     x_label=x_label, y_label="top-1 (%)")


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scriptor-id", description="Text-independent writer identification toolkit.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="sectioned key-value config file")
    ap.add_argument("--plot", action="store_true", help="also write an SVG chart")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--seed", type=int, help="override every seed in the config")
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        with threadpool_limits(limits=thread_limit()):
            return COMMANDS[args.command](cfg, args)
    except ScriptorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
