"""Command-line entry point: ``bhddbench {train,eval,benchmark,gradcheck}``.

Every :class:`RunConfig` field is also a flag (``--train-subset 0``); values
given on the command line win over ``--config FILE``, which wins over the
defaults.  ``--full`` switches to the full-scale profile.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, build_config
from .data import DATA_ROOT_ENV, IDXError, load_idx, subset
from .gradcheck import TOLERANCE, run_gradcheck
from .metrics import CSV_HEADER, dumps_json, render_confusion, report_to_dict, serialize_report, top_confusions
from .models import ModelKind
from .train import (
    LOG_HEADER,
    CheckpointError,
    DataConfigError,
    TrainingError,
    split_paths,
    evaluate_checkpoint,
    load_splits,
    train_model,
)

log = logging.getLogger("bhddbench")

BENCHMARK_CSV = "benchmark.csv"
BENCHMARK_JSON = "benchmark.json"


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (overrides --config)")
    for f in dataclasses.fields(RunConfig):
        default = RunConfig.__dataclass_fields__[f.name]
        kind = type(default.default) if default.default is not dataclasses.MISSING else None
        if f.name == "models":
            g.add_argument(_flag(f.name), nargs="+", metavar="KIND", default=None)
        elif f.name == "overrides":
            g.add_argument(_flag(f.name), type=json.loads, default=None, metavar="JSON",
                           help='per-model overrides, e.g. \'{"MLP": {"dropout": 0.1}}\'')
        elif kind in (int, float):
            g.add_argument(_flag(f.name), type=kind, default=None)
        else:
            help_ = f"dataset root (default: ${DATA_ROOT_ENV})" if f.name == "data_root" else None
            g.add_argument(_flag(f.name), type=str, default=None, help=help_)
    p.add_argument("--config", metavar="FILE", help="JSON config file")
    p.add_argument("--full", action="store_true", help="full-scale profile: all data, 50 epochs")
    p.add_argument("-v", "--verbose", action="store_true")


def _config_from(args) -> RunConfig:
    cli = {f.name: getattr(args, f.name) for f in dataclasses.fields(RunConfig)}
    return build_config(args.config, cli, full=args.full)


def _write(path: Path, payload: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, bytes):
        path.write_bytes(payload)
    else:
        path.write_text(payload)


def _write_report(out: Path, report) -> None:
    _write(out / "report.json", serialize_report(report, "json"))
    _write(out / "report.csv", serialize_report(report, "csv"))
    _write(out / "confusion.txt", render_confusion(report.confusion))


def _summary(report) -> str:
    return (f"{report.model}: precision {report.precision:.4f}  recall {report.recall:.4f}  "
            f"f1 {report.f1:.4f}  accuracy {report.accuracy:.4f}")


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig, kind: str | None = None) -> int:
    kind = ModelKind.parse(kind or cfg.model)
    splits = load_splits(cfg)
    out = Path(cfg.out_dir) / kind.value
    print(LOG_HEADER, flush=True)
    result = train_model(cfg, kind, splits, out_dir=out, on_epoch=lambda r: print(r.line(), flush=True))
    _write_report(out, result.report)
    print(render_confusion(result.report.confusion), end="")
    print(_summary(result.report))
    print(f"artifacts in {out}")
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: str, kind: str | None = None) -> int:
    test = load_idx(*split_paths(cfg, "test"), split="test")
    if cfg.test_subset:
        test = subset(test, cfg.test_subset, cfg.seed)
    report = evaluate_checkpoint(cfg, checkpoint, test, kind)
    out = Path(cfg.out_dir) / report.model / "eval"
    _write_report(out, report)
    print(render_confusion(report.confusion), end="")
    print(_summary(report))
    print(f"report in {out}")
    return 0


def run_benchmark(cfg: RunConfig) -> dict:
    """Train and evaluate every configured kind; failures are recorded, not raised."""
    kinds = [ModelKind.parse(k) for k in cfg.models]
    splits = load_splits(cfg)
    rows = []
    for kind in kinds:
        log.info("benchmark: %s", kind.value)
        out = Path(cfg.out_dir) / kind.value
        try:
            result = train_model(cfg, kind, splits, out_dir=out)
        except Exception as e:  # one broken model must not stop the table
            log.error("%s failed: %s", kind.value, e)
            rows.append({"model": kind.value, "status": "failed", "error": f"{type(e).__name__}: {e}"})
            continue
        _write_report(out, result.report)
        entry = {"status": "ok", **report_to_dict(result.report)}
        entry["top_confusions"] = [list(c) for c in top_confusions(result.report.confusion, 3)]
        rows.append(entry)
    return {
        "config": cfg.to_dict(),
        "dataset_sizes": splits.sizes(),
        "models": rows,
    }


def benchmark_csv(summary: dict) -> str:
    """One row per model in benchmark order; a failed model keeps its row with empty metric cells."""
    lines = [",".join(CSV_HEADER)]
    for row in summary["models"]:
        if row["status"] != "ok":
            lines.append(f"{row['model']},,,,")
            continue
        raw = row["raw"]
        lines.append(",".join([row["model"]] + [f"{raw[k]:.4f}" for k in CSV_HEADER[1:]]))
    return "\n".join(lines) + "\n"


def cmd_benchmark(cfg: RunConfig) -> int:
    summary = run_benchmark(cfg)
    out = Path(cfg.out_dir)
    _write(out / BENCHMARK_CSV, benchmark_csv(summary))
    _write(out / BENCHMARK_JSON, dumps_json(summary))
    print(benchmark_csv(summary), end="")
    failed = [r["model"] for r in summary["models"] if r["status"] != "ok"]
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
    print(f"tables in {out / BENCHMARK_CSV} and {out / BENCHMARK_JSON}")
    return 1 if failed else 0


def cmd_gradcheck(tolerance: float = TOLERANCE, max_probes: int | None = 16, only: str | None = None) -> int:
    from .gradcheck import LAYER_ITEMS, MODEL_ITEMS

    items = {**LAYER_ITEMS, **MODEL_ITEMS}
    if only:
        items = {k: v for k, v in items.items() if only.lower() in k.lower()}
    print(f"{'item':<30} {'convention':<20} {'max rel gap':>10}  status")
    results = run_gradcheck(items, tolerance=tolerance, max_probes=max_probes,
                            on_result=lambda r: print(r.line(), flush=True))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed (tolerance {tolerance:g})")
    return 1 if failed else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bhddbench", description="Handwritten-digit model benchmark")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model and evaluate it on the test split")
    _add_config_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("checkpoint")
    _add_config_flags(e)

    b = sub.add_parser("benchmark", help="train and evaluate every model kind")
    _add_config_flags(b)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer and model")
    g.add_argument("--tolerance", type=float, default=TOLERANCE)
    g.add_argument("--max-probes", type=int, default=16, help="coordinates probed per parameter (0 = all)")
    g.add_argument("--only", help="substring filter on item names")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.tolerance, args.max_probes or None, args.only)
        cfg = _config_from(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.model)
        return cmd_benchmark(cfg)
    except (ConfigError, DataConfigError, IDXError, CheckpointError, TrainingError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
