"""Command-line interface.

Subcommands::

    ftensemble pretrain      --config cfg.txt --out DIR
    ftensemble evaluate      --config cfg.txt --model DIR --out report.json
    ftensemble run           --config cfg.txt --out DIR
    ftensemble selftest
    ftensemble gen-synthetic --spec spec.txt --out DIR

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. FT_THREADS caps episode-level parallelism; FT_BACKEND selects the
kernel backend.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

from . import selftest as selftest_mod
from .config import load_config
from .data_io import load_dataset
from .ensemble import load_model, save_model
from .errors import ConfigError, DataError, NumericalError
from .pipeline import evaluate_model, pretrain, run_experiment

MODEL_FILENAME = "model.ftem"


def _write_pretrain_log(path, log, cfg) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.config_hash()} seed={cfg.seed}\n")
        if not log:
            return
        fieldnames = list(log[0].keys())
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(log)


def _write_report(report, json_path: Path) -> None:
    json_path.write_text(report.to_json())
    json_path.with_suffix(".csv").write_text(report.csv_summary())


def _cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    source = load_dataset(cfg.source_data, role="source")
    started = time.perf_counter()
    model, log = pretrain(source, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / MODEL_FILENAME, model)
    _write_pretrain_log(out / "pretrain_losses.csv", log, cfg)
    print(
        f"pretrained {len(model.branches)} branch(es) on {source.n_items} items "
        f"in {time.perf_counter() - started:.1f}s -> {out / MODEL_FILENAME}",
        file=sys.stderr,
    )
    return 0


def _cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    model = load_model(Path(args.model) / MODEL_FILENAME)
    target = load_dataset(cfg.target_data, role="target")
    started = time.perf_counter()
    report = evaluate_model(model, cfg, target)
    _write_report(report, Path(args.out))
    print(
        f"{cfg.episodes} episodes in {time.perf_counter() - started:.1f}s: "
        f"mean={report.mean:.4f} ci95={report.ci95:.4f}",
        file=sys.stderr,
    )
    return 0


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    artifacts = run_experiment(cfg)
    save_model(out / MODEL_FILENAME, artifacts.model)
    _write_pretrain_log(out / "pretrain_losses.csv", artifacts.pretrain_log, cfg)
    _write_report(artifacts.report, out / "report.json")
    print(
        f"end-to-end run in {time.perf_counter() - started:.1f}s: "
        f"mean={artifacts.report.mean:.4f} ci95={artifacts.report.ci95:.4f} -> {out}",
        file=sys.stderr,
    )
    return 0


def _cmd_selftest(args) -> int:
    ok = selftest_mod.run_selftest(verbose=True)
    return 0 if ok else 4


def _cmd_gen_synthetic(args) -> int:
    from .synth import load_synth_spec, write_datasets

    spec = load_synth_spec(args.spec)
    src_path, tgt_path = write_datasets(spec, args.out)
    print(f"wrote {src_path} and {tgt_path}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ftensemble",
        description="Cross-domain few-shot classification lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pre-train the ensemble on the source split")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("evaluate", help="run the episodic protocol with a saved model")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True, help="directory containing model.ftem")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("run", help="pre-train and evaluate end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("selftest", help="run the built-in oracle/property checks")
    p.set_defaults(func=_cmd_selftest)

    p = sub.add_parser("gen-synthetic", help="emit synthetic source/target datasets")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_synthetic)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
