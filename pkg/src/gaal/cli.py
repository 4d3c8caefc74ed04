"""Command-line entry point: ``gaal {generate,train,evaluate,ablate,sweep,diagnose}``."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as M
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .data import (
    ArrayData,
    DataError,
    fit_stats,
    generate_synthetic,
    load_csv,
    load_schema,
    save_csv,
    save_schema,
    split,
    to_arrays,
)
from .inference import conflict_trace, evaluate_arrays
from .numerics import RngStream, ShapeError
from .training import STREAM_DATA, STREAM_SPLIT, NumericError, StepDiag, EpochMetrics, train

log = logging.getLogger("gaal")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# -- file helpers ------------------------------------------------------------


def write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _f(x: float) -> str:
    return repr(float(x))


# -- data pipeline -----------------------------------------------------------


@dataclass
class Prepared:
    train: ArrayData
    val: ArrayData
    test: ArrayData


def load_dataset(cfg: ExperimentConfig, seed: int):
    if cfg.data_csv is not None:
        schema, classes = load_schema(cfg.data_schema)
        return load_csv(cfg.data_csv, schema, classes)
    return generate_synthetic(cfg.synthetic_spec(), RngStream(seed, STREAM_DATA))


def prepare(cfg: ExperimentConfig, seed: int) -> Prepared:
    ds = load_dataset(cfg, seed)
    parts = split(ds, cfg.split_fractions, RngStream(seed, STREAM_SPLIT))
    stats = fit_stats(parts.train.tabular_raw, parts.train.schema, parts.train.image)
    arrays = [to_arrays(p, stats) if len(p) else None for p in parts]
    return Prepared(*arrays)


def run_once(cfg: ExperimentConfig, seed: int, data: Prepared | None = None, **overrides):
    """Train one model and evaluate it on the test split (validation if no test rows)."""
    data = data or prepare(cfg, seed)
    tcfg = cfg.train_config(seed=seed, **overrides)
    result = train(data.train, data.val, tcfg)
    target = data.test or data.val or data.train
    return result, evaluate_arrays(result.state, target, tcfg.fusion_weight)


# -- subcommands -------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig) -> int:
    spec = cfg.synthetic_spec()
    ds = generate_synthetic(spec, RngStream(cfg.seed, STREAM_DATA))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(ds, out / "dataset.csv")
    save_schema(ds.schema, out / "dataset.schema", ds.n_classes)
    print(f"N={len(ds)} Y={ds.n_classes} D'={ds.schema.featurized_dim} d_img={ds.d_img}")
    print(f"wrote {out / 'dataset.csv'} and {out / 'dataset.schema'}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig) -> int:
    result, rep = run_once(cfg, cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    M.save_checkpoint(result.state, out / "checkpoint.bin")
    write_atomic(out / "diag.csv", csv_text(StepDiag.CSV_FIELDS, [d.csv_row() for d in result.diags]))
    write_atomic(out / "metrics.csv", csv_text(EpochMetrics.FIELDS, [e.csv_row() for e in result.epochs]))
    write_atomic(out / "config.txt", dump_config(cfg))
    print(f"best epoch {result.best_epoch}: acc_multi={rep.acc_multi:.4f} acc_image={rep.acc_image:.4f} acc_tabular={rep.acc_tabular:.4f}")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig) -> int:
    try:
        state = M.load_checkpoint(cfg.checkpoint_path())
    except ValueError as exc:
        raise DataError(f"unreadable checkpoint: {exc}") from None
    data = prepare(cfg, cfg.seed)
    target = data.test or data.val or data.train
    try:
        rep = evaluate_arrays(state, target, cfg.fusion_weight)
    except ShapeError as exc:
        raise DataError(f"checkpoint does not fit the dataset: {exc}") from None
    out = Path(cfg.out)
    write_atomic(out / "report.txt", rep.to_text())
    results = out / "results.csv"
    header = ("seed", "baseline") + rep.CSV_FIELDS
    row = [str(cfg.seed), cfg.train_baseline] + rep.csv_row()
    if results.exists():
        with open(results, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(row)
    else:
        write_atomic(results, csv_text(header, [row]))
    sys.stdout.write(rep.to_text())
    return EXIT_OK


ABLATION_ROWS = (("none", False, False), ("cgs", True, False), ("cgs+ugg", True, True))


def ablation_table(cfg: ExperimentConfig) -> list[list[str]]:
    rows = []
    for name, cgs, ugg in ABLATION_ROWS:
        accs = []
        for seed in cfg.seeds:
            overrides = {"surgery": cfg.surgery(enable_cgs=cgs, enable_ugg=ugg), "baseline_mode": "gaal"}
            _, rep = run_once(cfg, seed, **overrides)
            accs.append((rep.acc_multi, rep.acc_image, rep.acc_tabular))
        med = np.median(np.array(accs), axis=0)
        rows.append([name, "1" if cgs else "0", "1" if ugg else "0"] + [_f(x) for x in med])
    return rows


def cmd_ablate(cfg: ExperimentConfig) -> int:
    rows = ablation_table(cfg)
    header = ("row", "cgs", "ugg", "acc_multi", "acc_image", "acc_tabular")
    write_atomic(Path(cfg.out) / "ablation.csv", csv_text(header, rows))
    for r in rows:
        print(f"{r[0]:>8}  multi={float(r[3]):.4f} image={float(r[4]):.4f} tabular={float(r[5]):.4f}")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, param: str) -> int:
    out = Path(cfg.out)
    if param == "epsilon":
        rows = []
        for eps in cfg.sweep_epsilon:
            for seed in cfg.seeds:
                _, rep = run_once(cfg, seed, surgery=cfg.surgery(epsilon=eps))
                rows.append([_f(eps), str(seed), _f(rep.acc_multi), _f(rep.acc_image), _f(rep.acc_tabular)])
        header = ("param_value", "seed", "acc_multi", "acc_image", "acc_tabular")
        write_atomic(out / "sweep_epsilon.csv", csv_text(header, rows))
        print(f"wrote {len(rows)} rows to {out / 'sweep_epsilon.csv'}")
        return EXIT_OK

    grid = cfg.sweep_lambda
    rows, surface = [], {}
    for li in grid:
        for lt in grid:
            accs = []
            for seed in cfg.seeds:
                _, rep = run_once(cfg, seed, surgery=cfg.surgery(lambda_image=li, lambda_tabular=lt))
                rows.append([_f(li), _f(lt), str(seed), _f(rep.acc_multi), _f(rep.acc_image), _f(rep.acc_tabular)])
                accs.append(rep.acc_multi)
            surface[li, lt] = float(np.median(accs))
    header = ("lambda_image", "lambda_tabular", "seed", "acc_multi", "acc_image", "acc_tabular")
    write_atomic(out / "sweep_lambda.csv", csv_text(header, rows))
    surf_rows = [[_f(li)] + [_f(surface[li, lt]) for lt in grid] for li in grid]
    write_atomic(out / "sweep_lambda_surface.csv", csv_text(["lambda_image\\lambda_tabular"] + [_f(x) for x in grid], surf_rows))
    print(f"wrote {len(rows)} rows to {out / 'sweep_lambda.csv'}")
    return EXIT_OK


def cmd_diagnose(cfg: ExperimentConfig) -> int:
    data = prepare(cfg, cfg.seed)
    tcfg = cfg.train_config(baseline_mode="joint", modalities=("I", "T"))
    # full-length trace, no early stopping
    trace = conflict_trace(data.train, None, tcfg, cfg.diagnose_bins)
    out = Path(cfg.out)
    edges = trace.bin_edges
    bins = [[_f(edges[k]), _f(edges[k + 1]), str(int(c))] for k, c in enumerate(trace.counts)]
    write_atomic(out / "conflict_hist.csv", csv_text(("bin_lo", "bin_hi", "count"), bins))
    write_atomic(out / "conflict_trace.csv", csv_text(("t", "cosine"), [[str(t + 1), _f(c)] for t, c in enumerate(trace.cosines)]))
    summary = f"steps={trace.cosines.size}\nnegative_fraction={trace.negative_fraction!r}\n"
    write_atomic(out / "conflict_summary.txt", summary)
    sys.stdout.write(summary)
    return EXIT_OK


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="root seed (u64)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--baseline", choices=("gaal", "joint", "alt_no_surgery", "orthogonal"))
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gaal", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train one model")
    ev = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on the test split")
    ev.add_argument("--checkpoint", help="checkpoint path (default <out>/checkpoint.bin)")
    sub.add_parser("ablate", parents=[common], help="surgery / guidance ablation table")
    sw = sub.add_parser("sweep", parents=[common], help="epsilon or lambda sensitivity sweep")
    sw.add_argument("--param", choices=("epsilon", "lambda"), required=True)
    sub.add_parser("diagnose", parents=[common], help="gradient-conflict histogram under joint learning")
    return p


def resolve_config(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = args.out
    if args.baseline is not None:
        overrides["train.baseline"] = args.baseline
    if getattr(args, "checkpoint", None):
        overrides["checkpoint"] = args.checkpoint
    from .config import KEYS

    unknown = [k for k in overrides if k not in KEYS]
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    cfg = load_config(args.config, overrides)
    return cfg.validate(need_checkpoint=args.command == "evaluate")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.param)
        return cmd_diagnose(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
