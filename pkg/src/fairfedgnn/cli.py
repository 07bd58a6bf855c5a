"""Command-line entry point: ``fairfedgnn {prepare,train,sweep,verify}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime/training error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .data import (
    ConfigurationError,
    DataError,
    PreparedData,
    RatingTable,
    SensitiveAssignment,
    SplitTable,
    prepare,
)
from .evaluation import BETAS, evaluate, ldp_sweep, percent_change, sweep
from .federation import ExperimentConfig, TrainingError, train
from .model import save_checkpoint
from .privacy import privacy_budget
from .reporting import (
    FIGURE3_COLUMNS,
    LDP_COLUMNS,
    ROUNDS_COLUMNS,
    SUMMARY_COLUMNS,
    TABLE1_COLUMNS,
    RunManifest,
    config_hash,
    config_to_text,
    dataset_fingerprint,
    load_config,
    rounds_rows,
    write_csv,
)

logger = logging.getLogger("fairfedgnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _on_off(text: str) -> bool:
    low = text.lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _add_hyper_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI config file ([data], [federation], [model], [fairness], [privacy])")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--prepared", type=Path, help="directory written by `prepare` (otherwise raw data is read)")
    g = p.add_argument_group("hyperparameters (override the config file)")
    g.add_argument("--beta", type=float)
    g.add_argument("--alpha", type=int)
    g.add_argument("--sigma", type=float)
    g.add_argument("--delta", type=float)
    g.add_argument("--lambda", dest="lam", type=float)
    g.add_argument("--ldp", type=_on_off)
    g.add_argument("--K", type=float)
    g.add_argument("--eta", type=float)
    g.add_argument("--hidden", type=int)
    g.add_argument("--layers", type=int)
    g.add_argument("--dropout", type=float)
    g.add_argument("--init-scale", dest="init_scale", type=float)
    g.add_argument("--neighbor-cap", dest="neighbor_cap", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--dataset")
    g.add_argument("--attribute", choices=["gender", "activity"])
    g.add_argument("--data-dir", dest="data_dir")
    g.add_argument("--ncore", dest="n_core", type=int)


OVERRIDE_KEYS = ("beta", "alpha", "sigma", "delta", "lam", "ldp", "K", "eta", "hidden", "layers", "dropout",
                 "init_scale", "neighbor_cap", "epochs", "seed", "dataset", "attribute", "data_dir", "n_core")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fairfedgnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="filter, split and label a raw dataset")
    p.add_argument("--dataset", default="ml-100k", choices=["ml-100k", "ml-1m", "amazon-movies"])
    p.add_argument("--data-dir", type=Path, help="raw files (default data/<dataset>)")
    p.add_argument("--ncore", type=int, default=20)
    p.add_argument("--attribute", action="append", choices=["gender", "activity"],
                   help="repeatable; default gender for MovieLens, activity for Amazon")
    p.add_argument("--out", type=Path, help="write filtered table, splits and groups here")

    p = sub.add_parser("train", help="run one experiment")
    _add_hyper_flags(p)

    p = sub.add_parser("sweep", help="beta sweep and/or (delta, lambda) grid")
    _add_hyper_flags(p)
    p.add_argument("--betas", help="comma-separated fairness budgets, e.g. 0,0.3,0.5,0.7,0.9")
    p.add_argument("--ldp-grid", help="semicolon-separated delta:lambda cells, e.g. 0.2:0.1;0.4:0.15")

    p = sub.add_parser("verify", help="run the built-in property suites")
    p.add_argument("--seeds", type=int, default=1, help="repeat statistical suites over this many seeds")
    p.add_argument("--inject-gradient-bug", action="store_true", help=argparse.SUPPRESS)
    return parser


def _write_table(path: Path, table: RatingTable) -> None:
    with open(path, "w") as fh:
        fh.write("user,item,rating,timestamp\n")
        for u, i, r, t in table.records():
            fh.write(f"{u},{i},{r!r},{t}\n")


def _read_table(path: Path) -> RatingTable:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if arr.size == 0:
        return RatingTable.empty()
    return RatingTable(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2],
                       arr[:, 3].astype(np.int64))


def load_prepared(directory: Path, attribute: str) -> PreparedData:
    directory = Path(directory)
    names = ["filtered.csv", "train.csv", "validation.csv", "test.csv", f"groups_{attribute}.csv"]
    missing = [n for n in names if not (directory / n).exists()]
    if missing:
        raise DataError(f"prepared directory {directory} lacks {missing}; run `fairfedgnn prepare` first")
    split = SplitTable(*(_read_table(directory / n) for n in names[1:4]))
    group_of = {}
    with open(directory / names[4]) as fh:
        next(fh)
        for line in fh:
            u, g = line.strip().split(",")
            group_of[int(u)] = int(g)
    return PreparedData(_read_table(directory / "filtered.csv"), split, SensitiveAssignment(attribute, group_of))


def cmd_prepare(args) -> int:
    data_dir = args.data_dir or Path("data") / args.dataset
    attributes = args.attribute or (["activity"] if args.dataset == "amazon-movies" else ["gender"])
    prepared = None
    for attr in attributes:
        prepared = prepare(data_dir, args.dataset, args.ncore, attr)
        if args.out:
            args.out.mkdir(parents=True, exist_ok=True)
            with open(args.out / f"groups_{attr}.csv", "w") as fh:
                fh.write("user,group\n")
                for u in sorted(prepared.groups.group_of):
                    fh.write(f"{u},{prepared.groups.group_of[u]}\n")
    t = prepared.table
    line = f"dataset={args.dataset} ncore={args.ncore} {t.stats_line()}"
    split = prepared.split
    line += f" train={len(split.train)} validation={len(split.validation)} test={len(split.test)}"
    if args.out:
        _write_table(args.out / "filtered.csv", t)
        _write_table(args.out / "train.csv", split.train)
        _write_table(args.out / "validation.csv", split.validation)
        _write_table(args.out / "test.csv", split.test)
        (args.out / "stats.txt").write_text(line + "\n")
    print(line)
    return EXIT_OK


def _config_from_args(args) -> ExperimentConfig:
    overrides = {k: getattr(args, k, None) for k in OVERRIDE_KEYS}
    return load_config(args.config, overrides)


def _load_data(args, config: ExperimentConfig) -> PreparedData:
    if args.prepared:
        return load_prepared(args.prepared, config.attribute)
    data_dir = config.data_dir or Path("data") / config.dataset
    return prepare(data_dir, config.dataset, config.n_core, config.attribute)


def run_experiment(config: ExperimentConfig, data: PreparedData, out: Path) -> dict:
    """Train, evaluate on test and write rounds.csv, summary.csv, model.npz, manifest.json."""
    out.mkdir(parents=True, exist_ok=True)
    fingerprint = dataset_fingerprint(data.split.train, data.split.validation, data.split.test)
    manifest = RunManifest.create(config, fingerprint, out)
    result = train(config, data)
    report = evaluate(result.state, result.data.split.test, result.data.groups, config.alpha,
                      result.graphs(), config.model)
    eps = privacy_budget(config.privacy) if config.ldp else None
    write_csv(out / "rounds.csv", ROUNDS_COLUMNS, rounds_rows(manifest, result.history, eps))
    last = result.history[-1] if result.history else None
    summary = {
        "manifest": manifest.hash, "dataset": config.dataset, "attribute": config.attribute,
        "beta": config.beta, "alpha": config.alpha, "sigma": config.sigma, "K": config.K, "eta": config.eta,
        "hidden": config.hidden, "layers": config.layers, "seed": config.seed,
        "epochs_run": len(result.history), "ldp": config.ldp,
        "delta": config.delta if config.ldp else None, "lambda": config.lam if config.ldp else None,
        "epsilon": eps, "test_rmse": report.rmse, "test_disparity": report.disparity,
        "test_rmse_S0": report.group_rmse[0], "test_rmse_S1": report.group_rmse[1],
        "final_val_rmse": last.val_rmse if last else None,
        "final_P": result.stats.P, "final_Q": result.stats.Q,
        "config_hash": config_hash(config), "dataset_fingerprint": fingerprint,
    }
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, [summary])
    save_checkpoint(out / "model.npz", result.state,
                    {"manifest": manifest.hash, "seed": config.seed, "user_ids": result.data.user_ids.tolist(),
                     "item_ids": result.data.item_ids.tolist()})
    manifest.write(out / "manifest.json")
    (out / "config.ini").write_text(config_to_text(config))
    return summary


def cmd_train(args) -> int:
    config = _config_from_args(args)
    data = _load_data(args, config)
    summary = run_experiment(config, data, args.out)
    print(f"test_rmse={summary['test_rmse']:.4f} test_disparity={summary['test_disparity']:.4f} "
          f"out={args.out}")
    return EXIT_OK


def _parse_betas(text):
    if text is None:
        return None
    vals = [float(x) for x in text.split(",") if x.strip()]
    if not vals:
        raise UsageError("empty --betas")
    return vals


def _parse_grid(text):
    if text is None:
        return None
    cells = []
    for cell in text.split(";"):
        if not cell.strip():
            continue
        try:
            d, lam = cell.split(":")
            cells.append((float(d), float(lam)))
        except ValueError:
            raise UsageError(f"bad grid cell {cell!r}; expected delta:lambda") from None
    if not cells:
        raise UsageError("empty --ldp-grid")
    return cells


def cmd_sweep(args) -> int:
    betas = _parse_betas(args.betas)
    grid = _parse_grid(args.ldp_grid)
    if betas is None and grid is None:
        raise UsageError("nothing to sweep: give --betas and/or --ldp-grid")
    config = _config_from_args(args)
    data = _load_data(args, config)
    args.out.mkdir(parents=True, exist_ok=True)
    fingerprint = dataset_fingerprint(data.split.train, data.split.validation, data.split.test)
    manifest = RunManifest.create(config, fingerprint, args.out)
    manifest.write(args.out / "manifest.json")
    failed = 0
    if betas is not None:
        rows = sweep(config, data, betas)
        base = next((r for r in rows if r.beta == 0.0 and r.error is None), None)
        rmse_pct = percent_change([r.rmse for r in rows], base.rmse) if base else [math.nan] * len(rows)
        disp_pct = percent_change([r.disparity for r in rows], base.disparity) if base else [math.nan] * len(rows)
        table = []
        fig = []
        for r, rp, dp in zip(rows, rmse_pct, disp_pct):
            failed += r.error is not None
            table.append({"manifest": manifest.hash, "dataset": config.dataset, "attribute": config.attribute,
                          "beta": r.beta, "rmse": r.rmse, "disparity": r.disparity,
                          "rmse_pct_change": rp, "disparity_pct_change": dp, "error": r.error})
            for epoch, v in enumerate(r.val_disparity):
                fig.append({"manifest": manifest.hash, "dataset": config.dataset, "attribute": config.attribute,
                            "beta": r.beta, "epoch": epoch, "val_disparity": v})
        write_csv(args.out / "table1.csv", TABLE1_COLUMNS, table)
        write_csv(args.out / "figure3.csv", FIGURE3_COLUMNS, fig)
        for row in table:
            print(f"beta={row['beta']} rmse={row['rmse']:.4f} disparity={row['disparity']:.4f}")
    if grid is not None:
        rows = ldp_sweep(config, data, grid)
        out = []
        for r in rows:
            failed += r.error is not None
            out.append({"manifest": manifest.hash, "dataset": config.dataset, "attribute": config.attribute,
                        "beta": r.beta, "delta": r.delta, "lambda": r.lam, "epsilon": r.epsilon,
                        "rmse": r.rmse, "disparity": r.disparity, "error": r.error})
            print(f"delta={r.delta} lambda={r.lam} epsilon={r.epsilon:.4f} rmse={r.rmse:.4f}")
        write_csv(args.out / "ldp.csv", LDP_COLUMNS, out)
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suites

    results = run_suites(seeds=range(args.seeds), inject_gradient_bug=args.inject_gradient_bug)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    if failed:
        print("failed: " + ", ".join(r.name for r in failed), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "sweep": cmd_sweep, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
