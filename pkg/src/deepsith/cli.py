"""Command-line entry point: ``deepsith <subcommand> ...``.

Configs are JSON files shaped like :class:`deepsith.experiment.ExperimentConfig`.
Any field can be overridden with ``--set dotted.key=value`` (values parsed as
JSON, so ``--set training.lr=[0.002,0.0002]`` works).
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

from .experiment import (
    TASKS,
    ExperimentConfig,
    aggregate,
    build_task,
    export_csv,
    load_records,
    preset,
    run_seed,
    save_records,
    apply_overrides,
)
from .filterbank import geometric_taus, select_k
from .nn import load_checkpoint, save_checkpoint
from .tasks.data import SequenceDataset, export_columns
from .tasks.mnist import ENV_DATA_DIR, default_data_dir, fetch_mnist, import_npm_digits

log = logging.getLogger("deepsith")


def _load_config(args) -> ExperimentConfig:
    if args.config:
        base = json.loads(Path(args.config).read_text())
    elif args.preset:
        base = preset(args.preset, args.k).to_dict()
    else:
        raise SystemExit("give --config FILE or --preset TASK")
    overrides = list(args.set or [])
    if getattr(args, "data_dir", None):
        overrides.append(f"task_params.data_dir={json.dumps(str(args.data_dir))}")
    if getattr(args, "seeds", None):
        overrides.append(f"seeds={json.dumps(args.seeds)}")
    return ExperimentConfig.from_dict(apply_overrides(base, overrides))


def _write_results(records, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_records(records, out_dir / "records.json")
    export_csv(records, out_dir / "results.csv")
    if len(records) >= 2:
        export_csv(aggregate(records), out_dir / "summary.csv", configs=[records[0].config])


def _train(cfg: ExperimentConfig, out_dir: Path | None, checkpoints: bool):
    records = []
    for seed in cfg.run_seeds():
        rec, net = run_seed(cfg, seed, return_net=True)
        records.append(rec)
        status = "FAILED " + rec.error if rec.failed else "ok"
        log.info("seed %d: %s (%.1fs)", seed, status, rec.wall_clock)
        if checkpoints and out_dir is not None and not rec.failed:
            out_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(net, out_dir / f"seed{seed}.npz", rec.config)
    if out_dir is not None:
        _write_results(records, out_dir)
    return records


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or cfg.output or f"runs/{cfg.task}")
    records = _train(cfg, out, args.checkpoint)
    for r in records:
        final = {m: r.last(m) for m in sorted({m for _, m, _ in r.metrics})}
        print(json.dumps({"seed": r.seed, "failed": r.failed, "k": r.resolved_k,
                          "parameters": r.parameter_count, "final": final}))
    return 0 if not any(r.failed for r in records) else 1


def cmd_sweep(args) -> int:
    base = _load_config(args)
    axes = []
    for spec in args.param:
        key, _, values = spec.partition("=")
        if not values:
            raise SystemExit(f"--param {spec!r} must look like key=v1,v2")
        axes.append([f"{key}={v}" for v in values.split(",")])
    out_root = Path(args.out or f"runs/{base.task}-sweep")
    all_records = []
    for combo in itertools.product(*axes):
        cfg = ExperimentConfig.from_dict(apply_overrides(base.to_dict(), combo))
        tag = "_".join(c.replace("=", "-").replace(".", "-") for c in combo)
        log.info("sweep point %s", combo)
        all_records += _train(cfg, out_root / tag, False)
    save_records(all_records, out_root / "records.json")
    export_csv(all_records, out_root / "results.csv")
    return 0 if not any(r.failed for r in all_records) else 1


def cmd_eval(args) -> int:
    net, echo = load_checkpoint(args.checkpoint)
    if args.config or args.preset:
        cfg = _load_config(args)
    elif echo is not None:
        cfg = ExperimentConfig.from_dict(apply_overrides(echo, args.set or []))
    else:
        raise SystemExit("checkpoint carries no config; pass --config or --preset")
    seed = cfg.run_seeds()[0]
    metrics = build_task(cfg, seed).evaluate(net, cfg.training.eval_batch)
    print(json.dumps({"checkpoint": str(args.checkpoint), "seed": seed, **metrics}))
    return 0


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    seed = cfg.run_seeds()[0]
    task = build_task(cfg, seed)
    if task.train is not None:
        ds = task.train
    else:
        X, y = task.stream(1)
        ds = SequenceDataset(X, y)
    if args.limit is not None:
        ds = ds.subset(slice(0, args.limit))
    export_columns(args.out, ds)
    print(f"wrote {len(ds)} samples of {cfg.task} (seed {seed}) to {args.out}")
    return 0


def cmd_select_k(args) -> int:
    report = select_k(geometric_taus(args.tau_min, args.tau_max, args.n_taus), args.k_max, args.samples)
    if args.csv:
        report.to_csv(args.csv)
    print(report.chosen_k)
    return 0


def cmd_export(args) -> int:
    records = load_records(args.records)
    if args.summary:
        export_csv(aggregate(records), args.out, configs=[r.config for r in records[:1]])
    else:
        export_csv(records, args.out)
    return 0


def cmd_fetch_data(args) -> int:
    target = Path(args.data_dir) if args.data_dir else default_data_dir()
    if args.source == "standard":
        fetch_mnist(target)
    else:
        import_npm_digits(target)
    print(f"MNIST files in {target}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepsith", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", type=Path, help="JSON experiment config")
        sp.add_argument("--preset", choices=TASKS, help="start from a built-in task config")
        sp.add_argument("--k", choices=("auto", "table"), default="auto",
                        help="with --preset: choose k by scan or use the published values")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
        sp.add_argument("--seeds", type=int, nargs="+", help="explicit seed list")
        sp.add_argument("--data-dir", type=Path, help=f"MNIST directory (default ${ENV_DATA_DIR} or ./data)")

    sp = sub.add_parser("train", help="train every seed and write results")
    config_args(sp)
    sp.add_argument("--out", type=Path, help="output directory")
    sp.add_argument("--checkpoint", action="store_true", help="save one checkpoint per seed")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="train over the cartesian product of --param values")
    config_args(sp)
    sp.add_argument("--param", action="append", required=True, metavar="KEY=V1,V2")
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on its task's held-out set")
    config_args(sp)
    sp.add_argument("checkpoint", type=Path)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gen", help="write a task's training data as columnar text")
    config_args(sp)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--limit", type=int, help="keep only the first N samples")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("select-k", help="scan k for one tau* grid")
    sp.add_argument("--tau-max", type=float, required=True)
    sp.add_argument("--n-taus", type=int, required=True)
    sp.add_argument("--tau-min", type=float, default=1.0)
    sp.add_argument("--k-max", type=int, default=300)
    sp.add_argument("--samples", type=int, default=2000)
    sp.add_argument("--csv", type=Path, help="write the k/objective curve")
    sp.set_defaults(func=cmd_select_k)

    sp = sub.add_parser("export", help="convert records.json to CSV")
    sp.add_argument("records", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--summary", action="store_true", help="write mean and 95%% CI across seeds")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("fetch-data", help="download MNIST")
    sp.add_argument("--data-dir", type=Path)
    sp.add_argument("--source", choices=("standard", "npm"), default="standard",
                    help="'npm' converts the 10k digits bundled with the npm mnist package")
    sp.set_defaults(func=cmd_fetch_data)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
