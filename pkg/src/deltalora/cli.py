"""Command-line entry point: ``train``, ``verify``, ``compare`` and ``sweep``.

Exit codes: 0 ok, 1 property failure, 2 config error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint
from .analysis import cosine_report, summarize_sweep, sweep_csv
from .config import ConfigError, RunConfig, load_config
from .fileio import atomic_write_bytes, csv_text, dumps, write_json, write_jsonl
from .optim import NonFiniteError
from .tasks import build_task
from .trainer import RunResult, sweep, train
from .verify import DEFAULT_TOLERANCES, run_all

EXIT_OK, EXIT_PROPERTY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("deltalora")


def run_id(echo: dict) -> str:
    return hashlib.sha256(dumps(echo).encode("utf-8")).hexdigest()[:12]


def metrics_rows(result: RunResult, mode: str, rid: str):
    lrs = dict(result.lr_trace)
    return [{"step": t, "loss": loss, "lr": lrs[t], "mode": mode, "run_id": rid} for t, loss in result.loss_trace]


def result_summary(result: RunResult, rid: str) -> dict:
    return {
        "run_id": rid,
        "seed": result.seed,
        "config": result.config_echo,
        "loss_trace": result.loss_trace,
        "eval_trace": result.eval_trace,
        "per_layer_cosine": result.per_layer_cosine,
        "final_train_loss": result.final_loss if result.loss_trace else None,
        "final_eval_metric": result.final_eval,
    }


def _load(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out_dir={dumps(args.out)}")
    return load_config(args.config, overrides)


def _task(rc: RunConfig):
    try:
        return build_task(rc.task, rc.model, rc.train.seed)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"invalid task: {exc}") from exc


def write_run(out: Path, result: RunResult, mode: str, task) -> str:
    echo = result.config_echo
    rid = run_id(echo)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", echo)
    write_jsonl(out / "metrics.jsonl", metrics_rows(result, mode, rid))
    summary = result_summary(result, rid)
    summary["task"] = task.descriptor()
    write_json(out / "result.json", summary)
    checkpoint.save_state(out / "checkpoint.bin", result.state, echo)
    return rid


def cmd_train(args) -> int:
    rc = _load(args)
    task = _task(rc)
    echo = rc.echo()
    state = None
    if args.resume:
        state = checkpoint.restore_state(args.resume, task, rc.train)
    result = train(task, rc.train, state=state, stop_at=args.stop_at, config_echo=echo)
    out = Path(rc.out_dir)
    rid = write_run(out, result, rc.train.mode, task)
    print(f"run {rid}: {len(result.loss_trace)} steps, final eval {result.final_eval:.6g} -> {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    rc = _load(args)
    task = _task(rc)
    out = Path(rc.out_dir)
    results = {}
    rows = []
    for mode in rc.modes:
        mode_rc = replace(rc, train=replace(rc.train, mode=mode))
        echo = mode_rc.echo()
        res = train(task, mode_rc.train, config_echo=echo)
        rid = write_run(out / mode, res, mode, task)
        results[mode] = res
        rows.append((mode, rid, repr(res.final_loss), repr(res.final_eval)))
    pretrained = task.pretrained.target_weights()
    report = cosine_report(pretrained, results, {"seed": rc.train.seed})
    atomic_write_bytes(out / "cosine.csv", report.csv().encode("utf-8"))
    atomic_write_bytes(out / "cosine.jsonl", report.jsonl().encode("utf-8"))
    atomic_write_bytes(out / "comparison.csv", csv_text(
        ["mode", "run_id", "final_train_loss", "final_eval_metric"], rows).encode("utf-8"))
    write_json(out / "config.json", rc.echo())
    for mode, c in report.mean_by_mode().items():
        print(f"{mode:>10}: final eval {results[mode].final_eval:.6g}, mean cosine {c:.6f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    rc = _load(args)
    task = _task(rc)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values must be comma-separated numbers: {exc}") from exc
    if not values:
        raise ConfigError("--values is empty")
    workers = int(os.environ.get("DELTA_LORA_THREADS", "1") or 1)
    results = sweep(task, rc.train, args.param, values, workers=workers)
    out = Path(rc.out_dir)
    for v, res in zip(values, results):
        sub = replace(rc, train=replace(rc.train, **{"lam" if args.param == "lambda" else "K": res.config_echo[args.param]}))
        res.config_echo = sub.echo()
        write_run(out / f"{args.param}={v:g}", res, rc.train.mode, task)
    rows = summarize_sweep(results, args.param)
    atomic_write_bytes(out / "sweep.csv", sweep_csv(rows, args.param).encode("utf-8"))
    write_json(out / "config.json", rc.echo())
    for v, loss, ev in rows:
        print(f"{args.param}={v:g}: final train loss {loss:.6g}, final eval {ev:.6g}")
    return EXIT_OK


def _parse_tols(items) -> dict:
    tols = {}
    for item in items or ():
        if "=" in item:
            name, value = item.split("=", 1)
        else:
            name, value = "all", item
        value = float(value)
        if name == "all":
            tols.update({k: value for k in DEFAULT_TOLERANCES})
        elif name in DEFAULT_TOLERANCES:
            tols[name] = value
        else:
            raise ConfigError(f"unknown tolerance {name!r}; choose from {sorted(DEFAULT_TOLERANCES)} or 'all'")
    return tols


def cmd_verify(args) -> int:
    results = run_all(args.seed or 0, _parse_tols(args.tol), args.inject_dropout, args.quick)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return EXIT_PROPERTY if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="delta-lora", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted for nested)")

    p = sub.add_parser("train", help="train one mode and write metrics, result and checkpoint")
    common(p)
    p.add_argument("--resume", help="continue from a checkpoint written by a run with the same config")
    p.add_argument("--stop-at", type=int, help="stop after this many total iterations (schedule still uses T)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="train every mode in config 'modes' from the same init")
    common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="one run per value of lambda or K")
    common(p)
    p.add_argument("--param", required=True, choices=["lambda", "K"])
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 0,0.5,1,2")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the randomized property suite")
    p.add_argument("--seed", type=int, default=0, help="first seed of every property's seed range")
    p.add_argument("--tol", action="append", metavar="[NAME=]VALUE",
                   help="override a tolerance; a bare value or all=VALUE sets every tolerance")
    p.add_argument("--inject-dropout", type=float, default=0.0, metavar="P",
                   help="negative control: low-rank dropout in the gradient-identity check")
    p.add_argument("--quick", action="store_true", help="fewer seeds for the cheap properties")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except checkpoint.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
