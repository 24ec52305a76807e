"""Command-line entry points.

Exit codes: 0 ok, 1 check failure, 2 usage or config error, 3 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from . import data as data_mod
from . import gradsuite
from .config import ConfigError, RunConfig, load_run_config
from .model import Model
from .reports import attention_csv, attention_diff_report, routing_sweep, sweep_csv, write_text
from .routing import report_csv, routing_report
from .train import DivergenceError, TrainResult, make_policy, train

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
DEFAULT_LAMBDAS = (0.0, 0.2, 0.5, 0.8, 1.0)


class UsageError(Exception):
    pass


def _resolve_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _datasets(cfg: RunConfig):
    return data_mod.generate(cfg.data)


def write_run(out: Path, cfg: RunConfig, result: TrainResult, started: float) -> None:
    """Model, per-epoch metrics, per-step losses and the routing table; timestamps go to a sidecar."""
    out.mkdir(parents=True, exist_ok=True)
    result.model.save(out / "model.npz", {"train": cfg.train.to_dict()})
    (out / "metrics.jsonl").write_text(result.metrics_jsonl())
    (out / "steps.jsonl").write_text("".join(json.dumps(s) + "\n" for s in result.steps))
    rows = routing_report(result.decisions) if result.decisions else []
    (out / "routing.csv").write_text(report_csv(rows))
    (out / "config.json").write_text(cfg.to_json() + "\n")
    sidecar = {
        "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "wall_seconds": round(time.time() - started, 3),
    }
    (out / "run_info.json").write_text(json.dumps(sidecar, indent=2) + "\n")


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    source, target = _datasets(cfg)
    started = time.time()
    try:
        result = train(cfg.train, source, target, log_every=args.log_every)
    except DivergenceError as exc:
        print(f"error: training diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    out = Path(cfg.out_dir)
    write_run(out, cfg, result, started)
    final = result.final() if result.metrics else {}
    print(json.dumps({"out": str(out), **{k: final.get(k) for k in ("src_acc", "tgt_acc")}}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.list:
        print("\n".join(gradsuite.CASES))
        return EXIT_OK
    names = list(gradsuite.CASES)
    if args.only is not None:
        names = [n.strip() for n in args.only.split(",") if n.strip()]
        if not names:
            raise UsageError("--only selected no grad-check cases")
        unknown = [n for n in names if n not in gradsuite.CASES]
        if unknown:
            raise UsageError("unknown grad-check case(s): " + ", ".join(unknown))
    failed = []
    for name in names:
        res = gradsuite.run_case(name, seed=args.seed or 0, tol=args.tol)
        status = "ok" if res.passed else "FAIL"
        print(f"{status:4s} {name:18s} max_rel_error={res.report.max_rel_error:.3e} "
              f"checked={res.report.n_checked} kinks={len(res.report.kinks)}")
        if not res.passed:
            failed.append(res)
    if failed:
        print("failing: " + ", ".join(f"{r.name} ({r.report.max_rel_error:.3e})" for r in failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def _load_model(path) -> Model:
    if not Path(path).is_file():
        raise ConfigError(f"model file not found: {path}")
    model, _ = Model.load(path)
    return model


def cmd_report_attention(args) -> int:
    cfg = _resolve_config(args)
    model = _load_model(args.model)
    source, target = _datasets(cfg)
    rows = attention_diff_report(model, source, target, make_policy(cfg.train))
    path = write_text(Path(cfg.out_dir) / "attention_diff.csv", attention_csv(rows))
    print(path)
    return EXIT_OK


def _parse_lambdas(text: str) -> list[float]:
    try:
        lams = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--lambdas must be comma-separated numbers, got {text!r}") from None
    if not lams or any(not 0.0 <= v <= 1.0 for v in lams):
        raise UsageError("--lambdas needs at least one value, all in [0, 1]")
    return lams


def cmd_sweep_lambda(args) -> int:
    cfg = _resolve_config(args)
    lambdas = _parse_lambdas(args.lambdas)
    source, target = _datasets(cfg)
    out = Path(cfg.out_dir)

    def save(lam, result):
        run = replace(cfg, train=replace(cfg.train, lam=lam), out_dir=str(out / f"lambda_{lam:g}"))
        write_run(Path(run.out_dir), run, result, time.time())

    try:
        rows = routing_sweep(cfg.train, lambdas, source, target, on_run=save)
    except DivergenceError as exc:
        print(f"error: training diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(write_text(out / "sweep.csv", sweep_csv(rows)))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    spec = cfg.data if args.seed is None else replace(cfg.data, seed=args.seed)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source, target = data_mod.generate(spec)
    data_mod.save(source, out / "source.dcds")
    data_mod.save(target, out / "target.dcds")
    manifests = {"source": source.manifest, "target": target.manifest}
    (out / "manifest.json").write_text(json.dumps(manifests, indent=2, sort_keys=True) + "\n")
    print(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    model = _load_model(args.model)
    source, target = _datasets(cfg)
    policy = make_policy(cfg.train)
    result = {
        "src_acc": model.accuracy(source.images, source.labels, "source", policy),
        "tgt_acc": model.accuracy(target.images, target.labels, "target", policy),
    }
    if args.out:
        write_text(Path(args.out) / "eval.json", json.dumps(result, indent=2) + "\n")
    print(json.dumps(result))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    # argparse exits with status 2 on malformed arguments, matching EXIT_USAGE
    parser = argparse.ArgumentParser(prog="gdcan", description="Domain-conditioned adaptation experiments on synthetic image pairs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_help="override the training seed"):
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help=seed_help)

    p = sub.add_parser("train", help="train and write model, metrics and routing table")
    common(p)
    p.add_argument("--log-every", type=int, default=0, help="log losses every N steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every primitive and the full loss")
    p.add_argument("--only", help="comma-separated case names")
    p.add_argument("--list", action="store_true", help="list case names and exit")
    p.add_argument("--tol", type=float, default=gradsuite.TOL)
    p.add_argument("--seed", type=int, help="seed for the random probe inputs")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report-attention", help="per-channel attention difference CSV for a trained model")
    common(p)
    p.add_argument("--model", required=True, help="model file written by train")
    p.set_defaults(func=cmd_report_attention)

    p = sub.add_parser("sweep-lambda", help="one training run per routing threshold")
    common(p)
    p.add_argument("--lambdas", default=",".join(f"{v:g}" for v in DEFAULT_LAMBDAS))
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("gen-data", help="render the source/target pair to disk")
    common(p, seed_help="override the data seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("eval", help="source and target accuracy of a trained model")
    common(p)
    p.add_argument("--model", required=True, help="model file written by train")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
