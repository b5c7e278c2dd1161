"""``augref`` command line: gen-data, train, eval, ablate, gradcheck.

Exit codes: 0 success, 1 I/O or corrupt input, 2 flag or config error,
3 non-finite training loss, 4 gradient check failure. Logs go to stderr;
results go to stdout and files.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import checks, data, evaluator, trainer
from .nn import Mode

log = logging.getLogger("augref")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NONFINITE, EXIT_GRADCHECK = 0, 1, 2, 3, 4

# desk-scale overrides of the TrainConfig defaults
RUN_DEFAULTS = {"data": "data", "out": "runs/default", "epochs": 60}
RESOLVED_NAME = "resolved_config.yaml"


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    data: Path
    out: Path
    train: trainer.TrainConfig

    def to_dict(self) -> dict:
        return {"data": str(self.data), "out": str(self.out), **self.train.to_dict()}


def _train_fields() -> set[str]:
    return {f.name for f in dataclasses.fields(trainer.TrainConfig)}


def parse_overrides(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(value)
    return out


def resolve_config(raw: dict | None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, file values and overrides; unknown keys are an error."""
    merged = {**RUN_DEFAULTS, **(raw or {}), **(overrides or {})}
    known = _train_fields() | {"data", "out"}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    train_kwargs = {k: v for k, v in merged.items() if k in _train_fields()}
    for f in dataclasses.fields(trainer.TrainConfig):
        if f.name not in train_kwargs:
            continue
        v = train_kwargs[f.name]
        expected = type(f.default)
        if expected is tuple:
            ok = isinstance(v, (list, tuple)) and all(isinstance(c, int) and not isinstance(c, bool) for c in v)
        elif expected is float:
            ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        elif expected is int:
            ok = isinstance(v, int) and not isinstance(v, bool)
        else:
            ok = isinstance(v, expected)
        if not ok:
            raise ConfigError(f"config key {f.name} expects {expected.__name__}, got {v!r}")
        if expected is float:
            train_kwargs[f.name] = float(v)
    try:
        train = trainer.TrainConfig(**train_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(Path(merged["data"]), Path(merged["out"]), train)


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return resolve_config(raw, parse_overrides(overrides or []))


def write_resolved(run: RunConfig) -> Path:
    run.out.mkdir(parents=True, exist_ok=True)
    path = run.out / RESOLVED_NAME
    path.write_text(yaml.safe_dump(run.to_dict(), sort_keys=False))
    return path


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    if args.classes < 2:
        raise UsageError("need at least 2 classes")
    if args.train_per_class < 1 or args.test_per_class < 1:
        raise UsageError("per-class counts must be positive")
    index = data.generate_synthetic(
        args.out, args.classes, args.train_per_class, args.test_per_class, args.size, args.seed
    )
    n_train, n_test = index.count("train"), index.count("test")
    print(f"wrote {n_train + n_test} files ({n_train} train, {n_test} test, {index.num_classes} classes) to {args.out}")
    return EXIT_OK


def _log_epoch(entry: trainer.EpochLog) -> None:
    log.info(
        "epoch %d lr=%.6f l_reg=%.6f l_ada=%.6f l_total=%.6f test_accuracy=%.4f",
        entry.epoch, entry.lr, entry.l_reg, entry.l_ada, entry.l_total, entry.test_accuracy,
    )


def cmd_train(args) -> int:
    run = load_config(args.config, args.set)
    index = data.load_index(run.data)
    write_resolved(run)
    result = trainer.fit(index, run.train, out_dir=run.out, log=_log_epoch)
    print(f"final_accuracy={result.final_accuracy!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = trainer.checkpoint_load(args.checkpoint)
    index = data.load_index(args.data)
    if ckpt.classes and list(ckpt.classes) != index.classes:
        raise UsageError(f"checkpoint classes {ckpt.classes} differ from dataset classes {index.classes}")
    images, labels = data.load_split(index, "test", ckpt.cfg.image_size)
    preds = trainer.predict(ckpt.params, images, ckpt.cfg)
    cm = evaluator.confusion(preds, labels, index.num_classes)
    report = evaluator.metrics(cm)
    for line in report.lines(index.classes):
        print(line)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "confusion.csv"
    evaluator.write_confusion(out, cm, index.classes)
    log.info("confusion matrix written to %s", out)
    return EXIT_OK


def _ablation_job(job) -> dict:
    index, base, name, seed, out_dir = job
    return evaluator.run_one(index, base, name, seed, out_dir=out_dir)


def cmd_ablate(args) -> int:
    run = load_config(args.config, args.set)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from exc
    configs = args.configs.split(",") if args.configs else list(evaluator.ABLATIONS)
    if args.jobs < 1:
        raise UsageError("--jobs must be positive")
    index = data.load_index(run.data)
    write_resolved(run)
    runs_dir = run.out / "runs"

    def log_row(row):
        log.info("ablation %s seed %s accuracy=%s", row["config"], row["seed"], row["accuracy"])

    pending: list[tuple[str, int]] = []

    def serial_runner(idx, base, name, seed):
        return evaluator.run_one(idx, base, name, seed, out_dir=runs_dir / f"{name}_seed{seed}")

    runner = serial_runner
    if args.jobs > 1:
        done = {(r["config"], r["seed"]) for r in evaluator.read_ablation(run.out / "ablation.csv")}
        pending = [(n, s) for n in configs for s in seeds if (n, str(s)) not in done]
        jobs = [(index, run.train, n, s, runs_dir / f"{n}_seed{s}") for n, s in pending]
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            # results arrive in submission order, so rows land in canonical order
            results = iter(pool.map(_ablation_job, jobs))
            runner = lambda idx, base, name, seed: next(results)  # noqa: E731
            rows = evaluator.run_ablation(
                index, run.train, seeds, configs, run.out / "ablation.csv", runner=runner, log=log_row
            )
    else:
        rows = evaluator.run_ablation(
            index, run.train, seeds, configs, run.out / "ablation.csv", runner=runner, log=log_row
        )
    for name, mean, n in evaluator.summarize(rows):
        print(f"{name} mean_accuracy={mean!r} runs={n}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    failed = 0
    for name, report in checks.run_suite(args.seed):
        status = "PASS" if report.passed else "FAIL"
        failed += not report.passed
        print(f"{status} {name} max_rel_err={report.max_rel_err:.3e}")
    return EXIT_GRADCHECK if failed else EXIT_OK


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="augref", description="Feature augmentation and refinement for few-sample recognition.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic speckled dataset")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--train-per-class", type=int, default=20)
    g.add_argument("--test-per-class", type=int, default=50)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", required=True)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="confusion CSV path (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the ablation grid")
    a.add_argument("--config", required=True)
    a.add_argument("--seeds", required=True, help="comma-separated seeds")
    a.add_argument("--configs", help="comma-separated subset of " + ",".join(evaluator.ABLATIONS))
    a.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    a.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and block")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            log.setLevel(logging.DEBUG)
        return args.func(args)
    except trainer.NonFiniteLoss as exc:
        log.error("error: non-finite loss at epoch %d: %s", exc.epoch, exc.detail)
        return EXIT_NONFINITE
    except (trainer.CheckpointError, data.TnsError, OSError) as exc:
        log.error("error: %s", exc)
        return EXIT_IO
    except (UsageError, ConfigError, ValueError) as exc:
        log.error("error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
