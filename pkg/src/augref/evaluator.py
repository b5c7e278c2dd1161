from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import trainer
from .data import DatasetIndex

# (efa, ada, dhfr) per ablation configuration
ABLATIONS: dict[str, tuple[bool, bool, bool]] = {
    "V0": (False, False, False),
    "V1": (True, False, False),
    "V2": (True, True, False),
    "V3": (True, False, True),
    "V4": (False, False, True),
    "full": (True, True, True),
}


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows true class, columns predicted

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


@dataclass
class MetricsReport:
    recall: np.ndarray
    precision: np.ndarray
    f1: np.ndarray
    macro_recall: float
    macro_precision: float
    macro_f1: float
    accuracy: float
    degenerate: list[int] = field(default_factory=list)  # classes with a zero denominator

    def lines(self, classes: list[str] | None = None) -> list[str]:
        names = classes or [str(i) for i in range(len(self.recall))]
        out = [f"{'class':>12} {'recall':>9} {'precision':>9} {'f1':>9}"]
        for name, r, p, f in zip(names, self.recall, self.precision, self.f1):
            out.append(f"{name:>12} {r:9.4f} {p:9.4f} {f:9.4f}")
        out.append(f"{'macro':>12} {self.macro_recall:9.4f} {self.macro_precision:9.4f} {self.macro_f1:9.4f}")
        out.append(f"accuracy={self.accuracy:.6f}")
        if self.degenerate:
            out.append(f"warning: zero denominators for classes {self.degenerate}")
        return out


def confusion(preds, labels, K: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions for {labels.size} labels")
    for name, v in (("prediction", preds), ("label", labels)):
        bad = v[(v < 0) | (v >= K)]
        if bad.size:
            raise ValueError(f"{name} class id {int(bad[0])} outside [0, {K})")
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def _ratio(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ok = den > 0
    return np.where(ok, num / np.where(ok, den, 1), 0.0), ~ok


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    c = np.asarray(cm.counts)
    if c.size == 0 or c.sum() == 0:
        raise ValueError("metrics of an empty confusion matrix")
    tp = np.diag(c).astype(np.float64)
    recall, bad_r = _ratio(tp, c.sum(axis=1))
    precision, bad_p = _ratio(tp, c.sum(axis=0))
    f1, bad_f = _ratio(2 * precision * recall, precision + recall)
    degenerate = [int(i) for i in np.flatnonzero(bad_r | bad_p | bad_f)]
    return MetricsReport(
        recall,
        precision,
        f1,
        float(recall.mean()),
        float(precision.mean()),
        float(f1.mean()),
        float(tp.sum() / c.sum()),
        degenerate,
    )


def write_confusion(path, cm: ConfusionMatrix, classes: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + list(classes))
        for name, row in zip(classes, cm.counts):
            w.writerow([name] + [int(v) for v in row])


# ---------------------------------------------------------------- ablation


def ablation_config(base: trainer.TrainConfig, name: str, seed: int) -> trainer.TrainConfig:
    efa, ada, dhfr = ABLATIONS[name]
    if ada and not efa:
        raise ValueError(f"ablation {name} enables the adaptive loss without augmentation")
    return dataclasses.replace(base, efa=efa, ada=ada, dhfr=dhfr, seed=seed)


def ablation_header(classes: list[str]) -> list[str]:
    return ["config", "seed", "accuracy"] + list(classes)


def read_ablation(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_one(index: DatasetIndex, base: trainer.TrainConfig, name: str, seed: int, out_dir=None) -> dict:
    cfg = ablation_config(base, name, seed)
    try:
        result = trainer.fit(index, cfg, out_dir=out_dir)
    except Exception as exc:
        raise RuntimeError(f"ablation {name} seed {seed} failed: {exc}") from exc
    cm = confusion(result.predictions, result.test_labels, index.num_classes)
    per_class = metrics(cm).recall
    row = {"config": name, "seed": str(seed), "accuracy": repr(result.final_accuracy)}
    row.update({c: repr(float(a)) for c, a in zip(index.classes, per_class)})
    return row


def run_ablation(
    index: DatasetIndex,
    base_cfg: trainer.TrainConfig,
    seeds: Iterable[int],
    configs: Iterable[str] = tuple(ABLATIONS),
    out_csv=None,
    runner: Callable[..., dict] | None = None,
    log: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Train every (config, seed) pair; rows already present in ``out_csv`` are reused.

    Data order and initialization depend only on the seed, so configurations
    sharing a seed see identical batches.
    """
    seeds = list(seeds)
    configs = list(configs)
    if not seeds:
        raise ValueError("need at least one seed")
    unknown = [c for c in configs if c not in ABLATIONS]
    if unknown:
        raise ValueError(f"unknown ablation configs {unknown}")
    runner = runner or run_one
    header = ablation_header(index.classes)
    done = {(r["config"], r["seed"]): r for r in read_ablation(out_csv)} if out_csv else {}

    fh = writer = None
    if out_csv is not None:
        fresh = not Path(out_csv).exists()
        fh = open(out_csv, "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        if fresh:
            writer.writeheader()
    rows = []
    try:
        for name in configs:
            for seed in seeds:
                key = (name, str(seed))
                if key in done:
                    rows.append(done[key])
                    continue
                row = runner(index, base_cfg, name, seed)
                rows.append(row)
                if writer is not None:
                    writer.writerow(row)
                    fh.flush()
                if log is not None:
                    log(row)
    finally:
        if fh is not None:
            fh.close()
    return rows


def summarize(rows: list[dict]) -> list[tuple[str, float, int]]:
    """Mean accuracy per config, best first."""
    acc: dict[str, list[float]] = {}
    for r in rows:
        acc.setdefault(r["config"], []).append(float(r["accuracy"]))
    means = [(name, float(np.mean(v)), len(v)) for name, v in acc.items()]
    return sorted(means, key=lambda t: (-t[1], t[0]))
