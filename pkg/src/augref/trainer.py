from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import augmenter, data, nn, refiner
from . import tensor as T
from .extractor import SmallCNN, extract
from .nn import Mode, Params
from .tensor import Tensor

CHECKPOINT_FORMAT = "augref-checkpoint/1"
METRICS_HEADER = ["epoch", "lr", "l_reg", "l_ada", "l_total", "test_accuracy"]

# child streams of the run seed; data order uses the seed directly
_STREAM_INIT = 1
_STREAM_MIX = 2


class NonFiniteLoss(RuntimeError):
    def __init__(self, epoch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}: {detail}")
        self.epoch = epoch
        self.detail = detail


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 160
    warmup_epochs: int = 15
    cosine_period: int = 320
    P: int = 4
    Q: int = 8
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-5
    lambda1: float = 1.0
    lambda2: float = 0.8
    rho: float = 1.0
    mix_beta: float = 0.1
    seed: int = 0
    efa: bool = True
    ada: bool = True
    dhfr: bool = True
    image_size: int = 32
    channels: tuple = (16, 32, 64)
    similarity: str = "pooled"
    classifier_input: str = "normalized"
    eval_batch: int = 100

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.warmup_epochs < 0 or self.cosine_period < 1:
            raise ValueError("warmup_epochs must be nonnegative and cosine_period positive")
        if self.P < 2 or self.Q < 2:
            raise ValueError(f"need P >= 2 and Q >= 2, got P={self.P}, Q={self.Q}")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.image_size % 8:
            raise ValueError(f"image_size must be divisible by 8, got {self.image_size}")
        if self.dhfr and self.image_size < 24:
            raise ValueError(f"the refiner needs image_size >= 24 (3 x 3 maps), got {self.image_size}")
        if self.classifier_input not in ("normalized", "pooled"):
            raise ValueError(f"classifier_input must be 'normalized' or 'pooled', got {self.classifier_input!r}")
        if self.similarity not in ("pooled", "flat"):
            raise ValueError(f"similarity must be 'pooled' or 'flat', got {self.similarity!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d


@dataclass
class OptimState:
    momentum: float = 0.9
    weight_decay: float = 5e-5
    base_lr: float = 0.01
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    l_reg: float
    l_ada: float
    l_total: float
    test_accuracy: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(v)) for v in (self.lr, self.l_reg, self.l_ada, self.l_total, self.test_accuracy)]


@dataclass
class FitResult:
    params: Params
    optim: OptimState
    history: list[EpochLog]
    predictions: np.ndarray
    test_labels: np.ndarray
    classes: list[str]

    @property
    def final_accuracy(self) -> float:
        return self.history[-1].test_accuracy


# ---------------------------------------------------------------- model


def backbone_for(cfg: TrainConfig) -> SmallCNN:
    return SmallCNN(cfg.channels)


def init_model(num_classes: int, cfg: TrainConfig, rng: np.random.Generator | None = None) -> Params:
    """All parameters, refiner included, in a fixed order regardless of ablation flags."""
    if rng is None:
        rng = np.random.default_rng([cfg.seed, _STREAM_INIT])
    params: Params = {}
    bb = backbone_for(cfg)
    bb.init_params(params, rng)
    refiner.init_refiner(params, bb.out_channels, rng)
    nn.init_linear(params, "classifier", bb.out_channels, num_classes, rng)
    return params


def pool(maps: Tensor) -> Tensor:
    n, c = maps.shape[:2]
    return T.reshape(T.adaptive_avg_pool(maps, (1, 1)), (n, c))


def head(maps: Tensor, params: Params, mode: Mode, cfg: TrainConfig) -> tuple[Tensor, Tensor]:
    if cfg.dhfr:
        maps = refiner.refine(maps, params, mode).refined
    e = pool(maps)
    if cfg.classifier_input == "normalized":
        e = T.l2_normalize(e, axis=1)
    return nn.classify(e, params)


def predict(params: Params, images: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    bb = backbone_for(cfg)
    preds = []
    with T.no_grad():
        for i in range(0, len(images), cfg.eval_batch):
            maps = bb(Tensor(images[i : i + cfg.eval_batch]), params, Mode.EVAL)
            logits, _ = head(maps, params, Mode.EVAL, cfg)
            preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------- optimization


def sgd_step(params: Params, grads: dict[str, np.ndarray | None], state: OptimState, lr: float) -> None:
    """Momentum SGD with coupled weight decay; buffers and grad-less params are skipped."""
    for name, g in grads.items():
        if g is None or nn.is_buffer(name):
            continue
        p = params[name]
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        g = g + state.weight_decay * p.data
        v = state.velocity.get(name)
        v = g if v is None else state.momentum * v + g
        state.velocity[name] = v
        updated = p.data - lr * v
        if not np.all(np.isfinite(updated)):
            raise T.NonFiniteError(f"update of {name} is not finite")
        p.data = updated


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    phase = math.pi * (epoch - cfg.warmup_epochs) / cfg.cosine_period
    return cfg.base_lr * 0.5 * (1.0 + math.cos(phase))


def train_step(
    images: np.ndarray,
    labels: np.ndarray,
    params: Params,
    optim: OptimState,
    cfg: TrainConfig,
    rng: np.random.Generator,
    lr: float,
) -> augmenter.LossBreakdown:
    for p in params.values():
        p.grad = None
    labels = np.asarray(labels, dtype=np.int64)
    batch = extract(Tensor(images), params, Mode.TRAIN, labels, backbone=backbone_for(cfg), similarity=cfg.similarity)
    maps = batch.maps
    virtuals = []
    l_ada = Tensor(0.0)
    if cfg.efa:
        sim = augmenter.similarity_matrix(batch.embeddings)
        pairs = augmenter.search_pairs(sim, labels)
        virtuals = augmenter.synthesize_virtual(batch, pairs, rng, beta=cfg.mix_beta)
        if cfg.ada and cfg.lambda2 != 0:
            d_bm = augmenter.benchmark_distance(pairs)
            psi = augmenter.dynamic_intensity(pairs, d_bm, cfg.rho)
            l_ada = augmenter.adaptive_loss(pairs, psi)
        if virtuals:
            maps = T.concat([maps, T.stack([v.map for v in virtuals])])

    _, probs = head(maps, params, Mode.TRAIN, cfg)
    n = len(labels)
    probs_virtual = probs[n:] if virtuals else None
    l_reg = augmenter.recognition_loss(probs[:n], labels, probs_virtual, virtuals)
    losses = augmenter.total_loss(l_reg, l_ada, cfg.lambda1, cfg.lambda2, cfg.rho)
    T.backward(losses.l_total)
    sgd_step(params, {k: p.grad for k, p in nn.trainable(params).items()}, optim, lr)
    return losses


def snap_to_storage(params: Params) -> None:
    """Round parameters to the float32 checkpoint width so saved state evaluates identically."""
    for name, p in params.items():
        with np.errstate(over="ignore"):
            stored = p.data.astype(np.float32)
        if not np.all(np.isfinite(stored)):
            raise T.NonFiniteError(f"{name} overflows 32-bit storage")
        p.data = stored.astype(np.float64)


def fit(
    index: data.DatasetIndex,
    cfg: TrainConfig,
    out_dir=None,
    log: Callable[[EpochLog], None] | None = None,
) -> FitResult:
    train_x, train_y = data.load_split(index, "train", cfg.image_size)
    test_x, test_y = data.load_split(index, "test", cfg.image_size)
    offsets = np.concatenate([[0], np.cumsum([len(s) for s in index.samples["train"]])])

    params = init_model(index.num_classes, cfg)
    optim = OptimState(cfg.momentum, cfg.weight_decay, cfg.base_lr)
    mix_rng = np.random.default_rng([cfg.seed, _STREAM_MIX])
    history: list[EpochLog] = []
    preds = np.zeros(0, dtype=np.int64)

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        plan = data.plan_batches(index, cfg.P, cfg.Q, cfg.seed, epoch)
        totals = np.zeros(3)
        for batch in plan.batches:
            rows = [offsets[c] + i for c, i in batch]
            try:
                losses = train_step(train_x[rows], train_y[rows], params, optim, cfg, mix_rng, lr)
            except T.NonFiniteError as exc:
                raise NonFiniteLoss(epoch, str(exc)) from exc
            totals += losses.values()
        try:
            snap_to_storage(params)
        except T.NonFiniteError as exc:
            raise NonFiniteLoss(epoch, str(exc)) from exc
        preds = predict(params, test_x, cfg)
        acc = float(np.mean(preds == test_y)) if len(test_y) else 0.0
        entry = EpochLog(epoch, lr, *(totals / len(plan.batches)), acc)
        history.append(entry)
        if log is not None:
            log(entry)

    result = FitResult(params, optim, history, preds, test_y, list(index.classes))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics(out_dir / "metrics.csv", history)
        checkpoint_save(params, out_dir / "checkpoint", cfg=cfg, classes=index.classes, optim=optim)
    return result


def write_metrics(path, history: list[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for e in history:
            w.writerow(e.row())


# ---------------------------------------------------------------- checkpoints


def _safe(name: str) -> str:
    return name.replace("/", "_") + ".tns"


def checkpoint_save(
    params: Params,
    path,
    cfg: TrainConfig | None = None,
    classes: list[str] | None = None,
    optim: OptimState | None = None,
) -> Path:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    records = []
    for name, t in params.items():
        data.tns_write(path / "params" / _safe(name), t)
        records.append({"name": name, "shape": list(t.shape), "buffer": nn.is_buffer(name)})
    manifest = {"format": CHECKPOINT_FORMAT, "params": records}
    if cfg is not None:
        manifest["config"] = cfg.to_dict()
    if classes is not None:
        manifest["classes"] = list(classes)
    if optim is not None:
        (path / "velocity").mkdir(exist_ok=True)
        for name, v in optim.velocity.items():
            data.tns_write(path / "velocity" / _safe(name), v)
        manifest["optimizer"] = {
            "momentum": optim.momentum,
            "weight_decay": optim.weight_decay,
            "base_lr": optim.base_lr,
            "velocity": sorted(optim.velocity),
        }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return path


@dataclass
class Checkpoint:
    params: Params
    cfg: TrainConfig | None
    classes: list[str] | None
    optim: OptimState | None


def checkpoint_load(path, into: Params | None = None) -> Checkpoint:
    """Load a checkpoint directory and validate it against an architecture.

    The architecture is ``into`` when given, else the one rebuilt from the
    stored config. Unknown or missing names and shape mismatches raise
    :class:`CheckpointError` naming the offending parameters.
    """
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no manifest.json in {path}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest in {path}: {exc}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")

    try:
        cfg = TrainConfig(**manifest["config"]) if "config" in manifest else None
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid config in manifest: {exc}") from None
    classes = manifest.get("classes")
    if into is None and cfg is not None and classes is not None:
        into = init_model(len(classes), cfg, np.random.default_rng(0))

    try:
        records = {r["name"]: tuple(r["shape"]) for r in manifest["params"]}
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed parameter record in manifest: {exc}") from None
    if into is not None:
        unknown = sorted(set(records) - set(into))
        missing = sorted(set(into) - set(records))
        if unknown:
            raise CheckpointError(f"unknown parameter names in checkpoint: {', '.join(unknown)}")
        if missing:
            raise CheckpointError(f"parameters missing from checkpoint: {', '.join(missing)}")
        for name, shape in records.items():
            if into[name].shape != shape:
                raise CheckpointError(
                    f"shape mismatch for parameter {name}: checkpoint {shape}, model {into[name].shape}"
                )

    params: Params = {}
    for name, shape in records.items():
        try:
            t = data.tns_read(path / "params" / _safe(name))
        except (OSError, data.TnsError) as exc:
            raise CheckpointError(f"cannot read parameter {name}: {exc}") from None
        if t.shape != shape:
            raise CheckpointError(f"parameter {name} file has shape {t.shape}, manifest says {shape}")
        t.requires_grad = not nn.is_buffer(name)
        params[name] = t

    optim = None
    if "optimizer" in manifest:
        o = manifest["optimizer"]
        optim = OptimState(o["momentum"], o["weight_decay"], o["base_lr"])
        for name in o.get("velocity", []):
            try:
                optim.velocity[name] = data.tns_read(path / "velocity" / _safe(name)).data
            except (OSError, data.TnsError) as exc:
                raise CheckpointError(f"cannot read velocity for {name}: {exc}") from None
    return Checkpoint(params, cfg, classes, optim)
