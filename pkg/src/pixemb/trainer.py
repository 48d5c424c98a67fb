"""SGD training with step-decay learning rate, evaluation and augmentation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .network import ModelGraph, argmax_head, build_model, decayed_params, forward, freeze

log = logging.getLogger(__name__)

PAD = 4


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"loss became {loss} at step {step}")


@dataclass
class TrainConfig:
    batch_size: int = 64
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    total_steps: int = 200
    lr_decay_steps: tuple[int, ...] = (100, 150)
    lr_decay_factor: float = 0.1
    seed: int = 0
    eval_every: int = 10
    augment: bool = True

    def __post_init__(self):
        self.lr_decay_steps = tuple(int(s) for s in self.lr_decay_steps)
        b = self.lr_decay_steps
        if any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError(f"lr_decay_steps must be strictly increasing, got {b}")
        if b and b[-1] >= self.total_steps:
            raise ValueError(f"lr decay at {b[-1]} not before total_steps={self.total_steps}")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be positive")

    @classmethod
    def desk(cls, n_train: int, epochs: float = 3.0, batch_size: int = 64, **kw) -> "TrainConfig":
        """Budget of ``epochs`` passes, decayed 10x at 50% and 75% of it."""
        total = max(4, math.ceil(epochs * n_train / batch_size))
        return cls(batch_size=batch_size, total_steps=total,
                   lr_decay_steps=(total // 2, (3 * total) // 4), **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_steps"] = list(self.lr_decay_steps)
        return d


def lr_at(step: int, cfg: TrainConfig) -> float:
    passed = sum(1 for b in cfg.lr_decay_steps if step >= b)
    return cfg.base_lr * cfg.lr_decay_factor ** passed


@dataclass
class MetricRecord:
    step: int
    loss: float
    lr: float
    top1: float
    top5: float | None


@dataclass
class MetricLog:
    records: list[MetricRecord] = field(default_factory=list)

    def append(self, rec: MetricRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError(f"metric step {rec.step} not after {self.records[-1].step}")
        self.records.append(rec)

    def top1(self) -> np.ndarray:
        return np.array([r.top1 for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "lr", "top1", "top5"])
        for r in self.records:
            w.writerow([r.step, repr(r.loss), repr(r.lr), repr(r.top1),
                        "" if r.top5 is None else repr(r.top5)])
        return buf.getvalue()


# ---------------------------------------------------------------- augmentation

def pad_image(img: np.ndarray, pad: int = PAD) -> np.ndarray:
    return np.pad(img, ((pad, pad), (pad, pad), (0, 0)))


def crop(img: np.ndarray, top: int, left: int, size: int = 32) -> np.ndarray:
    return img[top:top + size, left:left + size]


def flip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1]


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad by 4, random 32x32 crop, horizontal flip with probability 0.5."""
    size = image.shape[0]
    top, left = rng.integers(0, 2 * PAD + 1, size=2)
    out = crop(pad_image(image), top, left, size)
    if rng.random() < 0.5:
        out = flip(out)
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(im, rng) for im in images])


# ---------------------------------------------------------------- evaluation

def evaluate(model: ModelGraph, data: Dataset, path: str = "infer-float",
             batch_size: int = 256) -> dict[str, float | None]:
    """Single-crop top-1 (and top-5 when there are at least 5 classes)."""
    mode = path if path.startswith("infer-") else f"infer-{path}"
    frozen = freeze(model) if mode == "infer-packed" else None
    hit1 = hit5 = 0
    k5 = data.num_classes >= 5
    for s in range(0, len(data), batch_size):
        imgs = data.images[s:s + batch_size]
        labels = data.labels[s:s + batch_size]
        logits = forward(model, imgs, mode, frozen=frozen)
        hit1 += int((argmax_head(logits) == labels).sum())
        if k5:
            order = np.argsort(-np.asarray(logits, dtype=np.float64), axis=1, kind="stable")[:, :5]
            hit5 += int((order == labels[:, None]).any(axis=1).sum())
    n = len(data)
    return {"top1": hit1 / n, "top5": hit5 / n if k5 else None}


# ---------------------------------------------------------------- training

def sgd_step(model: ModelGraph, grads: dict[str, np.ndarray], velocity: dict[str, np.ndarray],
             lr: float, cfg: TrainConfig, decay: set[str]) -> None:
    for key, w in model.params.items():
        g = grads[key]
        if key in decay and cfg.weight_decay:
            g = g + ad.DTYPE(cfg.weight_decay) * w
        v = velocity.get(key)
        v = g if v is None else ad.DTYPE(cfg.momentum) * v + g
        velocity[key] = v
        w -= ad.DTYPE(lr) * v
    table = model.table()
    if table is not None:
        table.clamp_()


def train(model: ModelGraph, data: Dataset, cfg: TrainConfig,
          eval_data: Dataset | None = None, progress=None) -> tuple[ModelGraph, MetricLog]:
    """Train in place; returns the model and its metric log.

    Batch order, augmentation and therefore the whole run are fixed by
    ``cfg.seed`` together with the model's initial parameters.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    out_classes = model.output_shape(*data.images.shape[1:3])[0]
    if out_classes != data.num_classes:
        raise ValueError(f"model predicts {out_classes} classes, dataset has {data.num_classes}")
    rng = np.random.default_rng(cfg.seed)
    decay = decayed_params(model)
    velocity: dict[str, np.ndarray] = {}
    metrics = MetricLog()
    order = rng.permutation(len(data))
    cursor = 0
    window: list[float] = []
    for step in range(cfg.total_steps):
        if cursor + cfg.batch_size > len(order):
            order = rng.permutation(len(data))
            cursor = 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        images = data.images[idx]
        if cfg.augment:
            images = augment_batch(images, rng)
        tape = ad.Tape()
        logits, leaves = forward(model, images, "train", tape=tape)
        loss = ad.softmax_cross_entropy(logits, data.labels[idx])
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDivergedError(step, value)
        tape.backward(loss)
        grads = {k: tape.grad(t) for k, t in leaves.items()}
        lr = lr_at(step, cfg)
        sgd_step(model, grads, velocity, lr, cfg, decay)
        window.append(value)
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.total_steps:
            if eval_data is not None:
                acc = evaluate(model, eval_data)
            else:
                acc = {"top1": float("nan"), "top5": None}
            metrics.append(MetricRecord(done, float(np.mean(window)), lr, acc["top1"], acc["top5"]))
            window = []
            log.info("step %d loss %.4f lr %.4g top1 %.4f", done, metrics.records[-1].loss, lr, acc["top1"])
            if progress is not None:
                progress(metrics.records[-1])
    return model, metrics


# ---------------------------------------------------------------- experiments

def eval_steps(cfg: TrainConfig) -> list[int]:
    """Steps at which :func:`train` records metrics."""
    steps = list(range(cfg.eval_every, cfg.total_steps + 1, cfg.eval_every))
    if not steps or steps[-1] != cfg.total_steps:
        steps.append(cfg.total_steps)
    return steps


def _in_final_third(step: int, total_steps: int) -> bool:
    return step > 2 * total_steps / 3


def roughness(metrics: MetricLog, total_steps: int) -> float:
    """Std of eval-to-eval top-1 changes over the final third of training."""
    tail = [r.top1 for r in metrics.records if _in_final_third(r.step, total_steps)]
    if len(tail) < 3:
        raise ValueError(f"need at least 3 evaluations in the final third, got {len(tail)}")
    return float(np.std(np.diff(tail)))


@dataclass
class RunResult:
    preset: str
    seed: int
    top1: float
    top5: float | None
    packed_top1: float | None
    roughness: float
    metrics: MetricLog = field(repr=False)


def run_experiment(presets, seeds, train_data: Dataset, eval_data: Dataset, cfg: TrainConfig,
                   d: int = 8, progress=None) -> list[RunResult]:
    """Train every preset under every seed with an identical schedule."""
    tail = [s for s in eval_steps(cfg) if _in_final_third(s, cfg.total_steps)]
    if len(tail) < 3:
        raise ValueError(f"{len(tail)} evaluations fall in the final third of {cfg.total_steps} "
                         "steps; roughness needs at least 3 (lower eval_every)")
    results = []
    for seed in seeds:
        for preset in presets:
            model = build_model(preset, d=d, num_classes=train_data.num_classes, seed=seed)
            run_cfg = TrainConfig(**{**cfg.to_dict(), "seed": seed})
            model, metrics = train(model, train_data, run_cfg, eval_data)
            final = evaluate(model, eval_data)
            packed = None
            if model.layer("conv") is None:
                packed = evaluate(model, eval_data, "infer-packed")["top1"]
            res = RunResult(preset, seed, final["top1"], final["top5"], packed,
                            roughness(metrics, run_cfg.total_steps), metrics)
            results.append(res)
            if progress is not None:
                progress(res)
    return results
