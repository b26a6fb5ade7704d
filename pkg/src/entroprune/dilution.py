"""Mask schedules, AdamW, and the dilution training loop.

Selected attention layers are switched to Diluted mode and trained while a
shared scalar mask M decays from 1 to 0.  With compensation the block
computes ``M * Attn(x) + (2 - M) * x``; without it, ``M * Attn(x) + x``.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .data import LabeledTensorDataset
from .vit import BlockMode, Mode, ViTModel, accuracy, attention_param_names

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """Training produced a non-finite loss."""


class ScheduleKind(str, enum.Enum):
    LINEAR = "linear"
    COSINE = "cosine"


class Granularity(str, enum.Enum):
    EPOCH = "epoch"
    ITERATION = "iteration"


@dataclass(frozen=True)
class MaskSchedule:
    kind: ScheduleKind = ScheduleKind.LINEAR
    total_steps: int = 100
    granularity: Granularity = Granularity.ITERATION

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    def __call__(self, t: float) -> float:
        if self.total_steps == 0:
            return 0.0
        return mask_value(self, t)


def mask_value(schedule: MaskSchedule, t: float) -> float:
    """M(t): 1 at t = 0, 0 for t >= T, non-increasing in between."""
    T_ = schedule.total_steps
    if T_ <= 0:
        raise ValueError(f"mask schedule needs T > 0, got {T_}")
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    if schedule.kind is ScheduleKind.LINEAR:
        return max(0.0, 1.0 - t / T_)
    if t >= T_:
        return 0.0
    return 0.5 * (1.0 + math.cos(math.pi * t / T_))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def _decays(name: str, arr: np.ndarray) -> bool:
    return arr.ndim >= 2 and name not in ("pos_embed",)


class AdamW:
    """Decoupled weight decay Adam; 1-D tensors and positional embeddings are not decayed."""

    def __init__(self, params: dict[str, T.Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay and _decays(name, p.data):
                p.data *= p.data.dtype.type(1 - lr * self.weight_decay)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * upd).astype(p.data.dtype)


def cosine_lr(step: int, total: int, base: float, floor: float, warmup: int = 0) -> float:
    """Linear warmup over ``warmup`` steps, then cosine decay from ``base`` to ``floor``."""
    if step < warmup:
        return base * (step + 1) / warmup
    span = total - warmup
    if span <= 1:
        return base
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * (step - warmup) / (span - 1)))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-3
    min_lr: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.05
    epochs: int = 10
    warmup_epochs: int = 0
    batch_size: int = 64
    seed: int = 0
    compensation: bool = True
    selected_layers: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class StepLog:
    step: int
    epoch: int
    loss: float
    mask: float
    grad_norm_attn: float
    grad_norm_other: float
    lr: float


@dataclass
class TrainLog:
    steps: list[StepLog] = field(default_factory=list)
    final_train_accuracy: float | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "M", "grad_norm_attn", "grad_norm_other", "lr"])
        for s in self.steps:
            w.writerow([s.step, repr(s.loss), repr(s.mask), repr(s.grad_norm_attn),
                        repr(s.grad_norm_other), repr(s.lr)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([StepLog(int(r["step"]), -1, float(r["loss"]), float(r["M"]),
                            float(r["grad_norm_attn"]), float(r["grad_norm_other"]),
                            float(r["lr"])) for r in rows])

    def losses(self) -> np.ndarray:
        return np.array([s.loss for s in self.steps])


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[s:s + batch_size] for s in range(0, n, batch_size)]


def _attn_names(model: ViTModel, layers: Iterable[int]) -> set[str]:
    out: set[str] = set()
    for i in layers:
        out.update(n for n in attention_param_names(i) if n in model.params)
    return out


def _fit(model: ViTModel, dataset: LabeledTensorDataset, cfg: TrainConfig,
         schedule: MaskSchedule | None) -> TrainLog:
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.params, cfg.lr, cfg.betas, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total_iters = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    selected = list(cfg.selected_layers)
    attn_names = _attn_names(model, selected)
    trainlog = TrainLog()

    def current_mask(epoch: int, it: int) -> float:
        if schedule is None:
            return 1.0
        t = epoch if schedule.granularity is Granularity.EPOCH else it
        return schedule(t)

    def apply_mask(m: float) -> None:
        for i in selected:
            model.modes[i] = BlockMode(Mode.DILUTED, m, cfg.compensation)

    it = 0
    # divergence surfaces as NumericError, not numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            for idx in _batches(len(dataset), cfg.batch_size, rng):
                m = current_mask(epoch, it)
                if schedule is not None:
                    apply_mask(m)
                lr = cosine_lr(it, total_iters, cfg.lr, cfg.min_lr, warmup)
                model.zero_grad()
                logits, _ = model.forward(dataset.images[idx])
                loss = T.cross_entropy(logits, dataset.labels[idx])
                lval = float(loss.data)
                if not math.isfinite(lval):
                    raise NumericError(f"non-finite loss {lval} at step {it} "
                                       f"(epoch {epoch}, M={m})")
                T.backward(loss)
                g_attn = T.parameters_norm(model.params[n].grad for n in attn_names
                                           if model.params[n].grad is not None)
                g_other = T.parameters_norm(p.grad for n, p in model.params.items()
                                            if n not in attn_names and p.grad is not None)
                opt.step(lr)
                trainlog.steps.append(StepLog(it, epoch, lval, m, g_attn, g_other, lr))
                it += 1
    if schedule is not None:
        final = current_mask(cfg.epochs, it)
        if final != 0.0:
            log.warning("mask schedule did not reach 0 (M=%g); increase epochs or lower T", final)
        apply_mask(final)
    model.zero_grad()
    return trainlog


def train(model: ViTModel, dataset: LabeledTensorDataset, cfg: TrainConfig) -> TrainLog:
    """Plain supervised training with AdamW and cosine learning-rate decay."""
    trainlog = _fit(model, dataset, cfg, None)
    trainlog.final_train_accuracy = accuracy(model.predict(dataset.images), dataset.labels)
    return trainlog


def train_dilute(model: ViTModel, cfg: TrainConfig, schedule: MaskSchedule,
                 dataset: LabeledTensorDataset) -> tuple[ViTModel, TrainLog]:
    """Dilute ``cfg.selected_layers`` of a copy of ``model``; returns (model, log)."""
    bad = [i for i in cfg.selected_layers if not 0 <= i < model.config.depth]
    if bad:
        raise IndexError(f"selected layers {bad} out of range")
    not_full = [i for i in cfg.selected_layers if model.modes[i].kind is not Mode.FULL]
    if not_full:
        raise ValueError(f"selected blocks {not_full} are not in Full mode")
    out = model.copy()
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    if (schedule.granularity is Granularity.ITERATION
            and cfg.epochs * steps_per_epoch < schedule.total_steps):
        raise ValueError(f"{cfg.epochs} epochs x {steps_per_epoch} steps < T={schedule.total_steps}")
    if schedule.granularity is Granularity.EPOCH and cfg.epochs < schedule.total_steps:
        raise ValueError(f"{cfg.epochs} epochs < T={schedule.total_steps}")
    trainlog = _fit(out, dataset, cfg, schedule)
    trainlog.final_train_accuracy = accuracy(out.predict(dataset.images), dataset.labels)
    return out, trainlog


@dataclass
class StabilityReport:
    steps: np.ndarray
    mask: np.ndarray
    grad_norm_attn: np.ndarray
    grad_norm_other: np.ndarray
    residual_scale: np.ndarray
    loss: np.ndarray

    def relative_loss_variation(self) -> float:
        """Variance of step-to-step relative loss changes."""
        loss = self.loss
        if len(loss) < 3:
            return 0.0
        rel = np.diff(loss) / np.maximum(np.abs(loss[:-1]), 1e-12)
        return float(np.var(rel))


def gradient_stability_report(trainlog: TrainLog, compensation: bool = True) -> StabilityReport:
    mask = np.array([s.mask for s in trainlog.steps])
    return StabilityReport(
        steps=np.array([s.step for s in trainlog.steps]),
        mask=mask,
        grad_norm_attn=np.array([s.grad_norm_attn for s in trainlog.steps]),
        grad_norm_other=np.array([s.grad_norm_other for s in trainlog.steps]),
        residual_scale=(2.0 - mask) if compensation else np.ones_like(mask),
        loss=trainlog.losses(),
    )


def evaluate(model: ViTModel, dataset: LabeledTensorDataset, masked: Sequence[int] = (),
             batch_size: int = 256) -> dict[str, float]:
    logits = model.predict(dataset.images, batch_size, masked)
    return {"top1": accuracy(logits, dataset.labels, 1), "top5": accuracy(logits, dataset.labels, 5)}
