"""End-to-end workflows built from the module operations, with frozen benchmark defaults."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import LabeledTensorDataset, SynthSpec, split_dataset, synthesize
from .dilution import MaskSchedule, TrainConfig, TrainLog, evaluate, train, train_dilute
from .fuser import fuse
from .nose import first_n_select, nose_select, random_select
from .vit import ViTConfig, ViTModel, param_count

# Synthetic benchmark defaults (calibrated so the depth-6 toy exceeds 90% held-out).
BENCH_DATA = SynthSpec(classes=10, per_class=300, image_size=16, noise=0.2, seed=0)
BENCH_HOLDOUT = 0.2
BENCH_MODEL = ViTConfig(image_hw=(16, 16), patch_hw=(4, 4), embed_dim=64, depth=6, heads=4,
                        mlp_ratio=2.0, num_classes=10, seed=0)
BENCH_TRAIN = TrainConfig(lr=1e-3, min_lr=1e-5, epochs=20, warmup_epochs=2, batch_size=64)
BENCH_DILUTE = TrainConfig(lr=5e-4, min_lr=1e-5, epochs=3, batch_size=64)
BENCH_DECAY_EPOCHS = 2
PROBE_SIZE = 1024


def benchmark_data(spec: SynthSpec = BENCH_DATA, holdout: float = BENCH_HOLDOUT
                   ) -> tuple[LabeledTensorDataset, LabeledTensorDataset]:
    return split_dataset(synthesize(spec), holdout)


def train_dense(train_ds: LabeledTensorDataset, config: ViTConfig = BENCH_MODEL,
                cfg: TrainConfig = BENCH_TRAIN, dtype=np.float32) -> tuple[ViTModel, TrainLog]:
    model = ViTModel(config, dtype)
    return model, train(model, train_ds, cfg)


def decay_schedule(train_ds: LabeledTensorDataset, cfg: TrainConfig,
                   decay_epochs: int = BENCH_DECAY_EPOCHS, kind: str = "linear") -> MaskSchedule:
    """Per-iteration schedule reaching M = 0 after ``decay_epochs`` epochs."""
    steps = math.ceil(len(train_ds) / cfg.batch_size)
    return MaskSchedule(kind, steps * decay_epochs, "iteration")


def dilute_and_fuse(model: ViTModel, selected: Sequence[int], train_ds: LabeledTensorDataset,
                    cfg: TrainConfig = BENCH_DILUTE, schedule: MaskSchedule | None = None,
                    compensation: bool = True, seed: int = 0
                    ) -> tuple[ViTModel, ViTModel, TrainLog]:
    """Returns (diluted model at M=0, fused model, training log)."""
    cfg = replace(cfg, selected_layers=list(selected), compensation=compensation, seed=seed)
    schedule = schedule or decay_schedule(train_ds, cfg)
    diluted, log = train_dilute(model, cfg, schedule, train_ds)
    return diluted, fuse(diluted), log


def select_layers(model: ViTModel, method: str, n: int, probe: np.ndarray | None = None,
                  seed: int = 0) -> list[int]:
    if method == "nose":
        if probe is None:
            raise ValueError("nose selection needs a probe set")
        return nose_select(model, n, probe).selected
    if method == "random":
        return random_select(model.config.depth, n, seed)
    if method == "first_n":
        return first_n_select(n, model.config.depth)
    raise ValueError(f"unknown selection method {method!r}")


@dataclass
class SweepRow:
    n: int
    selected: list[int]
    params: int
    param_reduction: float
    top1: float
    top5: float


def removal_sweep(model: ViTModel, train_ds: LabeledTensorDataset,
                  test_ds: LabeledTensorDataset, method: str = "nose",
                  counts: Sequence[int] | None = None, probe: np.ndarray | None = None,
                  cfg: TrainConfig = BENCH_DILUTE, seed: int = 0) -> list[SweepRow]:
    """select + dilute + fuse + eval for each removal count (default 1..depth-2)."""
    depth = model.config.depth
    counts = list(range(1, depth - 1)) if counts is None else list(counts)
    base = param_count(model.config).total
    rows = []
    for n in counts:
        sel = select_layers(model, method, n, probe, seed)
        _, fused, _ = dilute_and_fuse(model, sel, train_ds, cfg, seed=seed)
        ev = evaluate(fused, test_ds)
        total = fused.num_parameters()
        rows.append(SweepRow(n, sel, total, 1 - total / base, ev["top1"], ev["top5"]))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "selected", "params", "param_reduction", "top1", "top5"])
    for r in rows:
        w.writerow([r.n, " ".join(map(str, r.selected)), r.params, repr(r.param_reduction),
                    repr(r.top1), repr(r.top5)])
    return buf.getvalue()

