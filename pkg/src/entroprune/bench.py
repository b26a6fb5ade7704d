"""Inference throughput and an analytical memory-bound proxy.

Memory proxy: the largest batch B with

    param_bytes + B * activation_bytes_per_image <= budget

where activation bytes count every intermediate a block materialises
during inference (all retained, a conservative upper bound):

    full block   T * (3d + 4d + 2h + 3d) + 2 * heads * T^2
                 (qkv, attention out / projection / f_attn / LN1,
                  fc1 + GELU, LN2 / fc2 / f_mlp;  scores + softmax)
    fused block  T * (d + 2h + 3d)

plus T * d for the embedded tokens, with T = P + 1 and h = hidden width.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .vit import Mode, ViTModel

DEFAULT_BUDGET = 10 * 1024 ** 3


def activation_elements_per_image(model: ViTModel) -> int:
    c = model.config
    T_, d, h = c.seq_len, c.embed_dim, c.hidden
    total = T_ * d
    for m in model.modes:
        if m.kind is Mode.FUSED:
            total += T_ * (d + 2 * h + 3 * d)
        else:
            total += T_ * (3 * d + 4 * d + 2 * h + 3 * d) + 2 * c.heads * T_ * T_
    return total


def parameter_bytes(model: ViTModel) -> int:
    return model.num_parameters() * model.dtype.itemsize


def memory_bound(model: ViTModel, budget_bytes: int = DEFAULT_BUDGET) -> int:
    per_image = activation_elements_per_image(model) * model.dtype.itemsize
    free = budget_bytes - parameter_bytes(model)
    return max(0, free // per_image)


def throughput(model: ViTModel, batch: int, reps: int = 5, warmup: int = 1,
               seed: int = 0) -> tuple[float, list[float]]:
    """Median images/s over ``reps`` timed forwards after ``warmup`` discarded ones."""
    if reps < 3:
        raise ValueError("reps must be >= 3")
    c = model.config
    rng = np.random.default_rng(seed)
    images = rng.random((batch, *c.image_hw, c.in_chans)).astype(model.dtype)
    for _ in range(warmup):
        model.logits(images)
    rates = []
    for _ in range(reps):
        t0 = time.perf_counter()
        model.logits(images)
        rates.append(batch / (time.perf_counter() - t0))
    return float(np.median(rates)), rates


@dataclass
class BenchResult:
    batch: int
    reps: int
    throughput: float
    parameters: int
    parameter_bytes: int
    activation_bytes_per_image: int
    budget_bytes: int
    memory_bound: int

    def to_dict(self) -> dict:
        return asdict(self)


def bench(model: ViTModel, batch: int = 64, reps: int = 5,
          budget_bytes: int = DEFAULT_BUDGET) -> BenchResult:
    tp, _ = throughput(model, batch, reps)
    return BenchResult(batch, reps, tp, model.num_parameters(), parameter_bytes(model),
                       activation_elements_per_image(model) * model.dtype.itemsize,
                       budget_bytes, memory_bound(model, budget_bytes))
