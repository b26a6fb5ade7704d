"""Transfer entropy between masked attention layers and the output, and greedy selection.

TE(S) = | H(F_target) - H(F_target | attention layers in S set to identity) |

``nose_select`` grows the removed set one layer at a time, each step adding
the candidate whose inclusion gives the smallest TE (ties go to the lowest
index).
"""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats as sps

from .entropy import DEFAULT_EPS, ProbeInfo, accumulate_taps
from .vit import Mode, ViTModel, accuracy


class Target(str, enum.Enum):
    LAST_BLOCK = "last_block"  # final block's f_mlp
    LOGITS = "logits"


def target_tap(depth: int, target: Target | str = Target.LAST_BLOCK) -> str:
    target = Target(target)
    return f"mlp.{depth - 1}" if target is Target.LAST_BLOCK else "logits"


class MaskedView:
    """Read-only view of a model with some attention layers replaced by identity."""

    def __init__(self, model: ViTModel, layers: Iterable[int]):
        self.model = model
        self.masked = frozenset(layers)
        self.config = model.config

    def forward(self, images, taps: Iterable[str] = ()):
        return self.model.forward(images, taps=taps, masked=self.masked)

    def predict(self, images, batch_size: int = 256) -> np.ndarray:
        return self.model.predict(images, batch_size, masked=self.masked)


def mask_layers(model: ViTModel, layers: Iterable[int]) -> MaskedView:
    layers = list(layers)
    for i in layers:
        if not 0 <= i < model.config.depth:
            raise IndexError(f"attention layer {i} out of range for depth {model.config.depth}")
        if model.modes[i].kind is not Mode.FULL:
            raise ValueError(f"block {i} is {model.modes[i].kind.value}, masking needs Full")
    return MaskedView(model, layers)


def target_entropy(model: ViTModel, probe_images: np.ndarray, masked: Iterable[int] = (),
                   target: Target | str = Target.LAST_BLOCK, batch_size: int = 256,
                   eps: float = DEFAULT_EPS) -> float:
    view = mask_layers(model, masked)
    tap = target_tap(model.config.depth, target)
    stats = accumulate_taps(model, probe_images, [tap], view.masked, batch_size)
    return stats[tap].entropy(eps)


@dataclass
class TEMeasurement:
    masked_set: list[int]
    h_target_baseline: float
    h_target_conditional: float
    te_value: float
    probe: ProbeInfo = field(default_factory=ProbeInfo)


def transfer_entropy(model: ViTModel, masked_set: Iterable[int], probe_images: np.ndarray,
                     target: Target | str = Target.LAST_BLOCK, batch_size: int = 256,
                     baseline: float | None = None, probe: ProbeInfo | None = None
                     ) -> TEMeasurement:
    masked_set = sorted(set(masked_set))
    if baseline is None:
        baseline = target_entropy(model, probe_images, (), target, batch_size)
    cond = target_entropy(model, probe_images, masked_set, target, batch_size)
    probe = probe or ProbeInfo(samples=len(probe_images), batch_size=batch_size)
    return TEMeasurement(masked_set, baseline, cond, abs(baseline - cond), probe)


@dataclass
class SelectionState:
    selected: list[int] = field(default_factory=list)
    candidates: list[int] = field(default_factory=list)
    trace: list[dict[int, float]] = field(default_factory=list)
    baseline: float = 0.0
    method: str = "nose"
    target: str = Target.LAST_BLOCK.value
    probe: ProbeInfo = field(default_factory=ProbeInfo)

    def trace_matrix(self, depth: int) -> np.ndarray:
        """steps x depth matrix of TE values; NaN where a layer was not a candidate."""
        out = np.full((len(self.trace), depth), np.nan)
        for k, row in enumerate(self.trace):
            for i, v in row.items():
                out[k, i] = v
        return out

    def normalized_trace(self, depth: int) -> np.ndarray:
        """Per-row min-max normalisation to [0, 1], for display."""
        m = self.trace_matrix(depth)
        lo = np.nanmin(m, axis=1, keepdims=True)
        hi = np.nanmax(m, axis=1, keepdims=True)
        span = np.where(hi > lo, hi - lo, 1.0)
        return (m - lo) / span

    def to_json(self) -> str:
        d = {
            "method": self.method,
            "selected": self.selected,
            "candidates": self.candidates,
            "baseline": self.baseline,
            "target": self.target,
            "trace": [{str(k): v for k, v in row.items()} for row in self.trace],
            "probe": asdict(self.probe),
        }
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SelectionState":
        d = json.loads(text)
        return cls(d["selected"], d["candidates"],
                   [{int(k): v for k, v in row.items()} for row in d["trace"]],
                   d["baseline"], d["method"], d["target"], ProbeInfo(**d["probe"]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "layer", "te", "chosen"])
        for k, row in enumerate(self.trace):
            for i in sorted(row):
                w.writerow([k, i, repr(row[i]), int(self.selected[k] == i)])
        return buf.getvalue()


def _argmin_lowest(values: dict[int, float]) -> int:
    best = min(values.values())
    return min(i for i, v in values.items() if v == best)


def nose_select(model: ViTModel, n: int, probe_images: np.ndarray,
                target: Target | str = Target.LAST_BLOCK, batch_size: int = 256,
                candidates: Sequence[int] | None = None) -> SelectionState:
    depth = model.config.depth
    if not 0 <= n <= depth:
        raise ValueError(f"cannot select {n} layers from depth {depth}")
    pool = list(range(depth)) if candidates is None else sorted(set(candidates))
    if n > len(pool):
        raise ValueError(f"cannot select {n} layers from {len(pool)} candidates")
    probe = ProbeInfo(samples=len(probe_images), batch_size=batch_size)
    baseline = target_entropy(model, probe_images, (), target, batch_size)
    state = SelectionState([], pool, [], baseline, "nose", Target(target).value, probe)
    for _ in range(n):
        row = {}
        for i in state.candidates:
            te = transfer_entropy(model, state.selected + [i], probe_images, target,
                                  batch_size, baseline=baseline)
            row[i] = te.te_value
        pick = _argmin_lowest(row)
        state.trace.append(row)
        state.selected.append(pick)
        state.candidates = [c for c in state.candidates if c != pick]
    return state


def random_select(depth: int, n: int, seed: int) -> list[int]:
    if not 0 <= n <= depth:
        raise ValueError(f"cannot select {n} layers from depth {depth}")
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(depth, size=n, replace=False))


def first_n_select(n: int, depth: int | None = None) -> list[int]:
    if n < 0 or (depth is not None and n > depth):
        raise ValueError(f"cannot select {n} layers" + (f" from depth {depth}" if depth else ""))
    return list(range(n))


def ratio_to_count(ratio: float, depth: int) -> int:
    if not 0 < ratio <= 1:
        raise ValueError(f"removal ratio must lie in (0, 1], got {ratio}")
    return int(round(ratio * depth))


def remained_performance(model: ViTModel, masked_set: Iterable[int], images: np.ndarray,
                         labels: np.ndarray, batch_size: int = 256) -> float:
    """Top-1 accuracy with ``masked_set`` set to identity, no retraining."""
    view = mask_layers(model, masked_set)
    return accuracy(view.predict(images, batch_size), labels)


@dataclass
class StudyRow:
    count: int
    acc_mean: float
    acc_var: float
    te_mean: float
    te_var: float
    sets: list[list[int]] = field(default_factory=list)
    accs: list[float] = field(default_factory=list)
    tes: list[float] = field(default_factory=list)


def masking_study(model: ViTModel, layer_counts: Sequence[int], repeats: int, seed: int,
                  eval_images: np.ndarray, eval_labels: np.ndarray, probe_images: np.ndarray,
                  target: Target | str = Target.LAST_BLOCK, batch_size: int = 256
                  ) -> list[StudyRow]:
    """Randomly mask ``count`` attention layers ``repeats`` times per count."""
    if repeats < 2:
        raise ValueError("repeats must be >= 2")
    rng = np.random.default_rng(seed)
    depth = model.config.depth
    baseline = target_entropy(model, probe_images, (), target, batch_size)
    rows = []
    for count in layer_counts:
        sets, accs, tes = [], [], []
        for _ in range(repeats):
            s = sorted(int(i) for i in rng.choice(depth, size=count, replace=False))
            sets.append(s)
            accs.append(remained_performance(model, s, eval_images, eval_labels, batch_size))
            tes.append(transfer_entropy(model, s, probe_images, target, batch_size,
                                        baseline=baseline).te_value)
        rows.append(StudyRow(count, float(np.mean(accs)), float(np.var(accs)),
                             float(np.mean(tes)), float(np.var(tes)), sets, accs, tes))
    return rows


def study_to_csv(rows: Sequence[StudyRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["count", "acc_mean", "acc_var", "te_mean", "te_var"])
    for r in rows:
        w.writerow([r.count, repr(r.acc_mean), repr(r.acc_var), repr(r.te_mean), repr(r.te_var)])
    return buf.getvalue()


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation; NaN when either input is constant."""
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(sps.spearmanr(x, y).statistic)
