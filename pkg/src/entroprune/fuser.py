"""Structural removal of fully diluted attention layers, equivalence checks, transplants."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .vit import (BlockMode, Mode, ModeError, ViTModel, accuracy, attention_layer_params,
                  attention_param_names, tap_ids)

log = logging.getLogger(__name__)


class FusionError(ModeError):
    pass


class VerificationError(AssertionError):
    def __init__(self, message: str, report: "FusionReport"):
        super().__init__(message)
        self.report = report


def fuse(model: ViTModel) -> ViTModel:
    """Rewrite every Diluted block with M == 0 into an MLP-only Fused block.

    The fused block computes MLP(LN(x)) + s*x (s = 2 with compensation, 1
    without) and owns no attention or pre-attention norm parameters.  Its LN
    runs with eps / s**2, which makes LN(x) identical to the diluted LN(s*x).
    """
    live = [(i, m.mask) for i, m in enumerate(model.modes)
            if m.kind is Mode.DILUTED and m.mask != 0.0]
    if live:
        listing = ", ".join(f"block {i} (M={m:g})" for i, m in live)
        raise FusionError(f"refusing to fuse: mask not fully decayed for {listing}")
    targets = model.diluted_blocks()
    out = model.copy()
    if not targets:
        log.warning("fuse: no diluted blocks to fuse; model returned unchanged")
        return out
    for i in targets:
        mode = out.modes[i]
        out.modes[i] = BlockMode(Mode.FUSED, 0.0, mode.compensation)
        for name in attention_param_names(i):
            del out.params[name]
    return out


@dataclass
class FusionReport:
    fused_blocks: list[int]
    layer_deviation: dict[str, float]
    end_to_end: float
    params_before: int
    params_after: int
    expected_delta: int
    tol: float
    passed: bool
    notes: list[str] = field(default_factory=list)

    @property
    def param_delta(self) -> int:
        return self.params_before - self.params_after

    def to_json(self) -> str:
        d = asdict(self)
        d["param_delta"] = self.param_delta
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FusionReport":
        d = json.loads(text)
        d.pop("param_delta", None)
        return cls(**d)


def verify_equivalence(model_a: ViTModel, model_b: ViTModel, images: np.ndarray,
                       tol: float, strict: bool = True, batch_size: int = 256) -> FusionReport:
    """Compare every block tap and the logits of two same-shaped models."""
    if model_a.config != model_b.config:
        raise ValueError("models have different configurations")
    depth = model_a.config.depth
    taps = [t for t in tap_ids(depth) if t != "norm"]
    dev = {t: 0.0 for t in taps}
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            batch = images[s:s + batch_size]
            _, ca = model_a.forward(batch, taps=taps)
            _, cb = model_b.forward(batch, taps=taps)
            for t in taps:
                diff = np.abs(ca[t].data.astype(np.float64) - cb[t].data.astype(np.float64))
                dev[t] = max(dev[t], float(diff.max()))
    fa, fb = set(model_a.fused_blocks()), set(model_b.fused_blocks())
    newly = sorted(fb - fa) or sorted(fa - fb)
    d = model_a.config.embed_dim
    end = dev.pop("logits")
    passed = end <= tol and all(v <= tol for v in dev.values())
    report = FusionReport(
        fused_blocks=newly,
        layer_deviation=dev,
        end_to_end=end,
        params_before=model_a.num_parameters(),
        params_after=model_b.num_parameters(),
        expected_delta=(len(fb) - len(fa)) * attention_layer_params(d),
        tol=tol,
        passed=passed,
        notes=["pre-attention layer norm removed together with each fused attention layer"]
        if newly else [],
    )
    if strict and not passed:
        worst = max(dev, key=dev.get) if dev else "logits"
        raise VerificationError(
            f"models differ: end-to-end {end:.3g}, worst tap {worst} {dev.get(worst, end):.3g} "
            f"(tol {tol:g})", report)
    return report


def fuse_and_verify(model: ViTModel, images: np.ndarray, tol: float | None = None
                    ) -> tuple[ViTModel, FusionReport]:
    if tol is None:
        tol = 1e-10 if model.dtype == np.float64 else 1e-5
    fused = fuse(model)
    return fused, verify_equivalence(model, fused, images, tol, strict=True)


def transplant(donor: ViTModel, host: ViTModel, block_index: int) -> ViTModel:
    """Copy donor's block ``block_index`` (attention and MLP) into a copy of host."""
    if donor.config != host.config:
        raise ValueError("donor and host configurations differ")
    if not 0 <= block_index < host.config.depth:
        raise IndexError(f"block {block_index} out of range")
    if host.modes[block_index].kind is Mode.FUSED:
        raise ModeError(f"host block {block_index} is fused; it has no attention slot")
    if donor.modes[block_index].kind is Mode.FUSED:
        raise ModeError(f"donor block {block_index} is fused")
    out = host.copy()
    prefix = f"blocks.{block_index}."
    for name, t in donor.params.items():
        if name.startswith(prefix):
            if out.params[name].shape != t.shape:
                raise T.ShapeError(f"{name}: {t.shape} vs {out.params[name].shape}")
            out.params[name] = T.Tensor(t.data.astype(out.dtype), requires_grad=True)
    out.modes[block_index] = donor.modes[block_index]
    return out


def transplant_curve(donor: ViTModel, host: ViTModel, images: np.ndarray, labels: np.ndarray,
                     batch_size: int = 256) -> list[tuple[int, float | None]]:
    """Accuracy of the hybrid for each transplantable index; None for fused slots."""
    rows = []
    for i in range(host.config.depth):
        if host.modes[i].kind is Mode.FUSED:
            rows.append((i, None))
            continue
        hybrid = transplant(donor, host, i)
        rows.append((i, accuracy(hybrid.predict(images, batch_size), labels)))
    return rows


def transplant_csv(rows: Sequence[tuple[int, float | None]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", "accuracy"])
    for i, acc in rows:
        w.writerow([i, "" if acc is None else repr(acc)])
    return buf.getvalue()
