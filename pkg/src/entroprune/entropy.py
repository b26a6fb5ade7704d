"""Gaussian-surrogate layer entropy.

For a feature set F with d channels, the entropy of each channel under a
Gaussian fit is log(sigma_j) plus constants; dropping the constants gives

    H_sigma(F) = sum_j log(sigma_j)

Statistics pool batch and token positions jointly (class token included) and
use the population standard deviation.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import container
from . import tensor as T
from .vit import ViTModel

ACTIVATION_MAGIC = b"EACT"
DEFAULT_EPS = 1e-12


class ProbeError(ValueError):
    pass


def channel_std(features) -> np.ndarray:
    """Population std per channel of an [N, d] (or [..., d]) feature array."""
    f = np.asarray(features, dtype=np.float64)
    f = f.reshape(-1, f.shape[-1])
    if f.shape[0] < 2:
        raise ProbeError(f"need at least 2 samples per channel, got {f.shape[0]}")
    mu = f.mean(axis=0)
    return np.sqrt(((f - mu) ** 2).mean(axis=0))


def layer_entropy(sigma, eps: float = DEFAULT_EPS) -> float:
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
        raise ProbeError("standard deviations must be finite and >= 0")
    return float(np.sum(np.log(np.maximum(sigma, eps))))


@dataclass
class ChannelStats:
    """Streaming per-channel moments (Chan et al. pairwise merge)."""

    layer_id: str
    channels: int
    sample_count: int = 0
    mean: np.ndarray | None = None
    m2: np.ndarray | None = None

    def update(self, features) -> None:
        f = np.asarray(features, dtype=np.float64).reshape(-1, self.channels)
        n_b = f.shape[0]
        if n_b == 0:
            return
        mean_b = f.mean(axis=0)
        m2_b = ((f - mean_b) ** 2).sum(axis=0)
        if self.sample_count == 0:
            self.sample_count, self.mean, self.m2 = n_b, mean_b, m2_b
            return
        n_a = self.sample_count
        n = n_a + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self.m2 = self.m2 + m2_b + delta * delta * (n_a * n_b / n)
        self.sample_count = n

    def merge(self, other: "ChannelStats") -> None:
        if other.sample_count == 0:
            return
        if self.sample_count == 0:
            self.sample_count, self.mean, self.m2 = other.sample_count, other.mean.copy(), other.m2.copy()
            return
        n_a, n_b = self.sample_count, other.sample_count
        n = n_a + n_b
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self.m2 = self.m2 + other.m2 + delta * delta * (n_a * n_b / n)
        self.sample_count = n

    @property
    def std(self) -> np.ndarray:
        if self.sample_count < 2:
            raise ProbeError(f"{self.layer_id}: need at least 2 samples, got {self.sample_count}")
        return np.sqrt(np.maximum(self.m2 / self.sample_count, 0.0))

    def entropy(self, eps: float = DEFAULT_EPS) -> float:
        return layer_entropy(self.std, eps)


@dataclass
class ProbeInfo:
    dataset_id: str = "probe"
    samples: int = 0
    batch_size: int = 256
    seed: int = 0


@dataclass
class EntropyEntry:
    block: int
    kind: str  # "attention" | "mlp"
    h_sigma: float


@dataclass
class EntropyReport:
    entries: list[EntropyEntry] = field(default_factory=list)
    probe: ProbeInfo = field(default_factory=ProbeInfo)

    def values(self, kind: str) -> np.ndarray:
        return np.array([e.h_sigma for e in sorted(self.entries, key=lambda e: e.block)
                         if e.kind == kind])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "kind", "H_sigma"])
        for e in self.entries:
            w.writerow([e.block, e.kind, repr(e.h_sigma)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, probe: ProbeInfo | None = None) -> "EntropyReport":
        rows = csv.DictReader(io.StringIO(text))
        return cls([EntropyEntry(int(r["block"]), r["kind"], float(r["H_sigma"])) for r in rows],
                   probe or ProbeInfo())

    def to_json(self) -> str:
        return json.dumps({"probe": asdict(self.probe),
                           "entries": [asdict(e) for e in self.entries]}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EntropyReport":
        d = json.loads(text)
        return cls([EntropyEntry(**e) for e in d["entries"]], ProbeInfo(**d["probe"]))


def _iter_batches(images: np.ndarray, batch_size: int):
    for s in range(0, len(images), batch_size):
        yield images[s:s + batch_size]


def accumulate_taps(model, images: np.ndarray, taps: Iterable[str], masked: Iterable[int] = (),
                    batch_size: int = 256) -> dict[str, ChannelStats]:
    """Stream ``images`` through ``model`` and accumulate channel stats per tap."""
    taps = list(taps)
    if len(images) == 0:
        raise ProbeError("probe set is empty")
    stats: dict[str, ChannelStats] = {}
    with T.no_grad():
        for batch in _iter_batches(images, batch_size):
            _, caps = model.forward(batch, taps=taps, masked=masked)
            for tap in taps:
                feat = caps[tap].data
                if tap not in stats:
                    stats[tap] = ChannelStats(tap, feat.shape[-1])
                stats[tap].update(feat)
    return stats


def entropy_profile(model: ViTModel, probe_images: np.ndarray, batch_size: int = 256,
                    seed: int = 0, dataset_id: str = "probe", eps: float = DEFAULT_EPS
                    ) -> EntropyReport:
    """H_sigma of every attention (f_attn) and MLP (f_mlp) output."""
    depth = model.config.depth
    taps = [t for i in range(depth) for t in (f"attn.{i}", f"mlp.{i}")]
    stats = accumulate_taps(model, probe_images, taps, batch_size=batch_size)
    entries = []
    for i in range(depth):
        entries.append(EntropyEntry(i, "attention", stats[f"attn.{i}"].entropy(eps)))
        entries.append(EntropyEntry(i, "mlp", stats[f"mlp.{i}"].entropy(eps)))
    return EntropyReport(entries, ProbeInfo(dataset_id, len(probe_images), batch_size, seed))


# ---------------------------------------------------------------------------
# activation dumps
# ---------------------------------------------------------------------------

def dump_activations(model: ViTModel, probe_images: np.ndarray, taps: Iterable[str],
                     path: str | Path, batch_size: int = 256, masked: Iterable[int] = (),
                     meta: Mapping | None = None) -> dict[str, np.ndarray]:
    taps = list(taps)
    masked = sorted(masked)
    chunks: dict[str, list[np.ndarray]] = {t: [] for t in taps}
    with T.no_grad():
        for batch in _iter_batches(probe_images, batch_size):
            _, caps = model.forward(batch, taps=taps, masked=masked)
            for t in taps:
                chunks[t].append(caps[t].data)
    arrays = {t: np.concatenate(v, axis=0) for t, v in chunks.items()}
    header = {"kind": "activations", "taps": taps, "masked": masked,
              "samples": int(len(probe_images)), "meta": dict(meta or {})}
    container.write(path, ACTIVATION_MAGIC, header, arrays)
    return arrays


def load_activations(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    header, arrays = container.read(path, ACTIVATION_MAGIC)
    if header.get("kind") != "activations":
        raise container.CorruptFileError("header does not describe an activation dump")
    return header, arrays
