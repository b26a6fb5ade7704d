"""Radial DFT spectra of block output features and low/mid/high band energies.

Conventions: unnormalised forward 2-D DFT over the patch grid, spectrum
shifted so DC sits at the centre, radial frequency of a bin is the
Chebyshev radius ``max(|w_u|, |w_v|)`` with ``w = 2*pi*k/n`` folded to
[0, pi], and ``ceil(max(gH, gW) / 2) + 1`` radial bins spanning [0, pi].
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .vit import ViTModel

LOW_EDGE = 0.3 * math.pi
HIGH_EDGE = 0.7 * math.pi


class GridError(ValueError):
    pass


def radial_bins(grid: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Return (bin index per shifted DFT cell [gH, gW], bin frequencies [n_bins])."""
    gh, gw = grid
    n_bins = math.ceil(max(gh, gw) / 2) + 1
    ku = np.fft.fftshift(np.fft.fftfreq(gh)) * 2 * math.pi  # [-pi, pi)
    kv = np.fft.fftshift(np.fft.fftfreq(gw)) * 2 * math.pi
    radius = np.maximum(np.abs(ku)[:, None], np.abs(kv)[None, :])
    idx = np.rint(radius / math.pi * (n_bins - 1)).astype(np.int64)
    freqs = np.linspace(0.0, math.pi, n_bins)
    return idx, freqs


@dataclass
class RadialProfile:
    freqs: np.ndarray          # [n_bins], radians in [0, pi]
    log_amplitude: np.ndarray  # mean log(1 + |X|) per bin
    energy: np.ndarray         # sum of |X|^2 per bin (over cells, channels, batch)
    counts: np.ndarray         # number of (cell, channel, sample) terms per bin

    @property
    def total_energy(self) -> float:
        return float(self.energy.sum())


def _token_grid(features: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3:
        raise GridError(f"expected features [B, P+1, d], got {f.shape}")
    gh, gw = grid
    if gh * gw != f.shape[1] - 1:
        raise GridError(f"grid {gh}x{gw} does not match {f.shape[1] - 1} patch tokens")
    B, _, d = f.shape
    return f[:, 1:].reshape(B, gh, gw, d)


def spectrum_accumulate(features, grid: tuple[int, int], acc: RadialProfile | None = None
                        ) -> RadialProfile:
    maps = _token_grid(features, grid)
    X = np.fft.fftshift(np.fft.fft2(maps, axes=(1, 2)), axes=(1, 2))
    amp = np.abs(X)
    idx, freqs = radial_bins(grid)
    n_bins = len(freqs)
    per_cell_log = np.log1p(amp).sum(axis=(0, 3))
    per_cell_energy = (amp * amp).sum(axis=(0, 3))
    per_cell_count = np.full(idx.shape, amp.shape[0] * amp.shape[3], dtype=np.int64)
    log_sum = np.bincount(idx.ravel(), per_cell_log.ravel(), n_bins)
    energy = np.bincount(idx.ravel(), per_cell_energy.ravel(), n_bins)
    counts = np.bincount(idx.ravel(), per_cell_count.ravel(), n_bins).astype(np.int64)
    if acc is None:
        return RadialProfile(freqs, log_sum, energy, counts)
    return RadialProfile(freqs, acc.log_amplitude + log_sum, acc.energy + energy,
                         acc.counts + counts)


def _finalize(raw: RadialProfile) -> RadialProfile:
    mean_log = np.divide(raw.log_amplitude, raw.counts, out=np.zeros_like(raw.log_amplitude),
                         where=raw.counts > 0)
    return RadialProfile(raw.freqs, mean_log, raw.energy, raw.counts)


def block_spectrum(features, grid: tuple[int, int]) -> RadialProfile:
    """Radial spectrum of patch-token features [B, P+1, d] (class token dropped)."""
    return _finalize(spectrum_accumulate(features, grid))


def band_index(freqs: np.ndarray) -> np.ndarray:
    """0 = low, 1 = mid, 2 = high per bin; a bin on a boundary belongs to the upper band."""
    return (freqs >= LOW_EDGE).astype(np.int64) + (freqs >= HIGH_EDGE)


def band_energy(profile: RadialProfile) -> tuple[float, float, float]:
    """(low, mid, high) energy."""
    e = np.bincount(band_index(profile.freqs), profile.energy, minlength=3)
    return float(e[0]), float(e[1]), float(e[2])


@dataclass
class SpectrumReport:
    grid: tuple[int, int]
    profiles: list[RadialProfile] = field(default_factory=list)
    samples: int = 0

    def bands(self) -> list[tuple[float, float, float]]:
        return [band_energy(p) for p in self.profiles]

    def profile_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "bin_freq", "log_amplitude"])
        for b, p in enumerate(self.profiles):
            for fr, la in zip(p.freqs, p.log_amplitude):
                w.writerow([b, repr(float(fr)), repr(float(la))])
        return buf.getvalue()

    def bands_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "low", "mid", "high"])
        for b, (lo, mi, hi) in enumerate(self.bands()):
            w.writerow([b, repr(lo), repr(mi), repr(hi)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "grid": list(self.grid),
            "samples": self.samples,
            "blocks": [{"freqs": p.freqs.tolist(), "log_amplitude": p.log_amplitude.tolist(),
                        "energy": p.energy.tolist(), "counts": p.counts.tolist()}
                       for p in self.profiles],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SpectrumReport":
        d = json.loads(text)
        profiles = [RadialProfile(np.array(b["freqs"]), np.array(b["log_amplitude"]),
                                  np.array(b["energy"]), np.array(b["counts"], dtype=np.int64))
                    for b in d["blocks"]]
        return cls(tuple(d["grid"]), profiles, d["samples"])


def spectrum_report(model: ViTModel, images: np.ndarray, batch_size: int = 256) -> SpectrumReport:
    """Spectra of each block's f_mlp output over ``images``."""
    depth = model.config.depth
    grid = model.config.grid
    taps = [f"mlp.{i}" for i in range(depth)]
    raw: list[RadialProfile | None] = [None] * depth
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            _, caps = model.forward(images[s:s + batch_size], taps=taps)
            for i, t in enumerate(taps):
                raw[i] = spectrum_accumulate(caps[t].data, grid, raw[i])
    return SpectrumReport(grid, [_finalize(r) for r in raw], len(images))


@dataclass
class BandDelta:
    block: int
    a: tuple[float, float, float]
    b: tuple[float, float, float]

    @property
    def delta(self) -> tuple[float, float, float]:
        return tuple(y - x for x, y in zip(self.a, self.b))


def compare_spectra(model_a: ViTModel, model_b: ViTModel, images: np.ndarray,
                    batch_size: int = 256) -> list[BandDelta]:
    """Per-block band energies of both models and ``b - a`` deltas."""
    if model_a.config.depth != model_b.config.depth:
        raise ValueError("models must have the same depth")
    ra = spectrum_report(model_a, images, batch_size).bands()
    rb = spectrum_report(model_b, images, batch_size).bands()
    return [BandDelta(i, a, b) for i, (a, b) in enumerate(zip(ra, rb))]


def deltas_csv(rows: list[BandDelta]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", "low_a", "mid_a", "high_a", "low_b", "mid_b", "high_b",
                "d_low", "d_mid", "d_high"])
    for r in rows:
        w.writerow([r.block, *map(repr, r.a), *map(repr, r.b), *map(repr, r.delta)])
    return buf.getvalue()
