"""A small pre-norm vision transformer with per-block Full / Diluted / Fused modes.

Block computations (``x`` is the block input)::

    Full      f_attn = Attn(LN1(x)) + x
    Diluted   f_attn = M * Attn(LN1(x)) + (2 - M) * x     (compensated)
              f_attn = M * Attn(LN1(x)) + x               (naive)
    Fused     f_attn = s * x,  s = 2 (compensated) or 1 (naive)

    f_mlp = MLP(LN2(f_attn)) + f_attn

A fused block evaluates ``LN2(s * x)`` as ``LN2(x)`` with eps divided by
``s**2``; for a power-of-two ``s`` both are bit-identical in IEEE arithmetic.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import container
from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"EPCK"


class ConfigError(ValueError):
    pass


class DimensionError(T.ShapeError):
    pass


class PatchGridError(ConfigError, DimensionError):
    """Image extent not divisible by the patch extent."""


class ModeError(RuntimeError):
    """Operation not allowed for a block's current mode."""


@dataclass(frozen=True)
class ViTConfig:
    image_hw: tuple[int, int] = (16, 16)
    patch_hw: tuple[int, int] = (4, 4)
    in_chans: int = 3
    embed_dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 2.0
    num_classes: int = 10
    seed: int = 0
    ln_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "image_hw", tuple(int(v) for v in self.image_hw))
        object.__setattr__(self, "patch_hw", tuple(int(v) for v in self.patch_hw))
        (H, W), (h, w) = self.image_hw, self.patch_hw
        if min(H, W, h, w) <= 0:
            raise ConfigError("image and patch extents must be positive")
        if H % h or W % w:
            raise PatchGridError(f"image {H}x{W} is not divisible into {h}x{w} patches")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.num_classes < 1 or self.in_chans < 1:
            raise ConfigError("num_classes and in_chans must be >= 1")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_hw[0] // self.patch_hw[0], self.image_hw[1] // self.patch_hw[1]

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def hidden(self) -> int:
        return int(self.mlp_ratio * self.embed_dim)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_hw"], d["patch_hw"] = list(self.image_hw), list(self.patch_hw)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ViTConfig":
        return cls(**d)


# Table shapes used by the parameter census.
DEIT_TINY = ViTConfig(image_hw=(224, 224), patch_hw=(16, 16), embed_dim=192, depth=12,
                      heads=3, mlp_ratio=4.0, num_classes=1000)
DEIT_SMALL = replace(DEIT_TINY, embed_dim=384, heads=6)
DEIT_BASE = replace(DEIT_TINY, embed_dim=768, heads=12)


class Mode(str, enum.Enum):
    FULL = "full"
    DILUTED = "diluted"
    FUSED = "fused"


@dataclass(frozen=True)
class BlockMode:
    kind: Mode = Mode.FULL
    mask: float = 1.0
    compensation: bool = True

    @property
    def residual_scale(self) -> float:
        return 2.0 if self.compensation else 1.0

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "mask": self.mask, "compensation": self.compensation}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BlockMode":
        return cls(Mode(d["kind"]), float(d["mask"]), bool(d["compensation"]))


FULL = BlockMode()


def attention_param_names(i: int) -> list[str]:
    p = f"blocks.{i}."
    return [p + "norm1.weight", p + "norm1.bias", p + "attn.qkv.weight", p + "attn.qkv.bias",
            p + "attn.proj.weight", p + "attn.proj.bias"]


def mlp_param_names(i: int) -> list[str]:
    p = f"blocks.{i}."
    return [p + "norm2.weight", p + "norm2.bias", p + "mlp.fc1.weight", p + "mlp.fc1.bias",
            p + "mlp.fc2.weight", p + "mlp.fc2.bias"]


def tap_ids(depth: int) -> list[str]:
    ids = []
    for i in range(depth):
        ids += [f"attn.{i}", f"mlp.{i}"]
    return ids + ["norm", "logits"]


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def patchify(images: np.ndarray, config: ViTConfig) -> np.ndarray:
    """[B, H, W, C] -> [B, P, h*w*C], patches in row-major grid order."""
    images = np.asarray(images)
    H, W = config.image_hw
    h, w = config.patch_hw
    if images.ndim != 4 or images.shape[1:] != (H, W, config.in_chans):
        raise DimensionError(
            f"expected images [B, {H}, {W}, {config.in_chans}], got {list(images.shape)}")
    B = images.shape[0]
    gh, gw = H // h, W // w
    x = images.reshape(B, gh, h, gw, w, config.in_chans).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(B, gh * gw, h * w * config.in_chans))


class ViTModel:
    """Parameters live in ``params`` (name -> Tensor); block behaviour in ``modes``."""

    def __init__(self, config: ViTConfig, dtype=np.float32, init: bool = True):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.modes: list[BlockMode] = [FULL] * config.depth
        if init:
            self._init_params()

    def _init_params(self) -> None:
        c = self.config
        rng = np.random.default_rng(c.seed)
        d, hid = c.embed_dim, c.hidden
        patch_in = c.patch_hw[0] * c.patch_hw[1] * c.in_chans
        shapes: list[tuple[str, tuple, str]] = [
            ("patch_embed.weight", (patch_in, d), "w"),
            ("patch_embed.bias", (d,), "zero"),
            ("cls_token", (d,), "w"),
            ("pos_embed", (c.seq_len, d), "w"),
        ]
        for i in range(c.depth):
            p = f"blocks.{i}."
            shapes += [
                (p + "norm1.weight", (d,), "one"), (p + "norm1.bias", (d,), "zero"),
                (p + "attn.qkv.weight", (d, 3 * d), "w"), (p + "attn.qkv.bias", (3 * d,), "zero"),
                (p + "attn.proj.weight", (d, d), "w"), (p + "attn.proj.bias", (d,), "zero"),
                (p + "norm2.weight", (d,), "one"), (p + "norm2.bias", (d,), "zero"),
                (p + "mlp.fc1.weight", (d, hid), "w"), (p + "mlp.fc1.bias", (hid,), "zero"),
                (p + "mlp.fc2.weight", (hid, d), "w"), (p + "mlp.fc2.bias", (d,), "zero"),
            ]
        shapes += [("norm.weight", (d,), "one"), ("norm.bias", (d,), "zero"),
                   ("head.weight", (d, c.num_classes), "w"), ("head.bias", (c.num_classes,), "zero")]
        for name, shape, kind in shapes:
            if kind == "w":
                arr = _trunc_normal(rng, shape)
            elif kind == "one":
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            self.params[name] = Tensor(arr.astype(self.dtype), requires_grad=True)

    # -- bookkeeping -------------------------------------------------------

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> "ViTModel":
        out = ViTModel(self.config, self.dtype, init=False)
        out.params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                      for k, v in self.params.items()}
        out.modes = list(self.modes)
        return out

    def astype(self, dtype) -> "ViTModel":
        out = self.copy()
        out.dtype = np.dtype(dtype)
        for t in out.params.values():
            t.data = t.data.astype(out.dtype)
        return out

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def set_mode(self, i: int, mode: BlockMode) -> None:
        if not 0 <= i < self.config.depth:
            raise IndexError(f"block {i} out of range for depth {self.config.depth}")
        if self.modes[i].kind is Mode.FUSED and mode.kind is not Mode.FUSED:
            raise ModeError(f"block {i} is fused; its attention parameters are gone")
        self.modes[i] = mode

    def fused_blocks(self) -> list[int]:
        return [i for i, m in enumerate(self.modes) if m.kind is Mode.FUSED]

    def diluted_blocks(self) -> list[int]:
        return [i for i, m in enumerate(self.modes) if m.kind is Mode.DILUTED]

    # -- forward -------------------------------------------------------------

    def patch_embed(self, images) -> Tensor:
        x = patchify(images, self.config).astype(self.dtype)
        B = x.shape[0]
        tok = T.linear(Tensor(x), self.p("patch_embed.weight"), self.p("patch_embed.bias"))
        cls = T.reshape(T.expand_leading(self.p("cls_token"), B), (B, 1, self.config.embed_dim))
        return T.add(T.concat([cls, tok], axis=1), self.p("pos_embed"))

    def attention_branch(self, x: Tensor, i: int, return_weights: bool = False):
        """Attn(LN1(x)) including the output projection, without residual."""
        if self.modes[i].kind is Mode.FUSED:
            raise ModeError(f"block {i} is fused and has no attention layer")
        c = self.config
        B, L, d = x.shape
        nh, dk = c.heads, c.head_dim
        pre = f"blocks.{i}."
        h = T.layer_norm(x, self.p(pre + "norm1.weight"), self.p(pre + "norm1.bias"), c.ln_eps)
        qkv = T.linear(h, self.p(pre + "attn.qkv.weight"), self.p(pre + "attn.qkv.bias"))
        qkv = T.transpose(T.reshape(qkv, (B, L, 3, nh, dk)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dk))
        weights = T.softmax(scores, axis=-1)
        o = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (B, L, d))
        out = T.linear(o, self.p(pre + "attn.proj.weight"), self.p(pre + "attn.proj.bias"))
        return (out, weights) if return_weights else out

    def attention_forward(self, x: Tensor, i: int, masked: bool = False) -> Tensor:
        """f_attn for block ``i`` under its current mode."""
        mode = self.modes[i]
        if mode.kind is Mode.FUSED:
            return x if mode.residual_scale == 1.0 else T.scale(x, mode.residual_scale)
        if masked:
            return x
        a = self.attention_branch(x, i)
        if mode.kind is Mode.FULL:
            return T.add(a, x)
        return diluted_combine(a, x, mode.mask, mode.compensation)

    def mlp_branch(self, h: Tensor, i: int) -> Tensor:
        pre = f"blocks.{i}.mlp."
        z = T.gelu(T.linear(h, self.p(pre + "fc1.weight"), self.p(pre + "fc1.bias")))
        return T.linear(z, self.p(pre + "fc2.weight"), self.p(pre + "fc2.bias"))

    def mlp_forward(self, f_attn: Tensor, i: int, block_input: Tensor | None = None) -> Tensor:
        """f_mlp = MLP(LN2(f_attn)) + f_attn.

        Fused blocks normalise ``block_input`` with eps / s**2 instead of ``f_attn``.
        """
        c = self.config
        mode = self.modes[i]
        g, b = self.p(f"blocks.{i}.norm2.weight"), self.p(f"blocks.{i}.norm2.bias")
        if mode.kind is Mode.FUSED and block_input is not None:
            s = mode.residual_scale
            h = T.layer_norm(block_input, g, b, c.ln_eps / (s * s))
        else:
            h = T.layer_norm(f_attn, g, b, c.ln_eps)
        return T.add(self.mlp_branch(h, i), f_attn)

    def block_forward(self, x: Tensor, i: int, masked: bool = False) -> tuple[Tensor, Tensor]:
        f_attn = self.attention_forward(x, i, masked)
        return f_attn, self.mlp_forward(f_attn, i, block_input=x)

    def forward(self, images, taps: Iterable[str] = (), masked: Iterable[int] = ()
                ) -> tuple[Tensor, dict[str, Tensor]]:
        """Return ``(logits, captures)``; ``masked`` blocks run with f_attn = x."""
        c = self.config
        taps = set(taps)
        unknown = taps - set(tap_ids(c.depth))
        if unknown:
            raise KeyError(f"unknown tap ids: {sorted(unknown)}")
        masked = frozenset(masked)
        for i in masked:
            if not 0 <= i < c.depth:
                raise IndexError(f"masked block {i} out of range for depth {c.depth}")
        caps: dict[str, Tensor] = {}
        x = self.patch_embed(images)
        for i in range(c.depth):
            f_attn, x = self.block_forward(x, i, masked=i in masked)
            if f"attn.{i}" in taps:
                caps[f"attn.{i}"] = f_attn
            if f"mlp.{i}" in taps:
                caps[f"mlp.{i}"] = x
        cls = T.getitem(x, (slice(None), 0))
        h = T.layer_norm(cls, self.p("norm.weight"), self.p("norm.bias"), c.ln_eps)
        logits = T.linear(h, self.p("head.weight"), self.p("head.bias"))
        if "norm" in taps:
            caps["norm"] = h
        if "logits" in taps:
            caps["logits"] = logits
        return logits, caps

    def logits(self, images, masked: Iterable[int] = ()) -> np.ndarray:
        with T.no_grad():
            out, _ = self.forward(images, masked=masked)
        return out.data

    def predict(self, images, batch_size: int = 256, masked: Iterable[int] = ()) -> np.ndarray:
        outs = [self.logits(images[s:s + batch_size], masked)
                for s in range(0, len(images), batch_size)]
        return np.concatenate(outs, axis=0)


def diluted_combine(attn: Tensor, x: Tensor, mask: float, compensation: bool) -> Tensor:
    """M * Attn(x) + (2 - M) * x, or M * Attn(x) + x without compensation."""
    branch = T.scale(attn, mask)
    resid = T.scale(x, 2.0 - mask) if compensation else x
    return T.add(branch, resid)


def accuracy(logits: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    labels = np.asarray(labels)
    if k == 1:
        return float(np.mean(np.argmax(logits, axis=1) == labels))
    k = min(k, logits.shape[1])
    topk = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean((topk == labels[:, None]).any(axis=1)))


# ---------------------------------------------------------------------------
# parameter census
# ---------------------------------------------------------------------------

@dataclass
class ParamCensus:
    total: int
    breakdown: dict[str, int] = field(default_factory=dict)


def attention_layer_params(d: int) -> int:
    """qkv (d*3d + 3d), projection (d*d + d) and the pre-attention norm (2d)."""
    return d * 3 * d + 3 * d + d * d + d + 2 * d


def param_count(config: ViTConfig, removed_attn: Iterable[int] = ()) -> ParamCensus:
    removed = set(removed_attn)
    bad = [i for i in removed if not 0 <= i < config.depth]
    if bad:
        raise IndexError(f"removed indices {sorted(bad)} out of range for depth {config.depth}")
    d, hid, L = config.embed_dim, config.hidden, config.depth
    patch_in = config.patch_hw[0] * config.patch_hw[1] * config.in_chans
    live = L - len(removed)
    br = {
        "patch_embed": patch_in * d + d,
        "cls_token": d,
        "pos_embed": config.seq_len * d,
        "attn_norm": live * 2 * d,
        "attention": live * (d * 3 * d + 3 * d + d * d + d),
        "mlp_norm": L * 2 * d,
        "mlp": L * (d * hid + hid + hid * d + d),
        "final_norm": 2 * d,
        "head": d * config.num_classes + config.num_classes,
    }
    return ParamCensus(sum(br.values()), br)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _checkpoint_payload(model: ViTModel) -> tuple[dict, dict[str, np.ndarray]]:
    header = {
        "kind": "vit-checkpoint",
        "config": model.config.to_dict(),
        "dtype": model.dtype.name,
        "modes": [m.to_dict() for m in model.modes],
    }
    return header, model.state_arrays()


def save_checkpoint(model: ViTModel, path: str | Path) -> None:
    header, tensors = _checkpoint_payload(model)
    container.write(path, CHECKPOINT_MAGIC, header, tensors)


def checkpoint_bytes(model: ViTModel) -> bytes:
    header, tensors = _checkpoint_payload(model)
    return container.encode(CHECKPOINT_MAGIC, header, tensors)


def model_from_payload(header: Mapping, tensors: Mapping[str, np.ndarray]) -> ViTModel:
    try:
        config = ViTConfig.from_dict(header["config"])
        modes = [BlockMode.from_dict(m) for m in header["modes"]]
        dtype = np.dtype(header["dtype"])
    except (KeyError, TypeError, ValueError) as exc:
        raise container.CorruptFileError(f"bad checkpoint header: {exc}") from exc
    if len(modes) != config.depth:
        raise container.CorruptFileError("mode list length does not match depth")
    model = ViTModel(config, dtype, init=False)
    model.modes = modes
    ref = _reference_shapes(config)
    for i, m in enumerate(modes):
        if m.kind is Mode.FUSED:
            for n in attention_param_names(i):
                if n in tensors:
                    raise container.CorruptFileError(f"fused block {i} carries tensor {n}")
                ref.pop(n)
    if set(ref) != set(tensors):
        missing = sorted(set(ref) - set(tensors))
        extra = sorted(set(tensors) - set(ref))
        raise container.CorruptFileError(f"tensor set mismatch: missing {missing}, extra {extra}")
    for name, arr in tensors.items():
        if tuple(arr.shape) != ref[name]:
            raise container.CorruptFileError(f"{name}: shape {arr.shape} != {ref[name]}")
        model.params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return model


def _reference_shapes(config: ViTConfig) -> dict[str, tuple]:
    d, hid = config.embed_dim, config.hidden
    patch_in = config.patch_hw[0] * config.patch_hw[1] * config.in_chans
    ref = {"patch_embed.weight": (patch_in, d), "patch_embed.bias": (d,), "cls_token": (d,),
           "pos_embed": (config.seq_len, d), "norm.weight": (d,), "norm.bias": (d,),
           "head.weight": (d, config.num_classes), "head.bias": (config.num_classes,)}
    for i in range(config.depth):
        p = f"blocks.{i}."
        ref.update({
            p + "norm1.weight": (d,), p + "norm1.bias": (d,),
            p + "attn.qkv.weight": (d, 3 * d), p + "attn.qkv.bias": (3 * d,),
            p + "attn.proj.weight": (d, d), p + "attn.proj.bias": (d,),
            p + "norm2.weight": (d,), p + "norm2.bias": (d,),
            p + "mlp.fc1.weight": (d, hid), p + "mlp.fc1.bias": (hid,),
            p + "mlp.fc2.weight": (hid, d), p + "mlp.fc2.bias": (d,),
        })
    return ref


def load_checkpoint(path: str | Path) -> ViTModel:
    header, tensors = container.read(path, CHECKPOINT_MAGIC)
    if header.get("kind") != "vit-checkpoint":
        raise container.CorruptFileError("header does not describe a ViT checkpoint")
    return model_from_payload(header, tensors)


__all__ = [
    "BlockMode", "ConfigError", "DEIT_BASE", "DEIT_SMALL", "DEIT_TINY", "DimensionError",
    "Mode", "ModeError", "ParamCensus", "PatchGridError", "ViTConfig", "ViTModel", "accuracy",
    "attention_layer_params", "attention_param_names", "checkpoint_bytes", "diluted_combine",
    "load_checkpoint", "mlp_param_names", "param_count", "patchify", "save_checkpoint",
    "tap_ids",
]
