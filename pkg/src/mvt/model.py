"""Complete classifiers: multi-branch patch embedding, a pre-norm transformer
stack, one of three readouts (adaptive merge / average pool / class token), and
a linear head. Owns the size presets, the ablation grid, and checkpoint I/O.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import configio
from . import tensor as T
from .blocks import (BlockConfig, ClassToken, LayerNorm, PositionalTable,
                     TransformerBlock, droppath_schedule)
from .errors import ConfigError, DataFormatError, ShapeError
from .init import Init
from .merging import (AdaptiveMerge, MergeWeights, avg_pool_merge,
                      class_token_readout)
from .stems import (BranchSpec, ConvPatchEmbed, IrregularPatchEmbed,
                    NaivePatchEmbed)
from .tensor import Tensor

MERGE_MODES = ("apm", "avg_pool", "class_token")
EMBED_KINDS = ("ipe", "conv", "naive")


@dataclass(frozen=True)
class EmbedConfig:
    kind: str
    branches: tuple[BranchSpec, ...] = ()  # ipe
    grid: int = 0                          # conv: output tokens per side
    channels: tuple[int, ...] = ()         # conv: stage channels
    patch: int = 0                         # naive: patch side

    def token_count(self, input_size: int) -> int:
        if self.kind == "ipe":
            return sum(b.token_count for b in self.branches)
        if self.kind == "conv":
            return self.grid * self.grid
        return (input_size // self.patch) ** 2

    def validate(self, input_size: int, channel: int) -> None:
        if self.kind == "ipe":
            if not self.branches:
                raise ConfigError("ipe embedding needs at least one branch")
            for b in self.branches:
                b.validate(input_size)
                if b.final_pool == "none" and b.stage_channels[-1] != channel:
                    raise ConfigError(
                        f"unpooled branch ends at {b.stage_channels[-1]}, model channel is {channel}")
        elif self.kind == "conv":
            if self.grid < 1 or input_size % self.grid:
                raise ConfigError(f"conv grid {self.grid} does not divide input {input_size}")
            if 2 ** len(self.channels) != input_size // self.grid:
                raise ConfigError(
                    f"conv embedding: {len(self.channels)} stride-2 stages cannot reach "
                    f"grid {self.grid} from {input_size}")
            if self.channels[-1] != channel:
                raise ConfigError(
                    f"conv trunk ends at {self.channels[-1]}, model channel is {channel}")
        elif self.kind == "naive":
            if self.patch < 1 or input_size % self.patch:
                raise ConfigError(f"patch {self.patch} does not divide input {input_size}")
        else:
            raise ConfigError(f"unknown embedding kind {self.kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "ipe":
            return {"kind": "ipe", "branches": [_branch_to_dict(b) for b in self.branches]}
        if self.kind == "conv":
            return {"kind": "conv", "grid": self.grid, "channels": list(self.channels)}
        return {"kind": "naive", "patch": self.patch}

    @staticmethod
    def from_dict(d: dict) -> "EmbedConfig":
        kind = d.get("kind")
        if kind == "ipe":
            configio.check_keys(d, {"kind", "branches"}, set(), "embed")
            return EmbedConfig("ipe", branches=tuple(_branch_from_dict(b) for b in d["branches"]))
        if kind == "conv":
            configio.check_keys(d, {"kind", "grid", "channels"}, set(), "embed")
            return EmbedConfig("conv", grid=int(d["grid"]), channels=tuple(int(c) for c in d["channels"]))
        if kind == "naive":
            configio.check_keys(d, {"kind", "patch"}, set(), "embed")
            return EmbedConfig("naive", patch=int(d["patch"]))
        raise ConfigError(f"embed: unknown kind {kind!r}")


def _branch_to_dict(b: BranchSpec) -> dict:
    return {"target_grid": list(b.target_grid), "stage_channels": list(b.stage_channels),
            "stage_strides": list(b.stage_strides), "expansion": b.expansion,
            "se_reduction": b.se_reduction, "final_pool": b.final_pool}


def _branch_from_dict(d: dict) -> BranchSpec:
    configio.check_keys(d, {"target_grid", "stage_channels", "stage_strides"},
                        {"expansion", "se_reduction", "final_pool"}, "branch")
    return BranchSpec(target_grid=tuple(int(v) for v in d["target_grid"]),
                      stage_channels=tuple(int(v) for v in d["stage_channels"]),
                      stage_strides=tuple(int(v) for v in d["stage_strides"]),
                      expansion=int(d.get("expansion", 4)),
                      se_reduction=int(d.get("se_reduction", 4)),
                      final_pool=str(d.get("final_pool", "none")))


@dataclass(frozen=True)
class ModelConfig:
    preset_name: str
    input_size: int
    channel: int
    depth: int
    heads: int
    mlp_ratio: int
    embed: EmbedConfig
    merge: str = "apm"
    positional: bool = True
    droppath_max: float = 0.1
    num_classes: int = 1000

    def validate(self) -> None:
        BlockConfig(self.channel, self.heads, self.mlp_ratio, 0.0).validate()
        if not 0.0 <= self.droppath_max < 1.0:
            raise ConfigError(f"droppath_max {self.droppath_max} outside [0, 1)")
        if self.depth < 1:
            raise ConfigError(f"depth {self.depth} must be >= 1")
        if self.merge not in MERGE_MODES:
            raise ConfigError(f"merge {self.merge!r} not one of {MERGE_MODES}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes {self.num_classes} must be >= 2")
        if self.input_size < 8:
            raise ConfigError(f"input_size {self.input_size} must be >= 8")
        self.embed.validate(self.input_size, self.channel)

    @property
    def token_count(self) -> int:
        """Tokens emitted by the embedding (class token excluded)."""
        return self.embed.token_count(self.input_size)

    @property
    def seq_len(self) -> int:
        return self.token_count + (1 if self.merge == "class_token" else 0)

    def token_layout(self) -> str:
        if self.embed.kind == "ipe":
            return "+".join(str(b.token_count) for b in self.embed.branches)
        return str(self.token_count)

    def to_dict(self) -> dict:
        return {"preset_name": self.preset_name, "input_size": self.input_size,
                "channel": self.channel, "depth": self.depth, "heads": self.heads,
                "mlp_ratio": self.mlp_ratio, "embed": self.embed.to_dict(),
                "merge": self.merge, "positional": self.positional,
                "droppath_max": self.droppath_max, "num_classes": self.num_classes}

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        required = {"preset_name", "input_size", "channel", "depth", "heads",
                    "mlp_ratio", "embed"}
        optional = {"merge", "positional", "droppath_max", "num_classes"}
        configio.check_keys(d, required, optional, "model config")
        cfg = ModelConfig(preset_name=str(d["preset_name"]), input_size=int(d["input_size"]),
                          channel=int(d["channel"]), depth=int(d["depth"]),
                          heads=int(d["heads"]), mlp_ratio=int(d["mlp_ratio"]),
                          embed=EmbedConfig.from_dict(d["embed"]),
                          merge=str(d.get("merge", "apm")),
                          positional=bool(d.get("positional", True)),
                          droppath_max=float(d.get("droppath_max", 0.1)),
                          num_classes=int(d.get("num_classes", 1000)))
        cfg.validate()
        return cfg


# --------------------------------------------------------------------------
# Presets
# --------------------------------------------------------------------------

_BASE_RAMP = (16, 32, 64, 128)  # stage channels at model channel 300


def _scaled_ramp(channel: int) -> tuple[int, ...]:
    """Stem channel ramp scaled with the model channel (multiples of 4, min 8)."""
    f = channel / 300.0
    return tuple(max(8, 4 * round(b * f / 4.0)) for b in _BASE_RAMP)


def full_ipe_branches(channel: int) -> tuple[BranchSpec, ...]:
    """The 224px three-branch layout: 7x7 + 4x4 + pooled 1x1 = 66 tokens."""
    r = _scaled_ramp(channel)
    return (
        BranchSpec((7, 7), (r[0], r[1], r[2], r[3], channel), (2, 2, 2, 2, 2)),
        BranchSpec((4, 4), (r[0], r[1], r[2], channel), (2, 2, 2, 7)),
        BranchSpec((1, 1), (r[0], r[1], r[2], r[3]), (2, 2, 2, 2), final_pool="global_avg"),
    )


def _conv_ramp(channel: int) -> tuple[int, ...]:
    r = _scaled_ramp(channel)
    return (r[0], r[1], r[2], channel)


def presets() -> dict[str, ModelConfig]:
    out: dict[str, ModelConfig] = {}
    for name, (c, d, h) in (("880M", (300, 8, 12)), ("610M", (264, 6, 12)),
                            ("310M", (210, 5, 10))):
        out[name] = ModelConfig(preset_name=name, input_size=224, channel=c, depth=d,
                                heads=h, mlp_ratio=4,
                                embed=EmbedConfig("ipe", branches=full_ipe_branches(c)),
                                merge="apm", positional=True, droppath_max=0.1,
                                num_classes=1000)
    out["desk-64"] = ModelConfig(
        preset_name="desk-64", input_size=64, channel=64, depth=2, heads=4, mlp_ratio=4,
        embed=EmbedConfig("ipe", branches=(
            BranchSpec((4, 4), (16, 32, 48, 64), (2, 2, 2, 2)),
            BranchSpec((2, 2), (8, 16, 32, 48, 64), (2, 2, 2, 2, 2)),
            BranchSpec((1, 1), (8, 16, 32, 48), (2, 2, 2, 2), final_pool="global_avg"),
        )),
        merge="apm", positional=True, droppath_max=0.1, num_classes=10)
    out["desk-32"] = ModelConfig(
        preset_name="desk-32", input_size=32, channel=32, depth=2, heads=2, mlp_ratio=4,
        embed=EmbedConfig("ipe", branches=(
            BranchSpec((2, 2), (8, 16, 24, 32), (2, 2, 2, 2)),
            BranchSpec((1, 1), (8, 16, 32), (2, 2, 2), final_pool="global_avg"),
        )),
        merge="apm", positional=True, droppath_max=0.1, num_classes=10)
    for cfg in out.values():
        cfg.validate()
    return out


# --------------------------------------------------------------------------
# The model
# --------------------------------------------------------------------------

class Model:
    def __init__(self, cfg: ModelConfig, init: Init):
        cfg.validate()
        self.cfg = cfg
        self.init = init
        c = cfg.channel
        e = cfg.embed
        if e.kind == "ipe":
            self.embed = IrregularPatchEmbed(init, list(e.branches), cfg.input_size, c)
        elif e.kind == "conv":
            self.embed = ConvPatchEmbed(init, e.grid, e.channels, cfg.input_size, c)
        else:
            self.embed = NaivePatchEmbed(init, e.patch, cfg.input_size, c)
        self.cls = ClassToken(init, "cls.token", c) if cfg.merge == "class_token" else None
        self.pos = PositionalTable(init, "pos.table", cfg.seq_len, c, enabled=cfg.positional)
        rates = droppath_schedule(cfg.depth, cfg.droppath_max)
        self.blocks = [TransformerBlock(init, f"block{i}",
                                        BlockConfig(c, cfg.heads, cfg.mlp_ratio, rates[i]))
                       for i in range(cfg.depth)]
        self.final_norm = LayerNorm(init, "final_norm", c)
        self.merge = AdaptiveMerge(init, "merge", c, cfg.seq_len) if cfg.merge == "apm" else None
        self.head_w = init.trunc_normal("head.w", (cfg.num_classes, c))
        self.head_b = init.zeros("head.b", (cfg.num_classes,))

    @property
    def params(self):
        return self.init.params

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def forward(self, images, training: bool = False,
                rng: np.random.Generator | None = None,
                token_perm: np.ndarray | None = None) -> tuple[Tensor, list[MergeWeights]]:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
        s = self.cfg.input_size
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise ShapeError(f"expected images (B, 3, {s}, {s}), got {x.shape}")
        tokens = self.embed(x).tokens
        if token_perm is not None:
            perm = np.asarray(token_perm)
            if sorted(perm.tolist()) != list(range(tokens.shape[1])):
                raise ConfigError(f"token_perm must permute 0..{tokens.shape[1] - 1}")
            tokens = T.take(tokens, perm, axis=1)
        if self.cls is not None:
            tokens = self.cls.attach(tokens)
        tokens = self.pos(tokens)
        for blk in self.blocks:
            tokens = blk(tokens, training=training, rng=rng)
        tokens = self.final_norm(tokens)
        records: list[MergeWeights] = []
        if self.cfg.merge == "apm":
            feature, records = self.merge(tokens)
        elif self.cfg.merge == "avg_pool":
            feature = avg_pool_merge(tokens)
        else:
            feature = class_token_readout(tokens)
        logits = T.linear(feature, self.head_w.tensor, self.head_b.tensor)
        return logits, records


def build_model(cfg: ModelConfig, seed: int) -> Model:
    return Model(cfg, Init(seed))


# --------------------------------------------------------------------------
# Ablation grid
# --------------------------------------------------------------------------

def ablation_variants(base: ModelConfig) -> list[ModelConfig]:
    """The 3x3 grid {naive, conv, ipe} x {class_token, avg_pool, apm}, each
    refit to the base compute budget when its counted MACs drift beyond 25%."""
    from . import flops  # deferred: flops counts ModelConfigs

    base_macs = flops.count(base).total_macs
    embeds = {
        "naive": EmbedConfig("naive", patch=16),
        "conv": EmbedConfig("conv", grid=base.input_size // 16, channels=_conv_ramp(base.channel)),
        "ipe": base.embed,
    }
    out = []
    for kind in ("naive", "conv", "ipe"):
        for merge in ("class_token", "avg_pool", "apm"):
            cfg = replace(base, preset_name=f"{base.preset_name}-{kind}-{merge}",
                          embed=embeds[kind], merge=merge)
            cfg = _fit_budget(cfg, base_macs, flops.count)
            cfg.validate()
            out.append(cfg)
    return out


def _with_channel(cfg: ModelConfig, channel: int) -> ModelConfig:
    if cfg.embed.kind == "conv":
        embed = EmbedConfig("conv", grid=cfg.embed.grid, channels=_conv_ramp(channel))
    elif cfg.embed.kind == "naive":
        embed = cfg.embed
    else:
        raise ConfigError("budget refit only rebuilds naive/conv embeddings")
    return replace(cfg, channel=channel, embed=embed)


def _fit_budget(cfg: ModelConfig, target_macs: int, counter) -> ModelConfig:
    if abs(counter(cfg).total_macs - target_macs) <= 0.25 * target_macs:
        return cfg
    best, best_err = None, None
    for depth in range(max(1, cfg.depth - 2), cfg.depth + 3):
        for k in range(1, max(2, 2 * cfg.channel // cfg.heads) + 1):
            cand = replace(_with_channel(cfg, k * cfg.heads), depth=depth)
            err = abs(counter(cand).total_macs - target_macs)
            if best_err is None or err < best_err:
                best, best_err = cand, err
    return best


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MVTCKPT1"


def config_path_for(checkpoint_path: str) -> str:
    return checkpoint_path + ".config.json"


def save_checkpoint(path: str, model: Model) -> None:
    """Flat binary container: magic, record count, then (name, shape, float64
    little-endian payload) records; the config goes in a sibling JSON file."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            blob = name.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            arr = p.data.astype("<f8", order="C", copy=True)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(np.asarray(arr.shape, dtype="<u4").tobytes())
            fh.write(arr.tobytes(order="C"))
    configio.save_json(config_path_for(path), model.cfg.to_dict())


def load_checkpoint(path: str) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    cfg = ModelConfig.from_dict(configio.load_json(config_path_for(path)))
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read checkpoint {path}: {exc}") from None
    if blob[:8] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad checkpoint magic {blob[:8]!r}")
    off = 8

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise DataFormatError(f"{path}: truncated checkpoint at byte {off}")
        out = blob[off:off + n]
        off += n
        return out

    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = tuple(np.frombuffer(take(4 * ndim), dtype="<u4").astype(int))
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
    if off != len(blob):
        raise DataFormatError(f"{path}: {len(blob) - off} trailing bytes after records")
    return cfg, arrays


def load_model(path: str) -> Model:
    cfg, arrays = load_checkpoint(path)
    model = build_model(cfg, seed=0)
    names, got = set(model.params), set(arrays)
    if names != got:
        raise DataFormatError(
            f"{path}: parameter names mismatch; missing {sorted(names - got)}, "
            f"unexpected {sorted(got - names)}")
    for name, p in model.params.items():
        if arrays[name].shape != p.data.shape:
            raise DataFormatError(
                f"{path}: {name} has shape {arrays[name].shape}, model expects {p.data.shape}")
        p.data[:] = arrays[name]
    return model
