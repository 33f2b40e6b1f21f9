"""Static multiply-accumulate and parameter audit over a ModelConfig.

A MAC is one multiply-add: conv layers cost Cout*(Cin/groups)*kh*kw*H'*W' per
image, linear layers rows*cols per applied position, attention additionally
2*N^2*C for scores and mixing. Normalization, activations, and pooling cost
zero MACs but their parameters are still counted, so the parameter total
matches a built checkpoint exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .model import BranchSpec, EmbedConfig, ModelConfig
from .stems import dw_kernel_for_stride


@dataclass(frozen=True)
class LayerCost:
    name: str
    macs: int
    params: int


@dataclass(frozen=True)
class FlopsReport:
    per_layer: tuple[LayerCost, ...]
    total_macs: int
    total_params: int

    @staticmethod
    def from_layers(items: list[tuple[str, int, int]]) -> "FlopsReport":
        layers = []
        for name, macs, params in items:
            if macs < 0 or params < 0 or macs != int(macs) or params != int(params):
                raise ConfigError(f"layer {name}: counts must be nonnegative integers")
            layers.append(LayerCost(name, int(macs), int(params)))
        return FlopsReport(tuple(layers),
                           sum(l.macs for l in layers), sum(l.params for l in layers))

    def find(self, name: str) -> LayerCost:
        for layer in self.per_layer:
            if layer.name == name:
                return layer
        raise ConfigError(f"no layer named {name!r} in report")

    def as_dict(self) -> dict:
        return {"total_macs": self.total_macs, "total_params": self.total_params,
                "per_layer": [{"name": l.name, "macs": l.macs, "params": l.params}
                              for l in self.per_layer]}

    def render_table(self) -> str:
        width = max([len("layer")] + [len(l.name) for l in self.per_layer])
        lines = [f"{'layer':<{width}}  {'macs':>14}  {'params':>12}"]
        for l in self.per_layer:
            lines.append(f"{l.name:<{width}}  {l.macs:>14,}  {l.params:>12,}")
        lines.append(f"{'total':<{width}}  {self.total_macs:>14,}  {self.total_params:>12,}")
        return "\n".join(lines)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _branch_layers(prefix: str, spec: BranchSpec, input_size: int,
                   channel: int) -> list[tuple[str, int, int]]:
    layers = []
    ch = spec.stage_channels
    s = _conv_out(input_size, 3, spec.stage_strides[0], 1)
    layers.append((f"{prefix}.stem", ch[0] * 3 * 9 * s * s, ch[0] * 27 + ch[0]))
    prev = ch[0]
    for i in range(1, len(ch)):
        stride = spec.stage_strides[i]
        k, pad = dw_kernel_for_stride(stride)
        hidden = prev * spec.expansion
        s_out = _conv_out(s, k, stride, pad)
        layers.append((f"{prefix}.ir{i}.expand", hidden * prev * s * s, hidden * prev + hidden))
        layers.append((f"{prefix}.ir{i}.dw", hidden * k * k * s_out * s_out,
                       hidden * k * k + hidden))
        if spec.se_reduction > 0:
            se_h = max(1, hidden // spec.se_reduction)
            layers.append((f"{prefix}.ir{i}.se.fc1", se_h * hidden, se_h * hidden + se_h))
            layers.append((f"{prefix}.ir{i}.se.fc2", hidden * se_h, hidden * se_h + hidden))
        layers.append((f"{prefix}.ir{i}.project", ch[i] * hidden * s_out * s_out,
                       ch[i] * hidden + ch[i]))
        prev, s = ch[i], s_out
    if ch[-1] != channel:
        layers.append((f"{prefix}.proj", channel * prev, channel * prev + channel))
    return layers


def count(cfg: ModelConfig) -> FlopsReport:
    """Per-image MACs and total parameters, layer by layer."""
    cfg.validate()
    c, n, k = cfg.channel, cfg.seq_len, cfg.num_classes
    layers: list[tuple[str, int, int]] = []
    e = cfg.embed
    if e.kind == "ipe":
        for b_id, branch in enumerate(e.branches):
            layers += _branch_layers(f"embed.branch{b_id}", branch, cfg.input_size, c)
    elif e.kind == "conv":
        spec = BranchSpec((e.grid, e.grid), e.channels, (2,) * len(e.channels))
        layers += _branch_layers("embed.trunk", spec, cfg.input_size, c)
    else:
        raw = 3 * e.patch * e.patch
        layers.append(("embed.proj", cfg.token_count * c * raw, c * raw + c))
    if cfg.merge == "class_token":
        layers.append(("cls.token", 0, c))
    if cfg.positional:
        layers.append(("pos.table", 0, n * c))
    hidden = c * cfg.mlp_ratio
    for i in range(cfg.depth):
        layers += [
            (f"block{i}.norm1", 0, 2 * c),
            (f"block{i}.attn.qkv", n * 3 * c * c, 3 * c * c + 3 * c),
            (f"block{i}.attn.attend", 2 * n * n * c, 0),
            (f"block{i}.attn.out", n * c * c, c * c + c),
            (f"block{i}.norm2", 0, 2 * c),
            (f"block{i}.ffn.fc1", n * hidden * c, hidden * c + hidden),
            (f"block{i}.ffn.fc2", n * c * hidden, c * hidden + c),
        ]
    layers.append(("final_norm", 0, 2 * c))
    if cfg.merge == "apm":
        mh = max(1, c // 4)
        layers += [("merge.fc1", n * mh * c, mh * c + mh),
                   ("merge.fc2", n * mh, mh + 1),
                   ("merge.global_logits", 0, n)]
    layers.append(("head", k * c, k * c + k))
    return FlopsReport.from_layers(layers)


def compression_curve(cfgs: list[ModelConfig]) -> str:
    """Aligned (preset, macs, params) table sorted by descending MACs."""
    rows = sorted(((cfg.preset_name, count(cfg)) for cfg in cfgs),
                  key=lambda item: -item[1].total_macs)
    width = max([len("preset")] + [len(name) for name, _ in rows])
    lines = [f"{'preset':<{width}}  {'macs':>14}  {'params':>12}"]
    for name, report in rows:
        lines.append(f"{name:<{width}}  {report.total_macs:>14,}  {report.total_params:>12,}")
    return "\n".join(lines)
