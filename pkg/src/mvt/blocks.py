"""Transformer core: pre-norm blocks (attention + feed-forward with residuals),
stochastic depth, a learnable positional table, and the class token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .init import Init
from .tensor import Tensor

# Small enough that a unit-variance token keeps post-norm variance within 1e-6
# of 1; float64 keeps the rsqrt well-conditioned at this scale.
LN_EPS = 1e-8


@dataclass(frozen=True)
class BlockConfig:
    channel: int
    heads: int
    mlp_ratio: int = 4
    droppath_rate: float = 0.0

    def validate(self) -> None:
        if self.channel % self.heads:
            raise ConfigError(
                f"channel {self.channel} not divisible by heads {self.heads}")
        if not 0.0 <= self.droppath_rate < 1.0:
            raise ConfigError(f"droppath_rate {self.droppath_rate} outside [0, 1)")
        if self.mlp_ratio < 1:
            raise ConfigError(f"mlp_ratio {self.mlp_ratio} must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.channel // self.heads

    @property
    def hidden_dim(self) -> int:
        return self.channel * self.mlp_ratio


class LayerNorm:
    def __init__(self, init: Init, name: str, channel: int):
        self.gamma = init.ones(f"{name}.gamma", (channel,))
        self.beta = init.zeros(f"{name}.beta", (channel,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma.tensor, self.beta.tensor, eps=LN_EPS)


class MultiHeadSelfAttention:
    """Fused-qkv scaled dot-product attention; scale is 1/sqrt(head_dim).

    The softmax probabilities of the most recent forward are stashed on
    last_attention as a plain (B, H, N, N) array for inspection.
    """

    def __init__(self, init: Init, name: str, cfg: BlockConfig):
        cfg.validate()
        c = cfg.channel
        self.cfg = cfg
        self.scale = cfg.head_dim ** -0.5
        self.qkv_w = init.trunc_normal(f"{name}.qkv.w", (3 * c, c))
        self.qkv_b = init.zeros(f"{name}.qkv.b", (3 * c,))
        self.out_w = init.trunc_normal(f"{name}.out.w", (c, c))
        self.out_b = init.zeros(f"{name}.out.b", (c,))
        self.last_attention: np.ndarray | None = None

    def __call__(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        if c != self.cfg.channel:
            raise ConfigError(f"attention built for channel {self.cfg.channel}, got {c}")
        h, hd = self.cfg.heads, self.cfg.head_dim
        qkv = T.linear(x, self.qkv_w.tensor, self.qkv_b.tensor)
        qkv = T.transpose(T.reshape(qkv, (b, n, 3, h, hd)), (2, 0, 3, 1, 4))
        q = T.reshape(T.slice_axis(qkv, 0, 0, 1), (b, h, n, hd))
        k = T.reshape(T.slice_axis(qkv, 0, 1, 2), (b, h, n, hd))
        v = T.reshape(T.slice_axis(qkv, 0, 2, 3), (b, h, n, hd))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * self.scale
        attn = T.softmax(scores, axis=-1)
        self.last_attention = attn.data.copy()
        ctx = T.matmul(attn, v)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, c))
        return T.linear(merged, self.out_w.tensor, self.out_b.tensor)


class FeedForward:
    """Per-token MLP: linear C -> R*C, gelu, linear R*C -> C."""

    def __init__(self, init: Init, name: str, cfg: BlockConfig):
        c, hidden = cfg.channel, cfg.hidden_dim
        self.fc1_w = init.trunc_normal(f"{name}.fc1.w", (hidden, c))
        self.fc1_b = init.zeros(f"{name}.fc1.b", (hidden,))
        self.fc2_w = init.trunc_normal(f"{name}.fc2.w", (c, hidden))
        self.fc2_b = init.zeros(f"{name}.fc2.b", (c,))

    def __call__(self, x: Tensor) -> Tensor:
        h = T.gelu(T.linear(x, self.fc1_w.tensor, self.fc1_b.tensor))
        return T.linear(h, self.fc2_w.tensor, self.fc2_b.tensor)


def drop_path(branch: Tensor, rate: float, training: bool,
              rng: np.random.Generator | None) -> Tensor:
    """Drop a residual branch per sample with probability `rate` during
    training, scaling survivors by 1/(1-rate); exact identity at eval."""
    if not training or rate == 0.0:
        return branch
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"droppath rate {rate} outside [0, 1)")
    if rng is None:
        raise ConfigError("droppath in training mode needs an rng")
    keep = 1.0 - rate
    b = branch.shape[0]
    mask = (rng.random(b) < keep).astype(np.float64) / keep
    return branch * Tensor(mask.reshape((b,) + (1,) * (branch.ndim - 1)))


class TransformerBlock:
    """x + DropPath(MSA(LN(x))), then + DropPath(FFN(LN(.)))."""

    def __init__(self, init: Init, name: str, cfg: BlockConfig):
        cfg.validate()
        self.cfg = cfg
        self.norm1 = LayerNorm(init, f"{name}.norm1", cfg.channel)
        self.attn = MultiHeadSelfAttention(init, f"{name}.attn", cfg)
        self.norm2 = LayerNorm(init, f"{name}.norm2", cfg.channel)
        self.ffn = FeedForward(init, f"{name}.ffn", cfg)

    def __call__(self, x: Tensor, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        rate = self.cfg.droppath_rate
        x = x + drop_path(self.attn(self.norm1(x)), rate, training, rng)
        x = x + drop_path(self.ffn(self.norm2(x)), rate, training, rng)
        return x


def droppath_schedule(depth: int, max_rate: float = 0.1) -> list[float]:
    """Per-block rates ramping linearly from 0 to max_rate over the stack."""
    if depth < 1:
        raise ConfigError(f"depth {depth} must be >= 1")
    return [float(r) for r in np.linspace(0.0, max_rate, depth)]


class PositionalTable:
    """Learnable additive position table covering every token (one flat table,
    class token included when present)."""

    def __init__(self, init: Init, name: str, count: int, channel: int, enabled: bool = True):
        self.count = count
        self.enabled = enabled
        self.table = init.trunc_normal(name, (1, count, channel)) if enabled else None

    def __call__(self, x: Tensor) -> Tensor:
        if not self.enabled:
            return x
        if x.shape[1] != self.count:
            raise ConfigError(
                f"positional table covers {self.count} tokens, got {x.shape[1]}")
        return x + self.table.tensor


class ClassToken:
    def __init__(self, init: Init, name: str, channel: int):
        self.channel = channel
        self.token = init.trunc_normal(name, (1, 1, channel))

    def attach(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        tok = T.broadcast_to(self.token.tensor, (b, 1, self.channel))
        return T.concat([tok, x], axis=1)
