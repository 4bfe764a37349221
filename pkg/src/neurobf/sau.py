"""Gated attention layers: a learned gate blends a feed-forward path with MHSA."""

from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigError
from .nn import BatchNorm, Dense, Rng, init_weight, logistic, mhsa, selu

GATE_INIT = -2.0
POS_STD = 0.02


class SauLayer(nn.Module):
    def __init__(self, dim: int, rng: Rng, heads: int = 4):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"hidden dim {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.norm = BatchNorm(dim)
        self.ffn = Dense(dim, dim, rng)
        self.w_qkv = init_weight(rng, dim, 3 * dim)
        self.w_attn = init_weight(rng, dim, dim)
        self.attn_norm = BatchNorm(dim)
        self.out = Dense(dim, dim, rng)
        self.gate = nn.Parameter(torch.tensor(GATE_INIT))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x_norm = self.norm(x)
        h_ffn = selu(self.ffn(x_norm))
        h_attn = mhsa(x_norm, self.w_qkv, self.w_attn, self.heads, norm=self.attn_norm)
        g = logistic(self.gate)
        h = g * h_attn + (1 - g) * h_ffn
        return selu(self.out(h)) + x_norm


class SauStack(nn.Module):
    """Layers applied in order after adding positional embeddings once.

    With ``tokens=None`` the stack has no positional embeddings and is
    equivariant to permutations of its input tokens (used for sets).
    """

    def __init__(self, dim: int, depth: int, rng: Rng, tokens: int | None = None, heads: int = 4):
        super().__init__()
        if depth < 1:
            raise ConfigError(f"stack depth must be >= 1, got {depth}")
        self.tokens = tokens
        self.pos = nn.Parameter(rng.normal((tokens, dim), std=POS_STD)) if tokens is not None else None
        self.layers = nn.ModuleList(SauLayer(dim, rng, heads) for _ in range(depth))

    @property
    def depth(self) -> int:
        return len(self.layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.pos is not None:
            if x.shape[1] != self.tokens:
                raise ConfigError(f"stack expects {self.tokens} tokens, got {x.shape[1]}")
            x = x + self.pos
        for layer in self.layers:
            x = layer(x)
        return x


def sau_layer_forward(x: torch.Tensor, layer: SauLayer, training: bool = False) -> torch.Tensor:
    layer.train(training)
    return layer(x)


def sau_forward(x: torch.Tensor, stack: SauStack, training: bool = False) -> torch.Tensor:
    stack.train(training)
    return stack(x)
