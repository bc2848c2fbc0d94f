"""Dense layers and pre-norm transformer blocks.

Reverse-mode gradients come from torch autograd; every layer here is written
out explicitly (no ``nn.Linear``/``nn.MultiheadAttention``) so parameter
names, shapes and layouts are under our control and match the CKP1 format.
Weights of a dense layer are stored ``[in, out]``.
"""
from __future__ import annotations

import math
from collections import OrderedDict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError


def param_set(module: nn.Module) -> "OrderedDict[str, nn.Parameter]":
    """Ordered ``name -> parameter`` view of a module; ``.grad`` holds the gradient."""
    return OrderedDict(module.named_parameters())


def dense_forward(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``out[..., j] = sum_k x[..., k] * w[k, j] + b[j]``."""
    if w.dim() != 2:
        raise DimensionError(f"weight must be 2-D, got shape {tuple(w.shape)}")
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"input feature dim {x.shape[-1]} does not match weight rows {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"bias shape {tuple(b.shape)} != ({w.shape[1]},)")
    return x @ w + b


class Dense(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.w = nn.Parameter(torch.empty(d_in, d_out))
        self.b = nn.Parameter(torch.zeros(d_out))
        bound = math.sqrt(6.0 / (d_in + d_out))  # xavier uniform
        nn.init.uniform_(self.w, -bound, bound)

    def forward(self, x):
        return dense_forward(x, self.w, self.b)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.g = nn.Parameter(torch.ones(dim))
        self.b = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, (x.shape[-1],), self.g, self.b, self.eps)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if heads < 1 or dim % heads:
            raise ConfigurationError(f"embed dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Dense(dim, 3 * dim)
        self.proj = Dense(dim, dim)

    def _qkv(self, x):
        *lead, t, d = x.shape
        qkv = self.qkv(x).reshape(*lead, t, 3, self.heads, d // self.heads)
        return (z.transpose(-3, -2) for z in qkv.unbind(-3))  # [..., h, T, hd]

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        """Attention probabilities ``[..., heads, T, T]`` (rows sum to 1)."""
        q, k, _ = self._qkv(x)
        return ((q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])).softmax(dim=-1)

    def forward(self, x):
        q, k, v = self._qkv(x)
        out = F.scaled_dot_product_attention(q, k, v)  # softmax(q k^T / sqrt(hd)) v
        return self.proj(out.transpose(-3, -2).reshape(x.shape))


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = Dense(dim, ratio * dim)
        self.fc2 = Dense(ratio * dim, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm block: ``x + attn(ln1(x))`` followed by ``+ mlp(ln2(.))``."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


def transformer_block_forward(tokens: torch.Tensor, block: TransformerBlock) -> torch.Tensor:
    if tokens.shape[-1] % block.attn.heads:
        raise ConfigurationError(
            f"token dim {tokens.shape[-1]} not divisible by {block.attn.heads} heads")
    return block(tokens)
