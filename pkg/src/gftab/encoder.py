"""Feature representation: variable selection over continuous inputs,
categorical embeddings, post-norm self-attention and the pooled heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

EMB_STD = 0.05
D_EMB_CHOICES = (12, 24, 36, 48)
LAYER_CHOICES = (1, 2, 4)


@dataclass(frozen=True)
class EncoderConfig:
    d_emb: int = 24
    n_heads: int = 2
    d_attn: int = 12
    n_layers: int = 1
    depths: int = 1
    d_lin: int = 32
    D: int = 8
    ff_mult: int = 2

    def __post_init__(self):
        if self.d_lin < 2 * self.D:
            raise ValueError(f"d_lin={self.d_lin} must be >= 2*D={2 * self.D}")
        if min(self.d_emb, self.n_heads, self.d_attn, self.n_layers, self.depths, self.D) < 1:
            raise ValueError("encoder widths and counts must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _init_affine(layer: nn.Linear) -> None:
    bound = 1.0 / math.sqrt(layer.in_features)
    nn.init.uniform_(layer.weight, -bound, bound)
    nn.init.uniform_(layer.bias, -bound, bound)


def linear(d_in: int, d_out: int) -> nn.Linear:
    layer = nn.Linear(d_in, d_out, dtype=torch.float64)
    _init_affine(layer)
    return layer


def layer_norm(d: int) -> nn.LayerNorm:
    return nn.LayerNorm(d, dtype=torch.float64)


class GRN(nn.Module):
    """Gated residual network: LayerNorm(skip(a) + GLU(W2 ELU(W1 a + b1) + b2))."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = linear(d_in, d_hidden)
        self.fc2 = linear(d_hidden, d_out)
        self.gate = linear(d_out, d_out)
        self.value = linear(d_out, d_out)
        self.skip = linear(d_in, d_out) if d_in != d_out else None
        self.norm = layer_norm(d_out)

    def forward(self, a: torch.Tensor) -> torch.Tensor:
        h = self.fc2(F.elu(self.fc1(a)))
        glu = torch.sigmoid(self.gate(h)) * self.value(h)
        res = a if self.skip is None else self.skip(a)
        return self.norm(res + glu)


class VariableSelection(nn.Module):
    """Per-variable GRN tokens scaled by softmax importance weights.

    Token row ``m`` is ``v_m * GRN_m(x_m)``; the rows sum to the weighted
    aggregate. With ``enabled=False`` each variable gets a plain affine
    embedding ``x_m * w_m + b_m`` and no weighting.
    """

    def __init__(self, m_cont: int, d_emb: int, enabled: bool = True):
        super().__init__()
        self.m_cont = m_cont
        self.d_emb = d_emb
        self.enabled = enabled
        if enabled:
            self.per_variable = nn.ModuleList(GRN(1, d_emb, d_emb) for _ in range(m_cont))
            self.weighting = GRN(m_cont, d_emb, m_cont) if m_cont else None
        else:
            # fan_in is 1 for a scalar input
            self.w = nn.Parameter(torch.empty(m_cont, d_emb, dtype=torch.float64).uniform_(-1.0, 1.0))
            self.b = nn.Parameter(torch.empty(m_cont, d_emb, dtype=torch.float64).uniform_(-1.0, 1.0))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if self.m_cont == 0:
            return x.new_zeros(x.shape[:-1] + (0, self.d_emb)), x.new_zeros(x.shape[:-1] + (0,))
        if not self.enabled:
            tokens = x[..., None] * self.w + self.b
            return tokens, torch.full_like(x, 1.0 / self.m_cont)
        xi = torch.stack([grn(x[..., m : m + 1]) for m, grn in enumerate(self.per_variable)], dim=-2)
        v = torch.softmax(self.weighting(x), dim=-1)
        return v[..., None] * xi, v


class AttentionBlock(nn.Module):
    """Multi-head scaled dot-product attention + feed-forward, post-norm."""

    def __init__(self, d_emb: int, n_heads: int, d_attn: int, d_ff: int):
        super().__init__()
        self.n_heads, self.d_attn = n_heads, d_attn
        width = n_heads * d_attn
        self.q = linear(d_emb, width)
        self.k = linear(d_emb, width)
        self.v = linear(d_emb, width)
        self.out = linear(width, d_emb)
        self.norm1 = layer_norm(d_emb)
        self.ff1 = linear(d_emb, d_ff)
        self.ff2 = linear(d_ff, d_emb)
        self.norm2 = layer_norm(d_emb)

    def _heads(self, t: torch.Tensor) -> torch.Tensor:
        return t.unflatten(-1, (self.n_heads, self.d_attn)).transpose(-3, -2)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        q, k = self._heads(self.q(x)), self._heads(self.k(x))
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d_attn), dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w = self.attention_weights(x)
        heads = w @ self._heads(self.v(x))
        attn = self.out(heads.transpose(-3, -2).flatten(-2))
        x = self.norm1(x + attn)
        return self.norm2(x + self.ff2(F.gelu(self.ff1(x))))


class GFTabEncoder(nn.Module):
    """Shared feature representation module for corrupted views and classification."""

    def __init__(
        self,
        cfg: EncoderConfig,
        m_cont: int,
        cardinalities,
        n_classes: int,
        n_leaves: int = 0,
        use_vsn: bool = True,
    ):
        super().__init__()
        self.cfg = cfg
        self.m_cont = m_cont
        self.cardinalities = [int(n) for n in cardinalities]
        self.n_classes = n_classes
        self.vsn = VariableSelection(m_cont, cfg.d_emb, enabled=use_vsn)
        self.cat_tables = nn.ParameterList(
            nn.Parameter(torch.randn(n, cfg.d_emb, dtype=torch.float64) * EMB_STD) for n in self.cardinalities
        )
        self.layers = nn.ModuleList(
            AttentionBlock(cfg.d_emb, cfg.n_heads, cfg.d_attn, cfg.ff_mult * cfg.d_emb) for _ in range(cfg.n_layers)
        )
        widths = [cfg.d_emb] + [cfg.d_lin] * cfg.depths
        self.pool = nn.ModuleList(linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.head = linear(cfg.d_lin, n_classes)
        self.leaf_table = nn.Parameter(torch.randn(n_leaves, cfg.d_emb, dtype=torch.float64) * EMB_STD)

    @property
    def n_leaves(self) -> int:
        return self.leaf_table.shape[0]

    def continuous_tokens(self, x_cont: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.vsn(x_cont)

    def categorical_tokens(self, codes, noise=None) -> torch.Tensor:
        codes = torch.as_tensor(np.asarray(codes), dtype=torch.long)
        if codes.shape[-1] != len(self.cat_tables):
            raise ValueError("code width does not match categorical columns")
        for m, n in enumerate(self.cardinalities):
            col = codes[..., m]
            if col.numel() and (col.min() < 0 or col.max() >= n):
                raise ValueError(f"categorical code out of range for column {m}")
        if not self.cat_tables:
            return torch.zeros(codes.shape + (self.cfg.d_emb,), dtype=torch.float64)
        tokens = torch.stack([table[codes[..., m]] for m, table in enumerate(self.cat_tables)], dim=-2)
        if noise is not None and noise.sigma > 0:
            tokens = tokens + torch.from_numpy(noise.sample(self.cfg.d_emb))
        return tokens

    def tree_tokens(self, leaf_ids) -> torch.Tensor:
        """Rows of the leaf table for each sample's active leaves (``B x L``)."""
        leaf_ids = torch.as_tensor(np.asarray(leaf_ids), dtype=torch.long)
        return self.leaf_table[leaf_ids]

    def transform(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-2] < 1:
            raise ValueError("need at least one token")
        for layer in self.layers:
            tokens = layer(tokens)
        return tokens.mean(dim=-2)

    def project(self, pooled: torch.Tensor) -> torch.Tensor:
        h = pooled
        for i, layer in enumerate(self.pool):
            h = layer(h)
            if i < len(self.pool) - 1:
                h = F.gelu(h)
        return h

    def encode_view(self, tokens: torch.Tensor) -> torch.Tensor:
        """``... x T x d_emb`` tokens to a ``d_lin`` representation."""
        return self.project(self.transform(tokens))

    def classify(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.head(self.encode_view(tokens))

    def column_tokens(self, x_cont: torch.Tensor, codes) -> torch.Tensor:
        cont, _ = self.continuous_tokens(x_cont)
        return torch.cat([cont, self.categorical_tokens(codes)], dim=-2)
