"""Encoder-decoder transformer with learnable positions and object queries.

Positions are added to the query/key inputs of every encoder attention and to
the key side of every decoder cross-attention.  Object queries are added to
the query/key inputs of decoder self-attention and to the query side of
cross-attention.  Values never carry positions or queries.

The decoder returns one d-vector per object query.  The first ``N_q - 1``
rows are concatenated into the ID-relevant feature; the last row is the
occlusion (ID-irrelevant) feature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, ContractError, ShapeError
from .nn import LayerNorm, Linear, Module


@dataclass
class TransformerConfig:
    dim: int = 256
    heads: int = 8
    enc_layers: int = 2
    dec_layers: int = 2
    num_queries: int = 9
    ffn_mult: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"transformer: dim={self.dim} not divisible by heads={self.heads}")
        if self.num_queries < 2:
            raise ConfigError(f"transformer: num_queries={self.num_queries} < 2")
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ConfigError("transformer: need at least one encoder and one decoder layer")


@dataclass
class FeatureBundle:
    F: Tensor  # (B, N_q, d)
    f: Tensor  # (B, (N_q - 1) * d)
    fbar: Tensor  # (B, d)
    attn: list[np.ndarray] = field(default_factory=list)  # per layer (B, heads, N_q, H*W)
    height: int = 0
    width: int = 0


def split_features(F: Tensor) -> tuple[Tensor, Tensor]:
    """(B, N_q, d) -> concatenated ID rows (B, (N_q-1)*d) and last row (B, d)."""
    b, nq, d = F.shape
    f = dc.reshape(F[:, :nq - 1, :], (b, (nq - 1) * d))
    return f, F[:, nq - 1, :]


class MultiheadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.0):
        if dim % heads:
            raise ConfigError(f"attention: dim={dim} not divisible by heads={heads}")
        self.heads = heads
        self.dropout = dropout
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return dc.transpose(dc.reshape(x, (b, n, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 rng: np.random.Generator | None = None) -> tuple[Tensor, np.ndarray]:
        b, lq, d = query.shape
        if key.shape[:2] != value.shape[:2] or key.shape[2] != d or value.shape[2] != d:
            raise ShapeError(f"attention: query {query.shape}, key {key.shape}, value {value.shape}")
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = dc.scale(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // self.heads))
        weights = dc.softmax(scores, axis=-1)
        ctx = dc.matmul(dc.dropout(weights, self.dropout, rng), v)
        ctx = dc.reshape(dc.transpose(ctx, (0, 2, 1, 3)), (b, lq, d))
        return self.out_proj(ctx), weights.data


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dropout: float):
        self.lin1 = Linear(dim, hidden, rng)
        self.lin2 = Linear(hidden, dim, rng)
        self.dropout = dropout

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        return self.lin2(dc.dropout(dc.relu(self.lin1(x)), self.dropout, rng))


class EncoderLayer(Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.attn = MultiheadAttention(cfg.dim, cfg.heads, rng, cfg.dropout)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_mult * cfg.dim, rng, cfg.dropout)
        self.norm1 = LayerNorm(cfg.dim)
        self.norm2 = LayerNorm(cfg.dim)
        self.dropout = cfg.dropout

    def __call__(self, src: Tensor, pos: Tensor, rng=None) -> tuple[Tensor, np.ndarray]:
        qk = dc.add(src, pos)
        out, w = self.attn(qk, qk, src, rng)
        src = self.norm1(dc.add(src, dc.dropout(out, self.dropout, rng)))
        src = self.norm2(dc.add(src, dc.dropout(self.ffn(src, rng), self.dropout, rng)))
        return src, w


class DecoderLayer(Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.self_attn = MultiheadAttention(cfg.dim, cfg.heads, rng, cfg.dropout)
        self.cross_attn = MultiheadAttention(cfg.dim, cfg.heads, rng, cfg.dropout)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_mult * cfg.dim, rng, cfg.dropout)
        self.norm1 = LayerNorm(cfg.dim)
        self.norm2 = LayerNorm(cfg.dim)
        self.norm3 = LayerNorm(cfg.dim)
        self.dropout = cfg.dropout

    def __call__(self, tgt: Tensor, memory: Tensor, pos: Tensor, queries: Tensor,
                 rng=None) -> tuple[Tensor, np.ndarray]:
        qk = dc.add(tgt, queries)
        out, _ = self.self_attn(qk, qk, tgt, rng)
        tgt = self.norm1(dc.add(tgt, dc.dropout(out, self.dropout, rng)))
        out, w = self.cross_attn(dc.add(tgt, queries), dc.add(memory, pos), memory, rng)
        tgt = self.norm2(dc.add(tgt, dc.dropout(out, self.dropout, rng)))
        tgt = self.norm3(dc.add(tgt, dc.dropout(self.ffn(tgt, rng), self.dropout, rng)))
        return tgt, w


class DisentangledTransformer(Module):
    """Owns the positional encoding P (tokens x d) and the query set Q (N_q x d)."""

    def __init__(self, cfg: TransformerConfig, num_tokens: int, rng: np.random.Generator):
        self.cfg = cfg
        self.num_tokens = num_tokens
        self.pos = dc.parameter(rng.uniform(0.0, 1.0, (num_tokens, cfg.dim)))
        self.queries = dc.parameter(rng.standard_normal((cfg.num_queries, cfg.dim)))
        self.encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.enc_layers)]
        self.decoder = [DecoderLayer(cfg, rng) for _ in range(cfg.dec_layers)]
        self.dec_norm = LayerNorm(cfg.dim)

    def encode(self, g: Tensor, rng=None) -> Tensor:
        """g: (B, d, L) tokens -> memory (B, L, d)."""
        if g.ndim != 3 or g.shape[1] != self.cfg.dim:
            raise ShapeError(f"encode: expected (B, {self.cfg.dim}, L) tokens, got {g.shape}")
        if g.shape[2] != self.pos.shape[0]:
            raise ShapeError(f"encode: {g.shape[2]} tokens but positional encoding has {self.pos.shape[0]} rows")
        x = dc.transpose(g, (0, 2, 1))
        for layer in self.encoder:
            x, _ = layer(x, self.pos, rng)
        return x

    def decode(self, memory: Tensor, rng=None, height: int = 0, width: int = 0) -> FeatureBundle:
        if memory.shape[1] != self.pos.shape[0]:
            raise ShapeError(
                f"decode: memory has {memory.shape[1]} rows but positional encoding has {self.pos.shape[0]}")
        b = memory.shape[0]
        tgt = dc.Tensor(np.zeros((b, self.cfg.num_queries, self.cfg.dim), dtype=memory.dtype))
        maps = []
        for layer in self.decoder:
            tgt, w = layer(tgt, memory, self.pos, self.queries, rng)
            maps.append(w)
        F = self.dec_norm(tgt)
        f, fbar = split_features(F)
        return FeatureBundle(F=F, f=f, fbar=fbar, attn=maps, height=height, width=width)

    def __call__(self, g: Tensor, rng=None, height: int = 0, width: int = 0) -> FeatureBundle:
        return self.decode(self.encode(g, rng), rng, height, width)


def attention_maps(bundle: FeatureBundle, query_index: int, layer: int = -1, image: int = 0) -> np.ndarray:
    """Head-averaged cross-attention of one query, reshaped to (H, W)."""
    if not bundle.attn:
        raise ContractError("bundle carries no attention weights")
    n_layers = len(bundle.attn)
    if not -n_layers <= layer < n_layers:
        raise ContractError(f"layer {layer} out of range for {n_layers} decoder layers")
    w = bundle.attn[layer]
    if not 0 <= query_index < w.shape[2]:
        raise ContractError(f"query_index {query_index} out of range for {w.shape[2]} queries")
    if not 0 <= image < w.shape[0]:
        raise ContractError(f"image {image} out of range for batch of {w.shape[0]}")
    m = w[image, :, query_index, :].mean(axis=0)
    h, wd = bundle.height, bundle.width
    if h * wd != m.size:
        raise ContractError(f"bundle spatial size {h}x{wd} does not match {m.size} tokens")
    return m.reshape(h, wd)
