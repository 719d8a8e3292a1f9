"""Gated-attention conditioner producing raw spline parameters.

Coordinates are grouped into one token per residue. A token's features are
the conditioning coordinates of that residue: circle coordinates contribute
``(cos, sin)``, interval coordinates ``(u, 1)`` and coordinates being
transformed contribute zeros.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .flow import CIRCLE, CoordinateLayout, Module
from .splines import n_raw_params

LAPLACE_MU = math.sqrt(0.5)
LAPLACE_SIGMA = math.sqrt(0.25)
NORM_EPS = 1e-6


@dataclass
class GAUConfig:
    model_dim: int = 64
    query_dim: int = 32
    key_dim: int = 32
    value_dim: int = 64
    n_layers: int = 1
    dropout: float = 0.1
    rel_buckets: int = 32
    rel_max_distance: int = 128
    max_tokens: int = 256
    rotary: bool = False

    def validate(self) -> None:
        for k in ("model_dim", "query_dim", "key_dim", "value_dim", "n_layers", "rel_buckets",
                  "rel_max_distance", "max_tokens"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.query_dim != self.key_dim:
            raise ValueError("query and key dims must match")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.rotary and self.query_dim % 2:
            raise ValueError("rotary embeddings need an even query dim")

    def to_json(self) -> dict:
        return asdict(self)


def laplace_attention(z):
    """Elementwise 0.5 (1 + erf((z - mu) / (sigma sqrt 2)))."""
    z = ad.as_tensor(z)
    return 0.5 * (1.0 + ad.erf((z - LAPLACE_MU) / (LAPLACE_SIGMA * math.sqrt(2.0))))


def scale_norm(x, g) -> Tensor:
    """g * x / max(|x|, eps) over the last axis."""
    x = ad.as_tensor(x)
    sq = ad.square(x).sum(axis=-1, keepdims=True)
    floor = NORM_EPS * NORM_EPS
    n = ad.sqrt(ad.where(sq.value > floor, sq, floor))
    return g * x / n


def t5_bucket(relative: np.ndarray, n_buckets: int = 32, max_distance: int = 128) -> np.ndarray:
    """Bidirectional T5 bucketing of signed offsets ``j - i``."""
    relative = np.asarray(relative)
    half = n_buckets // 2
    out = np.where(relative > 0, half, 0)
    n = np.abs(relative)
    max_exact = half // 2
    small = n < max_exact
    safe = np.maximum(n, 1)
    large = max_exact + (np.log(safe / max_exact) / math.log(max_distance / max_exact)
                         * (half - max_exact)).astype(int)
    large = np.minimum(large, half - 1)
    return out + np.where(small, n, large)


def _init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


def _rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    rot = ad.concat([-x2, x1], axis=-1)
    return x * cos + rot * sin


def _rope_tables(n: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    half = dim // 2
    freq = 1.0 / (10000.0 ** (np.arange(half) / half))
    ang = np.arange(n)[:, None] * freq[None, :]
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang), np.sin(ang)


def _dropout(x: Tensor, p: float, rng) -> Tensor:
    if rng is None or p == 0.0:
        return x
    keep = rng.random(x.shape) >= p
    return x * (keep / (1.0 - p))


class GAU(Module):
    """Single-head gated attention unit with a residual connection."""

    def __init__(self, cfg: GAUConfig, rng: np.random.Generator):
        d, s, e = cfg.model_dim, cfg.query_dim, cfg.value_dim
        self.cfg = cfg
        self.g = Parameter(np.ones(1))
        self.w_base = Parameter(_init(rng, d, (d, s)))
        self.b_base = Parameter(np.zeros(s))
        self.q_scale = Parameter(1.0 + 0.02 * rng.standard_normal(s))
        self.q_shift = Parameter(np.zeros(s))
        self.k_scale = Parameter(1.0 + 0.02 * rng.standard_normal(s))
        self.k_shift = Parameter(np.zeros(s))
        self.w_u = Parameter(_init(rng, d, (d, e)))
        self.b_u = Parameter(np.zeros(e))
        self.w_v = Parameter(_init(rng, d, (d, e)))
        self.b_v = Parameter(np.zeros(e))
        self.w_o = Parameter(_init(rng, e, (e, d)))
        self.b_o = Parameter(np.zeros(d))
        self.rel_bias = Parameter(np.zeros(cfg.rel_buckets))

    def __call__(self, x, rng=None) -> Tensor:
        x = ad.as_tensor(x)
        T = x.shape[-2]
        cfg = self.cfg
        h = scale_norm(x, self.g)
        base = ad.silu(h @ self.w_base + self.b_base)
        q = base * self.q_scale + self.q_shift
        k = base * self.k_scale + self.k_shift
        if cfg.rotary:
            cos, sin = _rope_tables(T, cfg.query_dim)
            q, k = _rotate(q, cos, sin), _rotate(k, cos, sin)
        u = ad.silu(h @ self.w_u + self.b_u)
        v = ad.silu(h @ self.w_v + self.b_v)
        pos = np.arange(T)
        buckets = t5_bucket(pos[None, :] - pos[:, None], cfg.rel_buckets, cfg.rel_max_distance)
        bias = ad.take(self.rel_bias, buckets.reshape(-1), axis=0).reshape((T, T))
        logits = (q @ ad.swap_last(k)) / math.sqrt(cfg.query_dim) + bias
        a = _dropout(laplace_attention(logits), cfg.dropout, rng)
        out = (u * (a @ v)) @ self.w_o + self.b_o
        return x + _dropout(out, cfg.dropout, rng)


class PositionTable(Module):
    """Learned absolute position vectors shared by every conditioner of a flow."""

    def __init__(self, max_tokens: int, dim: int, rng: np.random.Generator):
        self.table = Parameter(0.02 * rng.standard_normal((max_tokens, dim)))

    def __call__(self, n: int) -> Tensor:
        if n > self.table.shape[0]:
            raise ValueError(f"sequence of {n} tokens exceeds the position table")
        return self.table[:n]


def tokenize(x, mask: np.ndarray, layout: CoordinateLayout) -> Tensor:
    """(batch, tokens, 2 * width) features of the coordinates where ``mask`` is set."""
    x = ad.as_tensor(x)
    B = x.shape[0]
    width = int(layout.slots.max()) + 1 if layout.dim else 1
    T = layout.n_tokens
    circ = layout.kinds == CIRCLE
    first = ad.where(circ, ad.cos(x), x)
    second = ad.where(circ, ad.sin(x), 1.0)
    feats = ad.stack([first, second], axis=-1) * mask[:, None].astype(float)  # (B, d, 2)
    # scatter each coordinate into its (token, slot) position
    flat_pos = layout.residues * width + layout.slots
    target = np.full(T * width, layout.dim)  # points at a zero row
    target[flat_pos] = np.arange(layout.dim)
    padded = ad.concat([feats, Tensor(np.zeros((B, 1, 2)))], axis=1)
    tokens = ad.take(padded, target, axis=1)  # (B, T*width, 2)
    return tokens.reshape((B, T, 2 * width))


class GAUConditioner(Module):
    """Maps the conditioning half of ``x`` to raw spline parameters of the other half."""

    def __init__(self, layout: CoordinateLayout, transformed, cfg: GAUConfig,
                 positions: PositionTable, bins: int, rng: np.random.Generator):
        cfg.validate()
        self.layout = layout
        self.cfg = cfg
        self.bins = bins
        self.transformed = np.asarray(transformed, dtype=int)
        width = int(layout.slots.max()) + 1 if layout.dim else 1
        self.width = width
        n_out = n_raw_params(bins)
        self.positions = positions
        self.w_in = Parameter(_init(rng, 2 * width, (2 * width, cfg.model_dim)))
        self.b_in = Parameter(np.zeros(cfg.model_dim))
        self.blocks = [GAU(cfg, rng) for _ in range(cfg.n_layers)]
        self.g_out = Parameter(np.ones(1))
        # zero head: every coupling starts as the identity map
        self.w_head = Parameter(np.zeros((cfg.model_dim, width * n_out)))
        self.b_head = Parameter(np.zeros(width * n_out))
        self._n_out = n_out

    def named_parameters(self, prefix: str = ""):
        # the shared position table is owned by the flow, not by each conditioner
        return [(n, p) for n, p in super().named_parameters(prefix)
                if not n.startswith(prefix + "positions.")]

    def __call__(self, x, mask: np.ndarray, rng=None) -> Tensor:
        x = ad.as_tensor(x)
        B = x.shape[0]
        T = self.layout.n_tokens
        tok = tokenize(x, mask, self.layout) @ self.w_in + self.b_in
        tok = tok + self.positions(T)
        for block in self.blocks:
            tok = block(tok, rng)
        h = scale_norm(tok, self.g_out)
        out = (h @ self.w_head + self.b_head).reshape((B, T * self.width, self._n_out))
        rows = self.layout.residues[self.transformed] * self.width + self.layout.slots[self.transformed]
        return ad.take(out, rows, axis=1)
