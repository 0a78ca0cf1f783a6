"""QKV attention, learned-latent cross-attention, Fourier features and pyramid chunking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import FeedForward, LayerNorm, Linear, Module
from .tensor import ShapeError, Tensor, parameter


@dataclass(frozen=True)
class AttentionConfig:
    cross_heads: int = 1
    cross_dim_per_head: int = 64
    latent_heads: int = 8
    latent_dim_per_head: int = 32
    depth: int = 1
    ff_mult: int = 2

    def __post_init__(self):
        for name in ("cross_heads", "cross_dim_per_head", "latent_heads", "latent_dim_per_head", "ff_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")


@dataclass(frozen=True)
class FourierEncoding:
    max_frequency: float
    num_bands: int = 6
    include_input: bool = True

    def __post_init__(self):
        if self.max_frequency <= 0:
            raise ValueError("max_frequency must be > 0")
        if self.num_bands < 1:
            raise ValueError("num_bands must be >= 1")

    @property
    def frequencies(self) -> np.ndarray:
        return np.geomspace(1.0, self.max_frequency / 2, self.num_bands)

    def out_dim(self, dims: int) -> int:
        return dims * 2 * self.num_bands + (dims if self.include_input else 0)


def fourier_encode(positions, enc: FourierEncoding) -> np.ndarray:
    """Features for normalised coordinates in [-1, 1], shape (..., dims).

    Per coordinate: sin(pi f_b p) for every band, then cos(pi f_b p) for every
    band; the raw coordinates are appended when `include_input` is set.
    """
    p = np.asarray(positions, dtype=np.float64)
    if p.ndim == 0:
        p = p[None]
    if np.any(np.abs(p) > 1):
        raise ValueError("positions must lie in [-1, 1]")
    angles = np.pi * p[..., :, None] * enc.frequencies
    feats = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    feats = feats.reshape(*p.shape[:-1], -1)
    if enc.include_input:
        feats = np.concatenate([feats, p], axis=-1)
    return feats


def grid_positions(h: int, w: int) -> np.ndarray:
    """Pixel-centre coordinates of an h x w image normalised to [-1, 1], shape (h, w, 2) as (row, col)."""
    rows = (np.arange(h) + 0.5) / h * 2 - 1
    cols = (np.arange(w) + 0.5) / w * 2 - 1
    return np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, m, width = x.shape
    if width % heads:
        raise ShapeError(f"width {width} is not divisible by {heads} heads")
    x = T.reshape(x, (*lead, m, heads, width // heads))
    n = len(lead)
    return T.permute(x, (*range(n), n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, m, d = x.shape
    n = len(lead)
    x = T.permute(x, (*range(n), n + 1, n, n + 2))
    return T.reshape(x, (*lead, m, h * d))


def qkv_attention(q, k, v, heads: int = 1, w_out=None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V per head, heads concatenated, then optionally projected.

    q: (..., M_q, heads*d_k), k: (..., M_k, heads*d_k), v: (..., M_k, heads*d_v).
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    out = _merge_heads(T.attention(_split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)))
    return T.matmul(out, w_out, tag="attn.out") if w_out is not None else out


class MultiHeadAttention(Module):
    """Learned per-head projections; queries from `x`, keys and values from `context`."""

    def __init__(self, q_dim: int, kv_dim: int, heads: int, dim_head: int, rng):
        inner = heads * dim_head
        self.heads = heads
        self.to_q = Linear(q_dim, inner, rng, bias=False)
        self.to_k = Linear(kv_dim, inner, rng, bias=False)
        self.to_v = Linear(kv_dim, inner, rng, bias=False)
        self.to_out = Linear(inner, q_dim, rng)

    def forward(self, x, context=None):
        context = x if context is None else context
        q = self.to_q(x, tag="attn.q")
        k = self.to_k(context, tag="attn.k")
        v = self.to_v(context, tag="attn.v")
        return self.to_out(qkv_attention(q, k, v, self.heads), tag="attn.out")


class LatentBlock(Module):
    def __init__(self, dim: int, cfg: AttentionConfig, rng):
        self.norm_attn = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, dim, cfg.latent_heads, cfg.latent_dim_per_head, rng)
        self.norm_ff = LayerNorm(dim)
        self.ff = FeedForward(dim, cfg.ff_mult, rng)

    def forward(self, x):
        x = x + self.attn(self.norm_attn(x))
        return x + self.ff(self.norm_ff(x))


class PerceiverBlock(Module):
    """Learned latents cross-attend to M input tokens, then `depth` latent self-attention blocks.

    Pre-norm residual layout. With depth 0 the output is
    latents + cross_attn(norm(latents), norm(inputs)).
    """

    def __init__(self, input_dim: int, latent_count: int, latent_dim: int, cfg: AttentionConfig, rng):
        if latent_count < 1:
            raise ValueError("latent_count must be >= 1")
        self.latents = parameter(rng.standard_normal((latent_count, latent_dim)) * 0.02)
        self.norm_latents = LayerNorm(latent_dim)
        self.norm_inputs = LayerNorm(input_dim)
        self.cross = MultiHeadAttention(latent_dim, input_dim, cfg.cross_heads, cfg.cross_dim_per_head, rng)
        self.blocks = [LatentBlock(latent_dim, cfg, rng) for _ in range(cfg.depth)]
        self.input_dim = input_dim

    def forward(self, inputs):
        inputs = T.as_tensor(inputs)
        squeeze = inputs.ndim == 2
        if squeeze:
            inputs = T.reshape(inputs, (1, *inputs.shape))
        if inputs.shape[-1] != self.input_dim:
            raise ShapeError(f"expected {self.input_dim}-wide input tokens, got {inputs.shape}")
        x = self.latents + Tensor(np.zeros((inputs.shape[0], 1, 1)))
        x = x + self.cross(self.norm_latents(x), self.norm_inputs(inputs))
        for block in self.blocks:
            x = block(x)
        return T.reshape(x, x.shape[1:]) if squeeze else x


def perceiver_block(latents: PerceiverBlock, inputs) -> Tensor:
    return latents(inputs)


# --- feature pyramid and chunking -----------------------------------------------------------

PYRAMID_LEVELS = tuple(range(5))
REFERENCE_INPUT = (128, 512)


def level_shape(j: int, input_hw=REFERENCE_INPUT) -> tuple[int, int] | None:
    """(rows, cols) of pyramid level j: 2^(j+1) x 2^(j+3) at 128x512, scaled with the input.

    None when the scaled shape is not integral.
    """
    h, w = input_hw
    rows, cols = 2 ** (j + 1) * h, 2 ** (j + 3) * w
    rh, rw = REFERENCE_INPUT
    if rows % rh or cols % rw:
        return None
    return rows // rh, cols // rw


@dataclass
class FeaturePyramid:
    """Levels j -> tensor of shape (B, channels, rows_j, cols_j)."""

    levels: dict[int, Tensor]

    def __post_init__(self):
        chans = {t.shape[1] for t in self.levels.values()}
        if len(chans) != 1:
            raise ShapeError(f"pyramid levels have differing channel counts {sorted(chans)}")

    @property
    def channels(self) -> int:
        return next(iter(self.levels.values())).shape[1]

    def shape(self, j: int) -> tuple[int, int, int]:
        """(rows, cols, channels) of level j."""
        t = self.levels[j]
        return t.shape[2], t.shape[3], t.shape[1]


def legal_chunk_counts(pyramid: FeaturePyramid) -> list[int]:
    widths = [t.shape[3] for t in pyramid.levels.values()]
    return [c for c in range(1, min(widths) + 1) if all(w % c == 0 for w in widths)]


def chunk_features(pyramid: FeaturePyramid, chunks: int) -> list[dict[int, Tensor]]:
    """Split every level column-wise into `chunks` equal slices.

    Chunk i of level j holds columns [i/C * W_j, (i+1)/C * W_j) and all rows.
    """
    if chunks < 1:
        raise ValueError("chunk count must be >= 1")
    for j, t in pyramid.levels.items():
        if t.shape[3] % chunks:
            raise ShapeError(f"{chunks} chunks do not divide level {j} width {t.shape[3]}")
    out = []
    for i in range(chunks):
        part = {}
        for j, t in pyramid.levels.items():
            w = t.shape[3]
            lo, hi = i * w // chunks, (i + 1) * w // chunks
            part[j] = T.getitem(t, (slice(None), slice(None), slice(None), slice(lo, hi)))
        out.append(part)
    return out


# --- complexity accounting ---------------------------------------------------------------------

def cross_attention_score_macs(n: int, m: int, d: int, heads: int = 1) -> int:
    return heads * n * m * d


def self_attention_score_macs(m: int, d: int, heads: int = 1) -> int:
    return heads * m * m * d


def measure_attention_macs(m: int, n: int, d: int, seed: int = 0) -> dict[str, int]:
    """Run one latent cross-attention (N queries over M tokens) and one self-attention over the
    M tokens, single head of width d, and return the recorded MAC counts."""
    rng = np.random.default_rng(seed)
    tokens = Tensor(rng.standard_normal((1, m, d)))
    latents = Tensor(rng.standard_normal((1, n, d)))
    cross = MultiHeadAttention(d, d, 1, d, rng)
    self_attn = MultiHeadAttention(d, d, 1, d, rng)
    with T.no_grad():
        with T.FlopLedger() as lc:
            cross(latents, tokens)
        with T.FlopLedger() as ls:
            self_attn(tokens)
    return {
        "cross_scores": lc["attn.scores"],
        "cross_total": lc.total,
        "self_scores": ls["attn.scores"],
        "self_total": ls.total,
    }


def quadratic_coefficient(ms, macs) -> float:
    """Leading coefficient of a least-squares quadratic fit, scaled by max(M)^2 / max(macs)."""
    ms = np.asarray(ms, dtype=np.float64)
    macs = np.asarray(macs, dtype=np.float64)
    a = np.polyfit(ms, macs, 2)[0]
    return float(a * ms.max() ** 2 / np.abs(macs).max())
