"""Perception encoder: raster patches -> temporal cross-attention -> self-attention
stack -> learned scene query, plus additive navigation and speed embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .nn import MLP, Linear, MlpSpec, Module, MultiHeadAttention, attention, uniform_init


@dataclass(frozen=True)
class EncoderConfig:
    raster_size: int = 32
    channels: int = 3
    patch: int = 8
    width: int = 64
    heads: int = 8
    blocks: int = 4
    mlp_ratio: int = 2
    obs_dim: int = 64
    nav_hidden: int = 64
    positional: bool = True

    @property
    def n_tokens(self) -> int:
        return (self.raster_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


def patchify(raster: np.ndarray, patch: int) -> np.ndarray:
    """(..., S, S, C) -> (..., N, patch*patch*C), patches in row-major order."""
    *lead, s, _, c = raster.shape
    g = s // patch
    x = raster.reshape(*lead, g, patch, g, patch, c)
    nl = len(lead)
    order = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3, nl + 4]
    return np.ascontiguousarray(x.transpose(order)).reshape(*lead, g * g, patch * patch * c)


class AttentionBlock(Module):
    """Pre-layer-norm self-attention and MLP, both residual."""

    def __init__(self, name: str, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.width
        self.ln1_gain = Parameter(f"{name}.ln1.gain", np.ones(d, dtype=np.float32))
        self.ln1_bias = Parameter(f"{name}.ln1.bias", np.zeros(d, dtype=np.float32))
        self.attn = MultiHeadAttention(f"{name}.attn", d, cfg.heads, rng)
        self.ln2_gain = Parameter(f"{name}.ln2.gain", np.ones(d, dtype=np.float32))
        self.ln2_bias = Parameter(f"{name}.ln2.bias", np.zeros(d, dtype=np.float32))
        self.mlp = MLP(f"{name}.mlp", MlpSpec((d, d * cfg.mlp_ratio, d), ("relu", "none")), rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.layer_norm(x, self.ln1_gain, self.ln1_bias)
        x = ad.add(x, self.attn(h, h))
        h = ad.layer_norm(x, self.ln2_gain, self.ln2_bias)
        return ad.add(x, self.mlp(h))


class PerceptionEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, name: str = "encoder"):
        if cfg.raster_size % cfg.patch:
            raise ValueError("raster size must be a multiple of the patch size")
        if cfg.width % cfg.heads:
            raise ValueError(f"width {cfg.width} not divisible by {cfg.heads} heads")
        self.cfg = cfg
        d = cfg.width
        self.patch_embed = Linear(f"{name}.patch_embed", cfg.patch_dim, d, rng)
        self.pos_embed = Parameter(f"{name}.pos_embed",
                                   0.02 * rng.standard_normal((cfg.n_tokens, d)).astype(np.float32))
        self.motion_mlp = MLP(f"{name}.motion_mlp", MlpSpec((3, 32, d), ("relu", "none")), rng)
        self.temporal = MultiHeadAttention(f"{name}.temporal", d, cfg.heads, rng)
        self.blocks = [AttentionBlock(f"{name}.block{i}", cfg, rng) for i in range(cfg.blocks)]
        self.scene_query = Parameter(f"{name}.scene_query", uniform_init(rng, d, (d,)))
        self.pool = MultiHeadAttention(f"{name}.pool", d, cfg.heads, rng)
        self.project = Linear(f"{name}.project", d, cfg.obs_dim, rng)
        n_nav = cfg.raster_size * cfg.raster_size
        self.nav_mlp = MLP(f"{name}.nav_mlp",
                           MlpSpec((n_nav, cfg.nav_hidden, cfg.obs_dim), ("relu", "none")), rng)
        self.speed_mlp = MLP(f"{name}.speed_mlp", MlpSpec((1, 16, cfg.obs_dim), ("relu", "none")), rng)

    # -- stages -------------------------------------------------------------

    def patch_embed_tokens(self, raster: np.ndarray) -> Tensor:
        """F_t: (..., S, S, C) -> (..., N, D)."""
        cfg = self.cfg
        raster = np.asarray(raster, dtype=np.float32)
        if raster.shape[-3:] != (cfg.raster_size, cfg.raster_size, cfg.channels):
            raise ad.ShapeError(
                f"patch_embed: raster shape {raster.shape} does not end in "
                f"{(cfg.raster_size, cfg.raster_size, cfg.channels)}"
            )
        tokens = self.patch_embed(Tensor(patchify(raster, cfg.patch)))
        if cfg.positional:
            lead = tokens.shape[:-2]
            flat = ad.reshape(tokens, (-1, cfg.n_tokens, cfg.width))
            pos = ad.repeat(self.pos_embed, flat.shape[0], 0)
            tokens = ad.reshape(ad.add(flat, pos), lead + (cfg.n_tokens, cfg.width))
        return tokens

    def temporal_cross_attention(self, f_t: Tensor, f_prev: Tensor, motion) -> Tensor:
        """M_t = F_t + attn(F_t, F_{t-1} + motion embedding); tokens (B, N, D)."""
        if f_t.shape != f_prev.shape:
            raise ad.ShapeError(f"temporal attention: {f_t.shape} vs {f_prev.shape}")
        motion = motion if isinstance(motion, Tensor) else Tensor(motion)
        m = ad.repeat(self.motion_mlp(motion), f_prev.shape[-2], -2)
        return ad.add(f_t, self.temporal(f_t, ad.add(f_prev, m)))

    def self_attention_stack(self, tokens: Tensor) -> Tensor:
        for block in self.blocks:
            tokens = block(tokens)
        return tokens

    def scene_query_pool(self, tokens: Tensor) -> Tensor:
        """(B, N, D) -> (B, D) by attending from the learned query."""
        if tokens.shape[-2] == 0:
            raise ValueError("scene_query_pool: empty token set")
        b = tokens.shape[0]
        q = ad.reshape(ad.repeat(self.scene_query, b, 0), (b, 1, self.cfg.width))
        return ad.reshape(attention(q, tokens, self.pool), (b, self.cfg.width))

    def embed_context(self, nav: np.ndarray, speed: np.ndarray) -> Tensor:
        nav = np.asarray(nav, dtype=np.float32)
        n = nav.shape[0]
        nav_e = self.nav_mlp(Tensor(nav.reshape(n, -1)))
        speed_e = self.speed_mlp(Tensor(np.asarray(speed, dtype=np.float32).reshape(n, 1) / 10.0))
        return ad.add(nav_e, speed_e)

    # -- full passes --------------------------------------------------------

    def encode_tokens(self, f_t: Tensor, f_prev: Tensor, nav, speed, motion) -> Tensor:
        m = self.temporal_cross_attention(f_t, f_prev, motion)
        s = self.self_attention_stack(m)
        pooled = self.project(self.scene_query_pool(s))
        return ad.add(pooled, self.embed_context(nav, speed))

    def encode(self, raster: np.ndarray, prev_raster: np.ndarray, nav: np.ndarray,
               speed: np.ndarray, motion: np.ndarray) -> Tensor:
        """Batch of single frames: rasters (B, S, S, C) -> o_t (B, D_o)."""
        f_t = self.patch_embed_tokens(raster)
        f_prev = self.patch_embed_tokens(prev_raster)
        return self.encode_tokens(f_t, f_prev, nav, speed, np.asarray(motion, dtype=np.float32))

    def encode_sequence(self, raster: np.ndarray, nav: np.ndarray, speed: np.ndarray,
                        motion: np.ndarray) -> Tensor:
        """Episodes (B, T, ...) -> (B, T, D_o).

        Frame 0 is its own previous frame with zero motion, as at deployment start.
        """
        b, t = raster.shape[:2]
        motion = np.array(motion, dtype=np.float32)
        motion[:, 0] = 0.0
        cfg = self.cfg
        tokens = self.patch_embed_tokens(raster)  # (B, T, N, D)
        prev = ad.concat([tokens[:, :1], tokens[:, :-1]], axis=1) if t > 1 else tokens
        shape = (b * t, cfg.n_tokens, cfg.width)
        o = self.encode_tokens(
            ad.reshape(tokens, shape), ad.reshape(prev, shape),
            np.asarray(nav).reshape(b * t, -1), np.asarray(speed).reshape(b * t),
            motion.reshape(b * t, 3),
        )
        return ad.reshape(o, (b, t, cfg.obs_dim))
