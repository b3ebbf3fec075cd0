"""Learned blocks: grouped vector attention, geometry encoder, FiLM adapter."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Linear, Module
from .pointcloud import PointCloud, grid_pool, pool_tensor
from .tensor import Tensor


class GroupedVectorAttention(Module):
    """Vector attention with one shared weight per channel group.

    Relation is q_i - k_j (plus an optional positional term); a two-layer
    weight encoder maps it to ``groups`` logits, which are normalised over
    each query's neighbourhood independently per group.
    """

    def __init__(self, channels: int, groups: int, rng: np.random.Generator, pos_enc: bool = True,
                 activation: str = "silu", dtype=np.float64):
        super().__init__()
        if not 1 <= groups <= channels or channels % groups:
            raise ValueError(f"groups={groups} must divide channels={channels}")
        self.channels, self.groups = channels, groups
        self.q = Linear(channels, channels, rng, dtype=dtype)
        self.k = Linear(channels, channels, rng, dtype=dtype)
        self.v = Linear(channels, channels, rng, dtype=dtype)
        self.weight_enc = MLP(channels, groups, groups, rng, activation, dtype=dtype)
        self.pos_enc = MLP(3, channels, channels, rng, activation, dtype=dtype) if pos_enc else None

    def __call__(self, feats: Tensor, positions: np.ndarray, pairs: tuple[np.ndarray, np.ndarray],
                 return_weights: bool = False):
        qi, kj = pairs
        n, c, g = feats.shape[0], self.channels, self.groups
        if feats.shape[1] != c:
            raise ValueError(f"attention expects width {c}, got {feats.shape[1]}")
        if len(qi) and (max(qi.max(), kj.max()) >= n or min(qi.min(), kj.min()) < 0):
            raise IndexError("neighbourhood index out of range")
        q, k, v = self.q(feats), self.k(feats), self.v(feats)
        rel = T.gather(q, qi) - T.gather(k, kj)
        val = T.gather(v, kj)
        if self.pos_enc is not None:
            pe = self.pos_enc(Tensor((positions[qi] - positions[kj]).astype(feats.dtype)))
            rel = rel + pe
            val = val + pe
        weights = T.segment_softmax(self.weight_enc(rel), qi, n)
        p = len(qi)
        mixed = (val.reshape(p, g, c // g) * weights.reshape(p, g, 1)).reshape(p, c)
        out = T.scatter_add(mixed, qi, n)
        return (out, weights) if return_weights else out


class FilmAdapter(Module):
    """Feature-wise scale/shift predicted from the extended condition.

    delta = W_out((1 + r) * W_in(f) + s) with (s, r) = MLP(condition); the
    caller adds delta back onto f. The MLP's last layer and W_out start at
    zero so a fresh adapter is the identity.
    """

    def __init__(self, channels: int, cond_dim: int, rng: np.random.Generator, hidden: int | None = None,
                 activation: str = "silu", zero_init: bool = True, dtype=np.float64):
        super().__init__()
        self.hidden = hidden or channels
        self.cond_dim = cond_dim
        self.mlp = MLP(cond_dim, max(cond_dim, self.hidden), 2 * self.hidden, rng, activation,
                       zero_last=zero_init, dtype=dtype)
        self.w_in = Linear(channels, self.hidden, rng, dtype=dtype)
        self.w_out = Linear(self.hidden, channels, rng, zero=zero_init, dtype=dtype)

    def scale_shift(self, condition: Tensor) -> tuple[Tensor, Tensor]:
        if condition.shape != (1, self.cond_dim):
            raise ValueError(f"condition must be (1, {self.cond_dim}), got {condition.shape}")
        sr = self.mlp(condition)
        return sr[:, : self.hidden], sr[:, self.hidden:]

    def delta(self, feats: Tensor, condition: Tensor) -> Tensor:
        shift, scale = self.scale_shift(condition)
        return self.w_out(self.w_in(feats) * (scale + 1.0) + shift)

    def __call__(self, feats: Tensor, condition: Tensor) -> Tensor:
        return feats + self.delta(feats, condition)


def film_modulate(adapter: FilmAdapter, feats: Tensor, condition: Tensor) -> Tensor:
    return adapter(feats, condition)


def build_condition(embedding, flow_condition=None) -> Tensor:
    """Extended condition [g ; c] as a (1, |g| + |c|) row."""
    g = T.as_tensor(embedding).reshape(1, -1)
    if flow_condition is None:
        return g
    c = T.as_tensor(flow_condition, dtype=g.dtype).reshape(1, -1)
    if c.shape[1] == 0:
        return g
    return T.concat([g, c], axis=1)


class AttentionBlock(Module):
    """Residual grouped attention, a residual point-wise MLP, then FiLM.

    With ``norm`` both residual branches see a layer-normalised input (pre-norm).
    """

    def __init__(self, channels: int, groups: int, cond_dim: int, rng: np.random.Generator,
                 pos_enc: bool = True, activation: str = "silu", film: bool = True,
                 film_zero_init: bool = True, dtype=np.float64, norm: bool = False):
        super().__init__()
        self.norm1 = LayerNorm(channels, dtype=dtype) if norm else None
        self.norm2 = LayerNorm(channels, dtype=dtype) if norm else None
        self.attn = GroupedVectorAttention(channels, groups, rng, pos_enc, activation, dtype)
        self.proj = Linear(channels, channels, rng, dtype=dtype)
        self.ffn = MLP(channels, channels, channels, rng, activation, dtype=dtype)
        self.film = FilmAdapter(channels, cond_dim, rng, activation=activation,
                                zero_init=film_zero_init, dtype=dtype) if film else None

    def __call__(self, feats: Tensor, positions: np.ndarray, pairs, condition: Tensor | None) -> Tensor:
        h = self.norm1(feats) if self.norm1 is not None else feats
        feats = feats + self.proj(self.attn(h, positions, pairs))
        h = self.norm2(feats) if self.norm2 is not None else feats
        feats = feats + self.ffn(h)
        if self.film is not None and condition is not None:
            feats = self.film(feats, condition)
        return feats


class GeometryEncoder(Module):
    """Pools the cloud into coarse tokens, runs full vector self-attention, mean-pools.

    attention_kj = softmax_j(w(q_k - k_j + p(pos_k - pos_j))) per channel, and
    token_k = sum_j attention_kj * (v_j + p(pos_k - pos_j)).
    """

    def __init__(self, in_dim: int, width: int, token_grid: float, rng: np.random.Generator,
                 activation: str = "silu", dtype=np.float64):
        super().__init__()
        self.width, self.token_grid = width, token_grid
        self.act = T.ACTIVATIONS[activation]
        self.token_proj = Linear(in_dim, width, rng, dtype=dtype)
        self.q = Linear(width, width, rng, dtype=dtype)
        self.k = Linear(width, width, rng, dtype=dtype)
        self.v = Linear(width, width, rng, dtype=dtype)
        self.weight_mlp = MLP(width, width, width, rng, activation, dtype=dtype)
        self.pos_mlp = MLP(3, width, width, rng, activation, dtype=dtype)

    def tokens(self, feats: Tensor, positions: np.ndarray, origin=None):
        pr = grid_pool(PointCloud(positions), self.token_grid, origin=origin)
        z = pool_tensor(self.act(self.token_proj(feats)), pr, "mean")
        return z, pr.coarse.positions

    def __call__(self, feats: Tensor, positions: np.ndarray, origin=None, return_weights: bool = False):
        z, pos = self.tokens(feats, positions, origin)
        n = z.shape[0]
        qi, kj = np.repeat(np.arange(n), n), np.tile(np.arange(n), n)
        pe = self.pos_mlp(Tensor((pos[qi] - pos[kj]).astype(feats.dtype)))
        q, k, v = self.q(z), self.k(z), self.v(z)
        logits = self.weight_mlp(T.gather(q, qi) - T.gather(k, kj) + pe)
        attn = T.segment_softmax(logits, qi, n)
        mixed = T.scatter_add(attn * (T.gather(v, kj) + pe), qi, n)
        g = T.mean(mixed, axis=0, keepdims=True)
        return (g, attn) if return_weights else g


def encode_geometry(encoder: GeometryEncoder, pc: PointCloud) -> Tensor:
    if len(pc) == 0:
        raise ValueError("cannot encode an empty cloud")
    feats = pc.features if pc.features is not None else pc.positions
    return encoder(Tensor(feats), pc.positions)
