"""The GA-Field network: grid-pooled U-Net of attention blocks with geometry injection
and a coarse-to-fine output head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .blocks import AttentionBlock, GeometryEncoder, build_condition
from .nn import Linear, Module, parameter_count
from .pointcloud import PointCloud, PoolResult, canonical_order, cluster_pairs, grid_pool, pool_tensor
from .tensor import Tensor

TASK_OUT_DIM = {"pressure": 1, "wss": 3, "velocity": 3}


@dataclass
class ModelConfig:
    in_dim: int = 7
    grid_sizes: list[float] = field(default_factory=lambda: [0.06, 0.12, 0.24, 0.48, 0.96])
    channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128, 256])
    blocks_per_stage: int = 2
    group_size: int = 8
    token_grid: float = 0.3
    embed_dim: int = 64
    cond_dim: int = 1
    out_dim: int = 1
    activation: str = "silu"
    pool_reduce: str = "max"
    block_norm: bool = False
    pos_enc: bool = True
    center_coords: bool = True
    film: bool = True
    film_decoder: bool = True
    film_zero_init: bool = True
    zero_heads: bool = False
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.grid_sizes = [float(s) for s in self.grid_sizes]
        self.channels = [int(c) for c in self.channels]
        if not self.grid_sizes:
            raise ValueError("at least one stage is required")
        if any(s <= 0 for s in self.grid_sizes) or any(b <= a for a, b in zip(self.grid_sizes, self.grid_sizes[1:])):
            raise ValueError(f"grid sizes must be positive and strictly increasing: {self.grid_sizes}")
        if len(self.channels) != len(self.grid_sizes):
            raise ValueError("channels must have one entry per stage")
        if self.group_size < 1 or any(c % self.group_size for c in self.channels):
            raise ValueError(f"every stage width must be divisible by group_size={self.group_size}")
        if self.in_dim < 3:
            raise ValueError("in_dim must include the 3 coordinate channels")
        if self.blocks_per_stage < 0 or self.embed_dim < 1 or self.out_dim < 1 or self.cond_dim < 0:
            raise ValueError("invalid block count or widths")
        if self.token_grid <= 0:
            raise ValueError("token_grid must be positive")
        if self.activation not in T.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.pool_reduce not in ("mean", "max"):
            raise ValueError(f"unknown pool_reduce {self.pool_reduce!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unknown dtype {self.dtype!r}")

    @property
    def n_stages(self) -> int:
        return len(self.grid_sizes)

    def level_width(self, level: int) -> int:
        return self.channels[max(level - 1, 0)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FieldPrediction:
    coarse: Tensor
    upsampled: Tensor
    residual: Tensor
    final: Tensor
    index: np.ndarray
    pools: list[PoolResult]


@dataclass
class Hierarchy:
    """Pooling structure shared by every forward pass over the same positions."""

    origin: np.ndarray
    positions: list[np.ndarray]
    pools: list[PoolResult]
    pairs: list[tuple[np.ndarray, np.ndarray]]


def build_hierarchy(positions: np.ndarray, grid_sizes: list[float]) -> Hierarchy:
    # one origin for all levels keeps coarser cells unions of finer ones
    origin = positions.min(axis=0)
    levels, pools = [positions], []
    for s in grid_sizes:
        pr = grid_pool(PointCloud(levels[-1]), s, origin=origin)
        pools.append(pr)
        levels.append(pr.coarse.positions)
    top = grid_pool(PointCloud(levels[-1]), 2.0 * grid_sizes[-1], origin=origin)
    pairs = [cluster_pairs(pr) for pr in pools] + [cluster_pairs(top)]
    return Hierarchy(origin, levels, pools, pairs)


class GAField(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = cfg = config
        rng = np.random.default_rng(cfg.seed)
        dt = np.dtype(cfg.dtype)
        self.act = T.ACTIVATIONS[cfg.activation]
        cond = cfg.embed_dim + cfg.cond_dim
        S = cfg.n_stages

        def blocks(width, film):
            return [AttentionBlock(width, width // cfg.group_size, cond, rng, cfg.pos_enc, cfg.activation,
                                   film=cfg.film and film, film_zero_init=cfg.film_zero_init, dtype=dt,
                                   norm=cfg.block_norm)
                    for _ in range(cfg.blocks_per_stage)]

        self.geometry = GeometryEncoder(cfg.in_dim, cfg.embed_dim, cfg.token_grid, rng, cfg.activation, dt)
        self.embed = Linear(cfg.in_dim, cfg.level_width(0), rng, dtype=dt)
        self.down = [Linear(cfg.level_width(k), cfg.channels[k], rng, dtype=dt) for k in range(S)]
        self.enc = [_Stage(blocks(cfg.channels[k], True)) for k in range(S)]
        # decoder entry k fuses level k+1 back into level k
        self.fuse = [Linear(cfg.level_width(k + 1) + cfg.level_width(k), cfg.level_width(k), rng, dtype=dt)
                     for k in range(S)]
        self.dec = [_Stage(blocks(cfg.level_width(k), cfg.film_decoder)) for k in range(S)]
        self.head_coarse = Linear(cfg.level_width(1), cfg.out_dim, rng, zero=cfg.zero_heads, dtype=dt)
        self.head_refine = Linear(cfg.level_width(0), cfg.out_dim, rng, zero=cfg.zero_heads, dtype=dt)

    def input_features(self, pc: PointCloud) -> np.ndarray:
        if pc.features is None:
            raise ValueError("point cloud has no features")
        if pc.features.shape[1] != self.config.in_dim:
            raise ValueError(f"feature width {pc.features.shape[1]} != configured {self.config.in_dim}")
        feats = pc.features.astype(self.config.dtype, copy=True)
        if self.config.center_coords:
            order = canonical_order(pc.positions)
            feats[:, :3] -= pc.positions[order].sum(axis=0) / len(pc)
        return feats

    def condition(self, feats: Tensor, positions: np.ndarray, flow_condition, origin=None) -> Tensor:
        g = self.geometry(feats, positions, origin)
        c = np.zeros(0) if flow_condition is None else np.asarray(flow_condition, dtype=feats.dtype).reshape(-1)
        if c.size != self.config.cond_dim:
            raise ValueError(f"flow condition width {c.size} != configured {self.config.cond_dim}")
        return build_condition(g, c)

    def __call__(self, pc: PointCloud, flow_condition=None, ablate_injection: bool = False,
                 hierarchy: Hierarchy | None = None) -> FieldPrediction:
        return self.forward(pc, flow_condition, ablate_injection, hierarchy)

    def forward(self, pc: PointCloud, flow_condition=None, ablate_injection: bool = False,
                hierarchy: Hierarchy | None = None) -> FieldPrediction:
        if len(pc) == 0:
            raise ValueError("cannot run on an empty cloud")
        cfg = self.config
        S = cfg.n_stages
        feats = Tensor(self.input_features(pc))
        h = hierarchy or build_hierarchy(pc.positions, cfg.grid_sizes)
        cond = None
        if cfg.film and not ablate_injection:
            cond = self.condition(feats, pc.positions, flow_condition, h.origin)

        x = self.act(self.embed(feats))
        skips = [x]
        for k in range(S):
            x = pool_tensor(self.act(self.down[k](x)), h.pools[k], cfg.pool_reduce)
            x = self.enc[k](x, h.positions[k + 1], h.pairs[k + 1], cond)
            skips.append(x)

        level_feats = {S: x}
        for k in reversed(range(S)):
            up = T.gather(x, h.pools[k].index)
            x = self.act(self.fuse[k](T.concat([up, skips[k]], axis=1)))
            x = self.dec[k](x, h.positions[k], h.pairs[k], cond)
            level_feats[k] = x

        coarse = head_coarse(self, level_feats[1])
        upsampled = T.gather(coarse, h.pools[0].index)
        residual = head_refine(self, level_feats[0])
        return FieldPrediction(coarse, upsampled, residual, upsampled + residual, h.pools[0].index, h.pools)


class _Stage(Module):
    def __init__(self, blocks):
        super().__init__()
        self.blocks = blocks

    def __call__(self, x, positions, pairs, cond):
        for blk in self.blocks if self.blocks else ():
            x = blk(x, positions, pairs, cond)
        return x


def head_coarse(model: GAField, level1_feats: Tensor) -> Tensor:
    return model.head_coarse(level1_feats)


def head_refine(model: GAField, level0_feats: Tensor) -> Tensor:
    return model.head_refine(level0_feats)


def forward(model: GAField, pc: PointCloud, flow_condition=None, **kw) -> FieldPrediction:
    return model.forward(pc, flow_condition, **kw)


__all__ = [
    "TASK_OUT_DIM",
    "FieldPrediction",
    "GAField",
    "Hierarchy",
    "ModelConfig",
    "build_hierarchy",
    "forward",
    "head_coarse",
    "head_refine",
    "parameter_count",
]
