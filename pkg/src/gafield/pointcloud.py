"""Point-set container, grid pooling with fine-to-coarse index maps, neighbourhoods."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class PointCloud:
    """Per-point arrays sharing one point count.

    ``targets`` holds supervision fields by name (``cp``, ``pressure``,
    ``wss``, ``velocity``); ``channels`` holds other per-point inputs such as
    ``is_surface`` or ``sdf``. ``meta`` carries sample-level values (flow
    condition, category) and never per-point data.
    """

    positions: np.ndarray
    features: np.ndarray | None = None
    normals: np.ndarray | None = None
    areas: np.ndarray | None = None
    parts: np.ndarray | None = None
    targets: dict[str, np.ndarray] = field(default_factory=dict)
    channels: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {self.positions.shape}")
        n = len(self.positions)

        def check(name, arr, width=None):
            if arr is None:
                return None
            arr = np.asarray(arr)
            if len(arr) != n:
                raise ValueError(f"{name} has {len(arr)} rows, expected {n}")
            if width is not None and (arr.ndim != 2 or arr.shape[1] != width):
                raise ValueError(f"{name} must be (N, {width}), got {arr.shape}")
            return arr

        if self.features is not None:
            self.features = check("features", np.asarray(self.features, dtype=float))
            if self.features.ndim != 2:
                raise ValueError("features must be 2-D")
        self.normals = check("normals", None if self.normals is None else np.asarray(self.normals, float), 3)
        if self.normals is not None and n:
            err = np.abs(np.linalg.norm(self.normals, axis=1) - 1.0).max()
            if err > 1e-6:
                raise ValueError(f"normals must be unit length (max deviation {err:.2e})")
        if self.areas is not None:
            self.areas = check("areas", np.asarray(self.areas, dtype=float).reshape(-1))
            if n and self.areas.min() <= 0:
                raise ValueError("areas must be strictly positive")
        if self.parts is not None:
            self.parts = check("parts", np.asarray(self.parts).reshape(-1).astype(np.int64))
        for name, arr in list(self.targets.items()):
            arr = np.asarray(arr, dtype=float)
            self.targets[name] = check(f"target {name}", arr.reshape(n, -1) if arr.ndim == 1 else arr)
        for name, arr in list(self.channels.items()):
            self.channels[name] = check(f"channel {name}", np.asarray(arr))

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, idx) -> PointCloud:
        """Rows ``idx`` of every per-point array; ``meta`` is shared."""
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return PointCloud(
            positions=self.positions[idx],
            features=pick(self.features),
            normals=pick(self.normals),
            areas=pick(self.areas),
            parts=pick(self.parts),
            targets={k: v[idx] for k, v in self.targets.items()},
            channels={k: v[idx] for k, v in self.channels.items()},
            meta=dict(self.meta),
        )

    def with_features(self, features) -> PointCloud:
        return replace(self, features=np.asarray(features, dtype=float), targets=dict(self.targets),
                       channels=dict(self.channels), meta=dict(self.meta))


@dataclass
class PoolResult:
    """Outcome of one grid pooling.

    ``index`` is the map from fine point to coarse cluster. ``order`` is a
    canonical ordering of the fine points (by cell key, then coordinates) that
    does not depend on input order; all segment reductions iterate in it.
    """

    coarse: PointCloud
    index: np.ndarray
    grid_size: float
    origin: np.ndarray
    keys: np.ndarray
    order: np.ndarray
    counts: np.ndarray

    @property
    def n_fine(self) -> int:
        return len(self.index)

    @property
    def n_coarse(self) -> int:
        return len(self.counts)


def cell_keys(positions: np.ndarray, grid_size: float, origin: np.ndarray) -> np.ndarray:
    return np.floor((positions - origin) / grid_size).astype(np.int64)


def canonical_order(positions: np.ndarray, keys: np.ndarray | None = None) -> np.ndarray:
    cols = [positions[:, 2], positions[:, 1], positions[:, 0]]
    if keys is not None:
        cols += [keys[:, 2], keys[:, 1], keys[:, 0]]
    return np.lexsort(cols)


def grid_pool(pc: PointCloud, grid_size: float, reduce: str = "mean",
              origin: np.ndarray | None = None) -> PoolResult:
    """Bucket points into cubic cells of side ``grid_size``; one coarse point per occupied cell.

    The grid origin defaults to the axis-wise minimum of the cloud. Coarse
    positions are member centroids; features (if any) are reduced by
    ``reduce`` in {"mean", "max"}. Coarse points are numbered by sorted cell key.
    """
    if not grid_size > 0:
        raise ValueError(f"grid size must be positive, got {grid_size}")
    if len(pc) == 0:
        raise ValueError("cannot pool an empty cloud")
    if reduce not in ("mean", "max"):
        raise ValueError(f"unknown reduction {reduce!r}")
    origin = pc.positions.min(axis=0) if origin is None else np.asarray(origin, dtype=float)
    keys = cell_keys(pc.positions, grid_size, origin)
    uniq, index = np.unique(keys, axis=0, return_inverse=True)
    index = index.reshape(-1).astype(np.int64)
    order = canonical_order(pc.positions, keys)
    counts = np.bincount(index, minlength=len(uniq))

    centroids = _segment_mean(pc.positions, index, order, counts)
    feats = None
    if pc.features is not None:
        if reduce == "mean":
            feats = _segment_mean(pc.features, index, order, counts)
        else:
            feats = np.full((len(uniq), pc.features.shape[1]), -np.inf)
            np.maximum.at(feats, index, pc.features)
    coarse = PointCloud(positions=centroids, features=feats)
    return PoolResult(coarse=coarse, index=index, grid_size=float(grid_size), origin=origin,
                      keys=uniq, order=order, counts=counts)


def _segment_mean(values, index, order, counts):
    out = np.zeros((len(counts),) + values.shape[1:])
    np.add.at(out, index[order], values[order])
    return out / counts.reshape((-1,) + (1,) * (values.ndim - 1))


def pool_tensor(features: Tensor, pr: PoolResult, reduce: str = "mean") -> Tensor:
    """Differentiable feature reduction over the clusters of ``pr``."""
    if reduce == "max":
        return T.segment_max(features, pr.index, pr.n_coarse)
    if reduce != "mean":
        raise ValueError(f"unknown reduction {reduce!r}")
    ordered = T.gather(features, pr.order)
    summed = T.scatter_add(ordered, pr.index[pr.order], pr.n_coarse)
    return summed / Tensor(pr.counts.reshape(-1, 1).astype(features.dtype))


def unpool(values, index):
    """out[i] = values[index[i]]; works on numpy arrays and Tensors."""
    index = np.asarray(index)
    if isinstance(values, Tensor):
        return T.gather(values, index)
    values = np.asarray(values)
    if index.size and (index.min() < 0 or index.max() >= len(values)):
        raise IndexError("unpool: index out of range")
    return values[index]


def cluster_neighborhood(pr: PoolResult, i: int) -> np.ndarray:
    """All fine indices sharing point ``i``'s cluster, including ``i``."""
    if not 0 <= i < pr.n_fine:
        raise IndexError(f"fine index {i} out of range")
    return np.flatnonzero(pr.index == pr.index[i])


def cluster_pairs(pr: PoolResult) -> tuple[np.ndarray, np.ndarray]:
    """(query, key) index pairs for every ordered pair within each cluster.

    Pairs are grouped by cluster, then query, then key, each in canonical order,
    so per-query reductions over keys are independent of input order.
    """
    members = pr.order[np.argsort(pr.index[pr.order], kind="stable")]
    counts = pr.counts
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    sq = counts * counts
    cluster = np.repeat(np.arange(len(counts)), sq)
    t = np.arange(int(sq.sum())) - np.repeat(np.cumsum(sq) - sq, sq)
    m, s = counts[cluster], starts[cluster]
    return members[s + t // m], members[s + t % m]


def knn(queries: np.ndarray, refs: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
    """Indices of the ``k`` nearest refs per query (Euclidean), ties to the lower index."""
    queries, refs = np.atleast_2d(queries), np.atleast_2d(refs)
    if k <= 0:
        raise ValueError("k must be positive")
    if k > len(refs):
        raise ValueError(f"k={k} exceeds reference count {len(refs)}")
    out = np.empty((len(queries), k), dtype=np.int64)
    for lo in range(0, len(queries), chunk):
        q = queries[lo:lo + chunk]
        d = ((q[:, None, :] - refs[None, :, :]) ** 2).sum(axis=2)
        out[lo:lo + chunk] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out
