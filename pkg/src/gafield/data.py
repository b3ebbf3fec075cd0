"""Feature construction, normalisation, sampling, splits and the synthetic analytic-flow corpus."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pointcloud import PointCloud

PRESSURE_MEAN = -94.5
PRESSURE_STD = 117.25
REFERENCE_SPEED = 30.0
TASKS = {"pressure": 1, "wss": 3, "velocity": 3}


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def _unit(v, tol=1e-9) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(3)
    if abs(np.linalg.norm(v) - 1.0) > tol:
        raise DataError(f"direction must be unit length, got norm {np.linalg.norm(v):.12g}")
    return v


@dataclass
class TaskSpec:
    task: str = "pressure"
    condition: list[float] = field(default_factory=lambda: [1.0])
    direction: list[float] = field(default_factory=lambda: [1.0, 0.0, 0.0])
    recipe: str = "surface"

    def __post_init__(self):
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}")
        if self.recipe not in ("surface", "volume", "volume_sdf"):
            raise DataError(f"unknown feature recipe {self.recipe!r}")
        self.direction = _unit(self.direction).tolist()
        self.condition = [float(c) for c in np.atleast_1d(self.condition)]

    @property
    def out_dim(self) -> int:
        return TASKS[self.task]


@dataclass
class Normalizer:
    mean: np.ndarray | float = PRESSURE_MEAN
    std: np.ndarray | float = PRESSURE_STD

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if np.any(self.std <= 0):
            raise DataError("normaliser std must be positive")

    def normalize(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.mean) / self.std

    def denormalize(self, values) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.std + self.mean

    @classmethod
    def fit(cls, values) -> Normalizer:
        values = np.asarray(values, dtype=float)
        values = values.reshape(len(values), -1)
        return cls(values.mean(axis=0), values.std(axis=0))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> Normalizer:
        return cls(d["mean"], d["std"])


def normalize_pressure(values, mean: float = PRESSURE_MEAN, std: float = PRESSURE_STD) -> np.ndarray:
    return Normalizer(mean, std).normalize(values)


def denormalize_pressure(values, mean: float = PRESSURE_MEAN, std: float = PRESSURE_STD) -> np.ndarray:
    return Normalizer(mean, std).denormalize(values)


# -- features ---------------------------------------------------------------------

def surface_features(pc: PointCloud, direction) -> np.ndarray:
    """[x, n, cos(theta)] with cos(theta) = n . d_inf."""
    if pc.normals is None:
        raise DataError("surface features need normals")
    d = _unit(direction)
    cos = pc.normals @ d
    return np.hstack([pc.positions, pc.normals, cos[:, None]])


def volume_features(pc: PointCloud, u_inf, is_surface, sdf=None) -> np.ndarray:
    """[x, v0] (+ sdf); v0 is 0 on the body surface and u_inf in the flow domain."""
    n = len(pc)
    flag = np.asarray(is_surface).reshape(-1).astype(bool)
    if len(flag) != n:
        raise DataError(f"is_surface has {len(flag)} entries, expected {n}")
    u = np.asarray(u_inf, dtype=float).reshape(3)
    v0 = np.where(flag[:, None], 0.0, u[None, :])
    cols = [pc.positions, v0]
    if sdf is not None:
        sdf = np.asarray(sdf, dtype=float).reshape(-1)
        if len(sdf) != n:
            raise DataError(f"sdf has {len(sdf)} entries, expected {n}")
        cols.append(sdf[:, None])
    return np.hstack(cols)


def wss_magnitude(tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    if tau.ndim != 2 or tau.shape[1] != 3:
        raise DataError(f"wall shear stress must be (N, 3), got {tau.shape}")
    return np.sqrt((tau * tau).sum(axis=1, keepdims=True))


def build_features(pc: PointCloud, spec: TaskSpec) -> PointCloud:
    """Return ``pc`` with features set according to the task's recipe."""
    if spec.recipe == "surface":
        feats = surface_features(pc, spec.direction)
    else:
        if "is_surface" not in pc.channels:
            raise DataError("volume features need an is_surface channel")
        u = REFERENCE_SPEED * np.asarray(spec.condition[0]) * np.asarray(spec.direction)
        sdf = pc.channels.get("sdf") if spec.recipe == "volume_sdf" else None
        if spec.recipe == "volume_sdf" and sdf is None:
            raise DataError("recipe volume_sdf needs an sdf channel")
        feats = volume_features(pc, u, pc.channels["is_surface"], sdf)
    return pc.with_features(feats)


def sample_points(pc: PointCloud, n: int, seed: int) -> PointCloud:
    """Uniform random subset of ``n`` points; draws with replacement (flagged in meta) if n > len."""
    if n <= 0:
        raise DataError("sample size must be positive")
    rng = np.random.default_rng(seed)
    replace = n > len(pc)
    idx = rng.choice(len(pc), size=n, replace=replace)
    out = pc.subset(idx)
    out.meta["sampled_with_replacement"] = bool(replace)
    return out


# -- synthetic analytic flow ----------------------------------------------------------

CATEGORIES = {
    # semi-axis multipliers along (flow, y, z) before jitter
    "sphere": (1.0, 1.0, 1.0),
    "prolate": (1.6, 0.8, 0.8),
    "oblate": (0.6, 1.1, 1.1),
}


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def sphere_cp(normals, direction) -> np.ndarray:
    """Potential-flow Cp = 1 - 9/4 sin^2(theta), theta measured from -d_inf."""
    cos = -(np.asarray(normals) @ np.asarray(direction))
    return 1.0 - 2.25 * (1.0 - cos * cos)


def sphere_velocity(x, radius: float, speed: float, direction) -> np.ndarray:
    """Potential flow past a sphere centred at the origin, evaluated at points ``x`` (r >= R)."""
    d = np.asarray(direction, dtype=float)
    r = np.linalg.norm(x, axis=1, keepdims=True)
    xd = x @ d
    return speed * d + 0.5 * speed * radius**3 * (d / r**3 - 3.0 * xd[:, None] * x / r**5)


def synth_sphere_flow(n_surface: int, n_volume: int = 0, radius: float = 1.0, u_inf: float = 30.0,
                      seed: int = 0, direction=(1.0, 0.0, 0.0), axes=None, category: str = "sphere",
                      skin_friction: float = 3e-3) -> PointCloud:
    """One synthetic body in uniform inflow, with analytic or label-model targets.

    Surface points come from a randomly rotated Fibonacci lattice mapped onto
    the ellipsoid x = A u with A = diag(axes) (a sphere when all axes equal
    ``radius``). Targets:

    * ``cp``: 1 - 9/4 sin^2 of the angle between the stretched-space normal
      and the stretched-space inflow. Exact potential flow for a sphere; a
      smooth label model otherwise.
    * ``pressure``: kinematic pressure 0.5 U^2 Cp.
    * ``wss``: skin_friction * U * surface slip velocity, a label model
      (potential flow has no shear).
    * ``velocity`` on volume points: the potential-flow field of the sphere
      of radius ``radius`` (volume points sit in the shell R < r < 3R).
    """
    if n_surface <= 0 or n_volume < 0:
        raise DataError("point counts must be positive")
    rng = np.random.default_rng(seed)
    d = _unit(direction)
    a = np.full(3, float(radius)) if axes is None else np.asarray(axes, dtype=float).reshape(3)
    if np.any(a <= 0):
        raise DataError("ellipsoid axes must be positive")

    u = fibonacci_sphere(n_surface) @ random_rotation(rng).T
    pos = u * a
    m = u / a
    scale = np.linalg.norm(m, axis=1)
    normals = m / scale[:, None]
    areas = np.prod(a) * scale * 4.0 * np.pi / n_surface

    ds = d / a
    ds /= np.linalg.norm(ds)
    cp = sphere_cp(u, ds)
    slip = 1.5 * u_inf * (ds - (u @ ds)[:, None] * u)
    # map the stretched-space slip back to a tangent vector of the real surface
    slip = slip * a
    slip -= (slip * normals).sum(axis=1, keepdims=True) * normals
    wss = skin_friction * u_inf * slip

    targets = {"cp": cp, "pressure": 0.5 * u_inf**2 * cp, "wss": wss}
    channels = {"is_surface": np.ones(n_surface, dtype=bool), "sdf": np.zeros(n_surface)}
    parts = _octant_parts(pos, d)
    meta = {"category": category, "u_inf": float(u_inf), "radius": float(radius), "axes": a.tolist(),
            "direction": d.tolist(), "condition": [u_inf / REFERENCE_SPEED], "seed": int(seed)}
    surface = PointCloud(pos, normals=normals, areas=areas, parts=parts, targets=targets,
                         channels=channels, meta=meta)
    if n_volume == 0:
        return surface

    rmax = 3.0 * radius
    shell = rng.uniform(radius**3, rmax**3, size=n_volume) ** (1.0 / 3.0)
    dirs = rng.normal(size=(n_volume, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    vpos = dirs * shell[:, None]
    vel = sphere_velocity(vpos, radius, u_inf, d)
    # surface velocity from the same field on a sphere; ellipsoid surfaces reuse the slip label
    surf_vel = sphere_velocity(pos, radius, u_inf, d) if axes is None else slip
    return PointCloud(
        positions=np.vstack([pos, vpos]),
        normals=None,
        areas=None,
        parts=np.concatenate([parts, np.full(n_volume, -1)]),
        targets={"velocity": np.vstack([surf_vel, vel])},
        channels={"is_surface": np.concatenate([np.ones(n_surface, bool), np.zeros(n_volume, bool)]),
                  "sdf": np.concatenate([np.zeros(n_surface), shell - radius])},
        meta=meta,
    )


def _octant_parts(pos, d):
    """Front/rear x upper/lower labels, so drag reports have several parts."""
    front = (pos @ d) < 0
    upper = pos[:, 2] >= 0
    return (2 * front + upper).astype(np.int64)


PART_NAMES = {0: "rear_lower", 1: "rear_upper", 2: "front_lower", 3: "front_upper"}


def synth_corpus(n_samples: int, n_points: int, seed: int = 0, categories=("sphere", "prolate", "oblate"),
                 radius: float = 1.0, jitter: float = 0.15, speed_range=(20.0, 40.0),
                 direction=(1.0, 0.0, 0.0)) -> list[PointCloud]:
    """Surface samples cycling through ``categories`` with jittered size, aspect and speed.

    Features are the surface recipe [x, n, cos(theta)].
    """
    if n_samples <= 0:
        raise DataError("corpus needs at least one sample")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_samples):
        cat = categories[i % len(categories)]
        r = radius * (1.0 + rng.uniform(-jitter, jitter))
        axes = r * np.asarray(CATEGORIES[cat]) * (1.0 + rng.uniform(-jitter, jitter, size=3))
        if cat == "sphere":
            axes = np.full(3, r)
        speed = rng.uniform(*speed_range)
        pc = synth_sphere_flow(n_points, 0, r, speed, int(rng.integers(2**31)), direction, axes, cat)
        out.append(build_features(pc, TaskSpec("pressure", pc.meta["condition"], direction)))
    return out


def split_by_category(samples, train_categories, test_categories):
    train_categories, test_categories = set(train_categories), set(test_categories)
    if not test_categories:
        raise DataError("test category list is empty")
    overlap = train_categories & test_categories
    if overlap:
        raise DataError(f"categories on both sides of the split: {sorted(overlap)}")
    train = [s for s in samples if s.meta.get("category") in train_categories]
    test = [s for s in samples if s.meta.get("category") in test_categories]
    return train, test
