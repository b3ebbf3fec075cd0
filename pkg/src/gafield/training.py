"""Coarse-plus-fine L1 loss, warmup-cosine schedule, AdamW, training loop and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import normalize_pressure
from .model import FieldPrediction, GAField, ModelConfig, build_hierarchy
from .pointcloud import PointCloud
from .tensor import NonFiniteError, Tensor


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    lam: float = 0.3
    lr: float = 1e-4
    warmup: int = 3000
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 2
    epochs: int = 50
    seed: int = 0
    target: str = "cp"
    target_norm: str = "none"
    log_every: int = 1
    keep_every: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.warmup < 0 or self.batch_size < 1 or self.epochs < 0 or self.log_every < 1:
            raise ValueError("invalid warmup, batch size, epoch count or log cadence")
        if self.target_norm not in ("none", "paper"):
            raise ValueError(f"target_norm must be 'none' or 'paper', got {self.target_norm!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# the paper's schedule, and one sized for a handful of samples on a laptop
PROFILES = {
    "paper": dict(lr=1e-4, warmup=3000, weight_decay=0.01, lam=0.3, batch_size=4, epochs=200),
    "desk": dict(lr=1e-2, warmup=20, beta2=0.99, weight_decay=0.01, lam=0.3, batch_size=2, epochs=50),
}


def loss(pred: FieldPrediction, y, lam: float = 0.3) -> Tensor:
    """mean_i ( |final_i - y_i|_1 + lam * |upsampled_i - y_i|_1 )."""
    y = np.asarray(y, dtype=pred.final.dtype)
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    if y.shape != pred.final.shape:
        raise ValueError(f"target shape {y.shape} != prediction shape {pred.final.shape}")
    fine = T.tabs(pred.final - y).sum(axis=1)
    return (fine + lam * T.tabs(pred.upsampled - y).sum(axis=1)).mean()


def lr_at(step: int, lr: float, warmup: int, total: int) -> float:
    """Linear ramp 0 -> lr over ``warmup`` steps, then cosine decay to 0 at ``total``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if total < warmup:
        raise ValueError(f"total steps {total} < warmup {warmup}")
    if step < warmup:
        return lr * step / warmup
    if total == warmup:
        return lr if step == warmup else 0.0
    t = min(step - warmup, total - warmup) / (total - warmup)
    return 0.5 * lr * (1.0 + math.cos(math.pi * t))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """One AdamW update in place, decay decoupled from the adaptive step.

    Order follows the common reference implementation: p <- p(1 - lr wd),
    then p <- p - lr m_hat / (sqrt(v_hat) + eps).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise DivergenceError(f"non-finite gradient in {name} ({bad} entries) at step {state.step + 1}")
    state.step += 1
    b1c = 1.0 - beta1**state.step
    b2c = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / b1c) / (np.sqrt(v / b2c) + eps)


# -- loop -------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: GAField
    log: list[dict]
    best_val: float | None
    state: OptimizerState


def _condition(pc: PointCloud, cond_dim: int):
    c = pc.meta.get("condition")
    if cond_dim == 0:
        return None
    if c is None:
        raise ValueError("sample has no flow condition in meta['condition']")
    return c


class _Cache:
    """Pooling hierarchies keyed by sample position, built once per run."""

    def __init__(self, grid_sizes):
        self.grid_sizes = grid_sizes
        self.store = {}

    def __call__(self, key, pc):
        h = self.store.get(key)
        if h is None:
            h = self.store[key] = build_hierarchy(pc.positions, self.grid_sizes)
        return h


def training_target(pc: PointCloud, cfg: TrainConfig) -> np.ndarray:
    """The supervised field, normalised with the pressure constants when ``target_norm="paper"``."""
    if cfg.target not in pc.targets:
        raise KeyError(f"sample has no target {cfg.target!r}")
    y = pc.targets[cfg.target]
    return normalize_pressure(y) if cfg.target_norm == "paper" else y


def sample_loss(model: GAField, pc: PointCloud, cfg: TrainConfig, hierarchy=None) -> Tensor:
    pred = model(pc, _condition(pc, model.config.cond_dim), hierarchy=hierarchy)
    return loss(pred, training_target(pc, cfg), cfg.lam)


def evaluate_loss(model: GAField, samples: Sequence[PointCloud], cfg: TrainConfig, cache=None) -> float:
    total = 0.0
    with T.no_grad():
        for i, pc in enumerate(samples):
            h = cache(("val", i), pc) if cache else None
            total += sample_loss(model, pc, cfg, h).item()
    return total / len(samples)


def train(model: GAField, train_set: Sequence[PointCloud], cfg: TrainConfig,
          val_set: Sequence[PointCloud] | None = None, out_dir=None, resume=None,
          stop_after_epoch: int | None = None) -> TrainResult:
    """Minibatch AdamW over ``train_set`` for ``cfg.epochs`` epochs.

    Each epoch shuffles with the run's seeded generator. With ``out_dir``, a
    CSV loss log and ``last.ckpt`` are written every epoch, ``best.ckpt`` when
    validation improves. ``resume`` restores parameters, optimizer moments,
    generator state and log from a checkpoint and continues the same run.
    ``stop_after_epoch`` ends early (for interrupted-run tests).
    """
    if not train_set:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState()
    log: list[dict] = []
    best_val = None
    start_epoch = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        model.load_state_dict(ck.params)
        state = ck.optimizer
        rng.bit_generator.state = ck.rng_state
        log = ck.log
        best_val = ck.best_val
        start_epoch = ck.epoch
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total = max(cfg.epochs * steps_per_epoch, cfg.warmup)
    params = dict(model.named_parameters())
    cache = _Cache(model.config.grid_sizes)

    for epoch in range(start_epoch, cfg.epochs):
        order = rng.permutation(len(train_set))
        for b in range(steps_per_epoch):
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = lr_at(state.step, cfg.lr, cfg.warmup, total)
            try:
                parts = [sample_loss(model, train_set[i], cfg, cache(("train", int(i)), train_set[i]))
                         for i in batch]
                batch_loss = parts[0]
                for p in parts[1:]:
                    batch_loss = batch_loss + p
                batch_loss = batch_loss / float(len(parts))
                model.zero_grad()
                T.backward(batch_loss, params.values())
            except NonFiniteError as e:
                raise DivergenceError(f"non-finite value at step {state.step + 1}: {e}") from e
            adamw_step(params, {k: p.grad for k, p in params.items()}, state, lr,
                       cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
            if state.step % cfg.log_every == 0:
                log.append({"step": state.step, "lr": lr, "train": batch_loss.item(), "val": ""})
        val = evaluate_loss(model, val_set, cfg, cache) if val_set else None
        if val is not None:
            log.append({"step": state.step, "lr": lr, "train": "", "val": val})
        improved = val is not None and (best_val is None or val < best_val)
        if improved:
            best_val = val
        if out is not None:
            ck = Checkpoint(model.config, cfg, model.state_dict(), state, rng.bit_generator.state,
                            epoch + 1, best_val, log)
            save_checkpoint(out / "last.ckpt", ck)
            if improved:
                save_checkpoint(out / "best.ckpt", ck)
            if cfg.keep_every and (epoch + 1) % cfg.keep_every == 0:
                save_checkpoint(out / f"epoch{epoch + 1:04d}.ckpt", ck)
            write_log(out / "loss_log.csv", log)
        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
            break
    return TrainResult(model, log, best_val, state)


def write_log(path, log: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "lr", "train", "val"])
        w.writeheader()
        for row in log:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# -- checkpoints ------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig | None
    params: dict[str, np.ndarray]
    optimizer: OptimizerState
    rng_state: dict | None
    epoch: int
    best_val: float | None
    log: list[dict]


_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, ck: Checkpoint) -> None:
    """Zip archive with fixed timestamps: config.json, state.json and one .npy per array."""
    entries = [("config.json", json.dumps({"model": ck.model_config.to_dict(),
                                           "train": ck.train_config.to_dict() if ck.train_config else None},
                                          sort_keys=True, indent=1).encode())]
    state = {"epoch": ck.epoch, "step": ck.optimizer.step, "best_val": ck.best_val, "rng": ck.rng_state,
             "log": ck.log, "param_names": list(ck.params)}
    entries.append(("state.json", json.dumps(state, sort_keys=True).encode()))
    for k, a in ck.params.items():
        entries.append((f"params/{k}.npy", _npy(a)))
    for k in ck.optimizer.m:
        entries.append((f"adam_m/{k}.npy", _npy(ck.optimizer.m[k])))
        entries.append((f"adam_v/{k}.npy", _npy(ck.optimizer.v[k])))
    tmp = Path(str(path) + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        for name, data in entries:
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        cfg = json.loads(zf.read("config.json"))
        state = json.loads(zf.read("state.json"))
        load = lambda name: np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
        params = {k: load(f"params/{k}.npy") for k in state["param_names"]}
        names = set(zf.namelist())
        opt = OptimizerState(step=state["step"])
        for k in state["param_names"]:
            if f"adam_m/{k}.npy" in names:
                opt.m[k] = load(f"adam_m/{k}.npy")
                opt.v[k] = load(f"adam_v/{k}.npy")
    mcfg = ModelConfig.from_dict(cfg["model"])
    tcfg = TrainConfig.from_dict(cfg["train"]) if cfg.get("train") else None
    return Checkpoint(mcfg, tcfg, params, opt, state["rng"], state["epoch"], state["best_val"], state["log"])


def model_from_checkpoint(path) -> GAField:
    """Build the configured model and load its parameters (shapes validated)."""
    ck = load_checkpoint(path)
    model = GAField(ck.model_config)
    model.load_state_dict(ck.params)
    return model
