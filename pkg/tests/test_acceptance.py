"""Acceptance gate: one or more tests per criterion, each tagged so conftest prints a verdict line.

Run on its own with ``pytest tests/test_acceptance.py -v``.
"""

import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from gafield import tensor as T
from gafield.aero import DragReport, DragRow, cell_drag, partwise_drag
from gafield.blocks import GroupedVectorAttention
from gafield.cli import load_dir, main
from gafield.config import load_config
from gafield.data import synth_sphere_flow
from gafield.metrics import METRICS, mae, maxae, mse, r2, rel_l1, rel_l2
from gafield.model import GAField, ModelConfig
from gafield.pointcloud import PointCloud, cluster_pairs, grid_pool, unpool
from gafield.tensor import Tensor
from gafield.training import OptimizerState, TrainConfig, adamw_step, lr_at, model_from_checkpoint, train

from test_blocks import dense_attention
from test_model import MICRO, micro_gradient_errors, random_cloud
from test_pointcloud import assignment_matches_oracle

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"


def criterion(n, title):
    return pytest.mark.criterion(n, title)


def rel_l2_of(model, samples, ablate=False):
    out = []
    with T.no_grad():
        for pc in samples:
            p = model(pc, pc.meta["condition"], ablate_injection=ablate).final.data.reshape(-1)
            out.append(rel_l2(p, pc.targets["cp"].reshape(-1)))
    return float(np.mean(out))


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """The desk pipeline through the CLI: synth, train on 8 x 2048 points, eval on held-out shapes.

    Training sees no validation data; held-out scores come from ``last.ckpt``.
    """
    cfg = load_config(DESK)
    assert (cfg.data.n_samples, cfg.data.n_points) == (8, 2048)
    assert (cfg.train.epochs, cfg.train.batch_size) == (50, 2)
    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    assert main(["synth", "--config", str(DESK), "--out", str(root / "corpus")]) == 0
    assert main(["train", "--config", str(DESK), "--out", str(root / "run"),
                 "--train-dir", str(root / "corpus" / "train")]) == 0
    assert main(["eval", "--config", str(DESK), "--checkpoint", str(root / "run" / "last.ckpt"),
                 "--data", str(root / "corpus" / "val"), "--out", str(root / "eval")]) == 0
    seconds = time.perf_counter() - t0
    model = model_from_checkpoint(root / "run" / "last.ckpt")
    train_set, _ = load_dir(root / "corpus" / "train", cfg.data, "cp")
    held_out, _ = load_dir(root / "corpus" / "val", cfg.data, "cp")
    metrics = dict(zip(*[ln.split(",") for ln in (root / "eval" / "metrics.csv").read_text().splitlines()[:2]]))
    return dict(cfg=cfg, model=model, train=train_set, held_out=held_out, seconds=seconds, metrics=metrics)


# 1 -------------------------------------------------------------------------------------

@criterion(1, "gradient certification on the micro model")
def test_c1_gradients():
    t0 = time.perf_counter()
    errs = micro_gradient_errors(n_points=32)
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    print(f"worst parameter {worst}: {errs[worst]:.2e} over {len(errs)} tensors in {elapsed:.1f}s")
    assert len(MICRO["grid_sizes"]) == 2 and 8 <= min(MICRO["channels"]) <= max(MICRO["channels"]) <= 16
    assert errs[worst] <= 1e-4
    assert elapsed < 60


# 2 -------------------------------------------------------------------------------------

@criterion(2, "grid pooling against the cell-key oracle and the scatter adjoint")
def test_c2_pooling_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    for k in range(100):
        scale = rng.uniform(0.5, 5.0)
        pos = rng.uniform(-scale, scale, size=(1000, 3)) + rng.normal(size=3) * 10
        s = rng.uniform(0.05, 1.0) * scale
        pc = PointCloud(pos)
        pr = grid_pool(pc, s)
        assert assignment_matches_oracle(pc, pr), k
        x, y = rng.normal(size=(1000, 4)), rng.normal(size=(pr.n_coarse, 4))
        lhs = np.sum(T.scatter_add(Tensor(x), pr.index, pr.n_coarse).data * y)
        rhs = np.sum(x * unpool(y, pr.index))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs)), k
    assert time.perf_counter() - t0 < 30


# 3 -------------------------------------------------------------------------------------

def _attention_setup(seed, n=60, c=8, s=0.35):
    rng = np.random.default_rng(seed)
    pos, feats = rng.uniform(0, 1, size=(n, 3)), rng.normal(size=(n, c))
    pr = grid_pool(PointCloud(pos), s)
    nbrs = [np.flatnonzero(pr.index == pr.index[i]) for i in range(n)]
    return rng, pos, feats, pr, nbrs


@criterion(3, "attention weights, dense oracles and forward equivariance")
@pytest.mark.parametrize("groups", [1, 2, 4, 8])
def test_c3_weights_sum_to_one(groups):
    rng, pos, feats, pr, _ = _attention_setup(groups)
    att = GroupedVectorAttention(8, groups, rng)
    qi, kj = cluster_pairs(pr)
    _, w = att(Tensor(feats), pos, (qi, kj), return_weights=True)
    assert w.shape[1] == groups
    assert np.abs(T.scatter_add(w, qi, len(pos)).data - 1.0).max() <= 1e-9


@criterion(3, "attention weights, dense oracles and forward equivariance")
@pytest.mark.parametrize("groups", [1, 8])
def test_c3_dense_oracles(groups):
    rng, pos, feats, pr, nbrs = _attention_setup(10 + groups)
    att = GroupedVectorAttention(8, groups, rng)
    got = att(Tensor(feats), pos, cluster_pairs(pr)).data
    want = dense_attention(att, feats, pos, nbrs)
    assert np.abs(got - want).max() <= 1e-12


@criterion(3, "attention weights, dense oracles and forward equivariance")
def test_c3_forward_permutation_equivariance():
    for seed in range(3):
        pc, rng = random_cloud(90, seed)
        perm = rng.permutation(90)
        m = GAField(ModelConfig(**{**MICRO, "film_zero_init": False, "channels": [8, 16], "seed": seed}))
        a = m(pc, [0.3]).final.data
        b = m(pc.subset(perm), [0.3]).final.data
        np.testing.assert_array_equal(a[perm], b)


# 4 -------------------------------------------------------------------------------------

@criterion(4, "geometry injection: zero-init identity and trained ablation")
def test_c4_zero_init_is_unconditioned():
    for seed in range(3):
        pc, _ = random_cloud(70, seed)
        m = GAField(ModelConfig(**{**MICRO, "seed": seed}))
        plain = GAField(ModelConfig(**{**MICRO, "seed": seed, "film": False}))
        keep = dict(plain.named_parameters())
        plain.load_state_dict({k: v for k, v in m.state_dict().items() if k in keep})
        np.testing.assert_array_equal(m(pc, [0.4]).final.data, plain(pc, [0.4]).final.data)
        np.testing.assert_array_equal(m(pc, [0.4]).final.data, m(pc, [0.4], ablate_injection=True).final.data)


@criterion(4, "geometry injection: zero-init identity and trained ablation")
def test_c4_ablation_hurts_after_training(desk_run):
    full = rel_l2_of(desk_run["model"], desk_run["held_out"])
    ablated = rel_l2_of(desk_run["model"], desk_run["held_out"], ablate=True)
    print(f"held-out Rel L2 with injection {full:.4f}, ablated {ablated:.4f}")
    assert ablated > full


# 5 -------------------------------------------------------------------------------------

@criterion(5, "residual composition on 50 random configs")
def test_c5_residual_composition():
    rng = np.random.default_rng(5)
    for k in range(50):
        stages = int(rng.integers(2, 4))
        s0 = float(rng.uniform(0.1, 0.5))
        g = int(rng.choice([1, 2, 4]))
        width = g * int(rng.integers(1, 5))
        cfg = ModelConfig(in_dim=7, grid_sizes=[s0 * 2**i for i in range(stages)], channels=[width] * stages,
                          blocks_per_stage=int(rng.integers(1, 3)), group_size=width // g,
                          token_grid=float(rng.uniform(0.3, 1.0)), embed_dim=int(rng.integers(2, 9)), cond_dim=1,
                          out_dim=int(rng.choice([1, 3])), film_zero_init=bool(rng.integers(2)), seed=k)
        pc, _ = random_cloud(int(rng.integers(1, 120)), 1000 + k, scale=float(rng.uniform(0.5, 3.0)))
        p = GAField(cfg)(pc, [float(rng.uniform())])
        np.testing.assert_array_equal(p.final.data, p.upsampled.data + p.residual.data)
        np.testing.assert_array_equal(p.upsampled.data, p.coarse.data[p.pools[0].index])


# 6 -------------------------------------------------------------------------------------

OVERFIT = dict(batch_size=1, epochs=300)


@criterion(6, "desk-scale learning on synthetic sphere/ellipsoid flow")
def test_c6_held_out_error(desk_run):
    train_err = rel_l2_of(desk_run["model"], desk_run["train"])
    held = rel_l2_of(desk_run["model"], desk_run["held_out"])
    print(f"train Rel L2 {train_err:.4f}, held-out Rel L2 {held:.4f}, pipeline {desk_run['seconds']:.0f}s")
    assert float(desk_run["metrics"]["rel_l2"]) == pytest.approx(held, rel=1e-12)
    assert len(desk_run["held_out"]) == desk_run["cfg"].data.n_val
    assert held <= 0.10
    assert desk_run["seconds"] < 300


@criterion(6, "desk-scale learning on synthetic sphere/ellipsoid flow")
def test_c6_single_sample_overfit(desk_run):
    cfg = desk_run["cfg"]
    sample = desk_run["train"][:1]
    model = GAField(cfg.model)
    t0 = time.perf_counter()
    train(model, sample, TrainConfig.from_dict({**cfg.train.to_dict(), **OVERFIT}))
    err = rel_l2_of(model, sample)
    total = desk_run["seconds"] + time.perf_counter() - t0
    print(f"single-sample Rel L2 {err:.4f}; training time for both runs {total:.0f}s")
    assert err <= 0.02
    assert total <= 600


# 7 -------------------------------------------------------------------------------------

@criterion(7, "metrics oracle")
def test_c7_metrics():
    y, p = [1.0, 2.0, 3.0], [1.0, 2.0, 5.0]
    assert mse(p, y) == 4 / 3 and mae(p, y) == 2 / 3 and maxae(p, y) == 2.0
    assert rel_l2(p, y) == 2 / np.sqrt(14) and rel_l1(p, y) == 1 / 3 and r2(p, y) == -1.0
    yy = np.random.default_rng(7).normal(size=500)
    for name, f in METRICS.items():
        assert abs(f(yy, yy) - (1.0 if name == "r2" else 0.0)) <= 1e-12
    assert abs(r2(np.full_like(yy, yy.mean()), yy)) <= 1e-12


# 8 -------------------------------------------------------------------------------------

@criterion(8, "drag physics and report round trip")
def test_c8_sphere_pressure_drag_vanishes():
    u, rho = 30.0, 1.225
    pc = synth_sphere_flow(10_000, 0, radius=1.0, u_inf=u, seed=8)
    rep = partwise_drag(pc, pc.targets["pressure"], np.zeros((len(pc), 3)), [1.0, 0.0, 0.0], rho)
    scale = 0.5 * rho * u**2 * np.pi
    print(f"|F_p| / (q A) = {abs(rep.total_pressure) / scale:.2e}")
    assert abs(rep.total_pressure) <= 0.02 * scale


@criterion(8, "drag physics and report round trip")
def test_c8_cell_drag_reevaluation():
    rng = np.random.default_rng(88)
    n = 10_000
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    tau, p, a = rng.normal(size=(n, 3)), rng.normal(size=n) * 100, rng.uniform(1e-3, 1.0, n)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    fp, ft = cell_drag(normals, p, tau, a, d, 1.225)
    for i in range(n):
        nd = normals[i, 0] * d[0] + normals[i, 1] * d[1] + normals[i, 2] * d[2]
        td = tau[i, 0] * d[0] + tau[i, 1] * d[1] + tau[i, 2] * d[2]
        assert fp[i] == -nd * p[i] * a[i] * 1.225 and ft[i] == td * a[i] * 1.225


@criterion(8, "drag physics and report round trip")
def test_c8_fixture_row_round_trip():
    rep = DragReport([DragRow("Mirrors_Glass", 9.924, 0.006, 0.037)])
    row = DragReport.from_csv(rep.to_csv()).row("Mirrors_Glass")
    assert (row.part, row.pressure_drag, row.shear_drag, row.area) == ("Mirrors_Glass", 9.924, 0.006, 0.037)


# 9 -------------------------------------------------------------------------------------

@criterion(9, "learning-rate schedule and AdamW")
def test_c9_schedule_and_optimizer():
    lr, w, total = 1e-4, 3000, 13000
    assert lr_at(0, lr, w, total) == 0.0
    assert lr_at(w, lr, w, total) == lr
    assert abs(lr_at(w + (total - w) // 2, lr, w, total) - lr / 2) <= 1e-12
    for g in (1.0, -3.0, 1e-3):
        p = {"p": Tensor(np.array([0.5]), requires_grad=True)}
        adamw_step(p, {"p": np.array([g])}, OptimizerState(), lr=0.01, weight_decay=0.0)
        # bias-corrected first moments are g and g^2, so the step is lr * g / (|g| + eps)
        assert abs(p["p"].data[0] - (0.5 - 0.01 * g / (abs(g) + 1e-8))) <= 1e-15
    p = {"p": Tensor(np.array([2.0]), requires_grad=True)}
    adamw_step(p, {"p": np.array([0.0])}, OptimizerState(), lr=0.1, weight_decay=0.5)
    assert p["p"].data[0] == 2.0 * (1.0 - 0.1 * 0.5)


# 10 ------------------------------------------------------------------------------------

def _cli(*args, cwd):
    env = {**os.environ, "GAFIELD_THREADS": "1"}
    r = subprocess.run([sys.executable, "-m", "gafield", *args], cwd=cwd, env=env, capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    return r


@criterion(10, "bit-identical checkpoints across runs and a resumed run")
def test_c10_determinism(tmp_path):
    _cli("synth", "--out", "corpus", "--samples", "3", "--val", "1", "--points", "128", "--seed", "10", cwd=tmp_path)
    common = ["--train-dir", "corpus/train", "--val-dir", "corpus/val", "--profile", "desk",
              "--set", "train.epochs=3", "--set", "train.seed=10"]
    for s in ("model.grid_sizes=[0.4, 0.8]", "model.channels=[8, 16]", "model.blocks_per_stage=1",
              "model.group_size=4", "model.token_grid=0.6", "model.embed_dim=8"):
        common += ["--set", s]
    _cli("train", "--out", "a", *common, cwd=tmp_path)
    _cli("train", "--out", "b", *common, cwd=tmp_path)
    _cli("train", "--out", "c", *common, "--stop-after-epoch", "1", cwd=tmp_path)
    _cli("train", "--out", "c", *common, "--resume", "c/last.ckpt", cwd=tmp_path)
    a, b, c = ((tmp_path / d / "last.ckpt").read_bytes() for d in "abc")
    assert a == b
    assert a == c
    assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 10
