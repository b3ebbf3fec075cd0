"""Command-line entry point: synth, train, eval, predict, drag.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric divergence.
Failures print one line to stderr: ``error code=<n> kind=<Type> msg=<json string>``.
Set GAFIELD_THREADS to pin BLAS/OpenMP thread counts (read before numpy loads).
"""

from __future__ import annotations

import os
import sys

_threads = os.environ.get("GAFIELD_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import platform  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import tensor as T  # noqa: E402
from .aero import AIR_DENSITY, drag_from_prediction  # noqa: E402
from .config import ConfigError, load_config  # noqa: E402
from .data import (PART_NAMES, DataError, Normalizer, TaskSpec, build_features,  # noqa: E402
                   synth_corpus, synth_sphere_flow)
from .fileio import read_cloud, write_cloud, write_csv  # noqa: E402
from .metrics import UndefinedMetricError, evaluate, reports_table, reports_to_csv  # noqa: E402
from .model import TASK_OUT_DIM, GAField  # noqa: E402
from .training import DivergenceError, load_checkpoint, model_from_checkpoint, train  # noqa: E402

log = logging.getLogger("gafield")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
CLOUD_SUFFIXES = (".gpc", ".csv")


def git_blob_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out_dir: Path, command: str, resolved: dict, seed, inputs) -> None:
    manifest = {
        "command": command,
        "config": resolved,
        "seed": seed,
        "inputs": {str(p): git_blob_hash(p) for p in sorted(set(map(str, inputs)))},
        "python": platform.python_version(),
        "numpy": np.__version__,
        "threads": os.environ.get("GAFIELD_THREADS"),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def cloud_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"data directory not found: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in CLOUD_SUFFIXES)
    if not files:
        raise DataError(f"no point-cloud files in {d}")
    return files


def prepared(pc, data_cfg, target: str | None = None):
    spec = TaskSpec(data_cfg.task, pc.meta.get("condition", [1.0]), pc.meta.get("direction", data_cfg.direction),
                    data_cfg.recipe)
    out = build_features(pc, spec) if pc.features is None else pc
    if target is not None and target not in out.targets:
        raise DataError(f"cloud has no target {target!r}")
    return out


def load_dir(directory, data_cfg, target):
    files = cloud_files(directory)
    return [prepared(read_cloud(f), data_cfg, target) for f in files], files


# -- subcommands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.set)
    d = cfg.data
    out = Path(args.out)
    seed = d.seed if args.seed is None else args.seed
    n_train = d.n_samples if args.samples is None else args.samples
    n_val = d.n_val if args.val is None else args.val
    n_points = d.n_points if args.points is None else args.points
    writer = (lambda p, pc: write_csv(p.with_suffix(".csv"), pc)) if args.csv else \
        (lambda p, pc: write_cloud(p, pc, "f8"))
    for split, count, s in (("train", n_train, seed), ("val", n_val, seed + 1)):
        if count == 0:
            continue
        (out / split).mkdir(parents=True, exist_ok=True)
        for i, pc in enumerate(synth_corpus(count, n_points, s, d.categories, d.radius, d.jitter,
                                            direction=d.direction)):
            pc = replace(pc, features=None)
            writer(out / split / f"sample_{i:04d}.gpc", pc)
    if args.volume:
        (out / "volume").mkdir(parents=True, exist_ok=True)
        pc = synth_sphere_flow(n_points, n_points, d.radius, 30.0, seed, d.direction)
        writer(out / "volume" / "sphere_volume.gpc", pc)
    write_manifest(out, "synth", cfg.to_dict(), seed, [args.config] if args.config else [])
    print(f"wrote synthetic corpus to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = list(args.set)
    if args.train_dir:
        overrides.append(f"data.train_dir={args.train_dir}")
    if args.val_dir:
        overrides.append(f"data.val_dir={args.val_dir}")
    cfg = load_config(args.config, overrides, args.profile)
    if cfg.data.train_dir is None:
        raise ConfigError("no training data: set data.train_dir or pass --train-dir")
    want = TASK_OUT_DIM[cfg.data.task]
    if cfg.model.out_dim != want:
        raise ConfigError(f"model.out_dim={cfg.model.out_dim} but task {cfg.data.task} needs {want}")
    train_set, files = load_dir(cfg.data.train_dir, cfg.data, cfg.train.target)
    val_set, vfiles = ([], [])
    if cfg.data.val_dir:
        val_set, vfiles = load_dir(cfg.data.val_dir, cfg.data, cfg.train.target)
    width = train_set[0].features.shape[1]
    if width != cfg.model.in_dim:
        raise ConfigError(f"model.in_dim={cfg.model.in_dim} but features have width {width}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = files + vfiles + ([args.config] if args.config else []) + ([args.resume] if args.resume else [])
    write_manifest(out, "train", cfg.to_dict(), cfg.train.seed, inputs)
    (out / "run_config.yaml").write_text(cfg.dump())
    model = GAField(cfg.model)
    result = train(model, train_set, cfg.train, val_set or None, out, args.resume, args.stop_after_epoch)
    last = [r for r in result.log if r["train"] != ""]
    print(f"trained {len(last)} logged steps; final train loss {last[-1]['train']:.6g}"
          + (f"; best val {result.best_val:.6g}" if result.best_val is not None else ""))
    return EXIT_OK


def _target_norm_for(ckpt) -> str:
    tc = load_checkpoint(ckpt).train_config
    return tc.target_norm if tc else "none"


def _predict(model, pc):
    with T.no_grad():
        return model(pc, pc.meta.get("condition") if model.config.cond_dim else None).final.data


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    ck = load_checkpoint(ckpt)
    model = model_from_checkpoint(ckpt)
    cfg = load_config(args.config, args.set)
    target = args.target or (ck.train_config.target if ck.train_config else "cp")
    norm = ck.train_config.target_norm if ck.train_config else "none"
    samples, _ = load_dir(args.data, cfg.data, target)
    preds, targets = [], []
    for pc in samples:
        p, y = _predict(model, pc), pc.targets[target]
        if norm == "paper":
            if args.raw:
                p = Normalizer().denormalize(p)
            else:
                y = Normalizer().normalize(y)
        preds.append(p)
        targets.append(y)
    reports = evaluate(preds, targets, args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(reports_to_csv(reports))
    (out / "metrics.txt").write_text(reports_table(reports) + "\n")
    print(reports_table(reports))
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = Path(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    cfg = load_config(args.config, args.set)
    pc = prepared(read_cloud(args.cloud), cfg.data)
    pred = _predict(model, pc)
    if _target_norm_for(ckpt) == "paper" and not args.normalized:
        pred = Normalizer().denormalize(pred)
    pc.targets["prediction"] = pred
    out = Path(args.out)
    if out.suffix.lower() == ".csv":
        write_csv(out, pc)
    else:
        write_cloud(out, pc, "f8")
    print(f"wrote {len(pc)} predictions to {out}")
    return EXIT_OK


def cmd_drag(args) -> int:
    cfg = load_config(args.config, args.set)
    pc = prepared(read_cloud(args.cloud), cfg.data)
    if pc.parts is None or pc.normals is None:
        raise DataError("drag needs a cloud with normals and part labels")
    models = []
    for path in (args.pressure_ckpt, args.wss_ckpt):
        models.append(model_from_checkpoint(path) if path else None)
    if args.pressure_ckpt is None and args.wss_ckpt is None and not args.from_targets:
        raise ConfigError("pass --pressure-ckpt/--wss-ckpt, or --from-targets to use the cloud's own fields")
    norm = Normalizer() if args.pressure_ckpt and _target_norm_for(args.pressure_ckpt) == "paper" else None
    direction = pc.meta.get("direction", cfg.data.direction)
    report = drag_from_prediction(models[0], models[1], pc, direction, args.rho, norm, part_names=PART_NAMES)
    Path(args.out).write_text(report.to_csv())
    if args.chart:
        Path(args.chart).write_text(report.chart_data())
    print(f"pressure drag {report.total_pressure:.6g} N, shear drag {report.total_shear:.6g} N")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gafield", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")

    s = sub.add_parser("synth", help="generate the synthetic sphere/ellipsoid corpus")
    common(s)
    s.add_argument("--out", required=True)
    s.add_argument("--samples", type=int)
    s.add_argument("--val", type=int)
    s.add_argument("--points", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--csv", action="store_true", help="write CSV instead of the binary container")
    s.add_argument("--volume", action="store_true", help="also write one sphere with volume velocity points")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model, writing checkpoints and a loss log")
    common(s)
    s.add_argument("--out", required=True)
    s.add_argument("--profile", choices=["paper", "desk"], help="named train hyperparameter set")
    s.add_argument("--train-dir")
    s.add_argument("--val-dir")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--stop-after-epoch", type=int, help="stop early (checkpoint kept) to split a run in two")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a directory of clouds")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--target")
    s.add_argument("--mode", choices=["magnitude", "components"], default="magnitude")
    s.add_argument("--raw", action="store_true", help="score unnormalised values")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="predict the field for one cloud file")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--cloud", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--normalized", action="store_true", help="keep predictions in normalised units")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("drag", help="part-wise drag report from pressure and WSS predictions")
    common(s)
    s.add_argument("--cloud", required=True)
    s.add_argument("--pressure-ckpt")
    s.add_argument("--wss-ckpt")
    s.add_argument("--from-targets", action="store_true", help="use the cloud's own fields where no model is given")
    s.add_argument("--rho", type=float, default=AIR_DENSITY)
    s.add_argument("--out", required=True)
    s.add_argument("--chart", help="also write bar-chart JSON here")
    s.set_defaults(func=cmd_drag)
    return p


def _fail(code: int, exc: BaseException) -> int:
    print(f"error code={code} kind={type(exc).__name__} msg={json.dumps(str(exc))}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, KeyError) as e:
        return _fail(EXIT_CONFIG, e)
    except (DataError, FileNotFoundError, UndefinedMetricError) as e:
        return _fail(EXIT_DATA, e)
    except (DivergenceError, T.NonFiniteError) as e:
        return _fail(EXIT_DIVERGED, e)
    except ValueError as e:
        return _fail(EXIT_DATA, e)


if __name__ == "__main__":
    sys.exit(main())
