"""Command-line entry point: ``xjepa <command> [options]``.

Exit codes: 0 success, 1 failed assertion, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import pipeline
from .analysis import (
    DEFAULT_GRIDS,
    SWEEP_AXES,
    SWEEP_COLUMNS,
    grad_check,
    gradient_variance_experiment,
    run_sweep,
    tiny_stack_closure,
)
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .dataset import load_dataset, save_dataset
from .evaluation import FinetuneConfig, finetune, write_report
from .geometry import parse_view_spec
from .model import build_model, load_checkpoint, load_model_state, model_state, save_checkpoint
from .teacher import EmbeddingCache, TeacherTargets, build_cache, make_teacher
from .training import history_csv

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class AssertionFailed(Exception):
    pass


class FileFormatError(OSError):
    pass


def _read(loader, path):
    try:
        return loader(path)
    except ValueError as exc:
        raise FileFormatError(str(exc)) from None


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("XJEPA_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"XJEPA_THREADS must be an integer, got {env!r}") from None
    return 1


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "views", None):
        try:
            parse_view_spec(args.views)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        cfg = replace(cfg, grid=replace(cfg.grid, views=args.views))
    return cfg


def _out(args, default: str) -> Path:
    path = Path(args.out or default)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _check(args, ok: bool, message: str) -> None:
    print(("PASS " if ok else "FAIL ") + message)
    if args.assert_ and not ok:
        raise AssertionFailed(message)


def _load_model(cfg: ExperimentConfig, path: Optional[str]):
    enc, pred = cfg.model_configs()
    model = build_model(enc, pred, seed=cfg.train.seed)
    if path is not None:
        tensors, _ = _read(load_checkpoint, path)
        load_model_state(model, tensors)
    return model


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    ds = pipeline.build_dataset(cfg)
    out = _out(args, "dataset.xjds")
    save_dataset(ds, out)
    counts = np.bincount(ds.labels, minlength=int(ds.labels.max()) + 1)
    print(f"wrote {out}: {len(ds)} objects ({len(ds.train())} train / {len(ds.test())} test), "
          f"per class {counts.tolist()}")
    return EXIT_OK


def cmd_build_cache(args) -> int:
    cfg = _config(args)
    ds = _read(load_dataset, args.dataset)
    grid = cfg.grid.build()
    teacher = make_teacher(cfg.teacher)
    out = _out(args, "cache.xjec")
    t0 = time.perf_counter()
    cache = build_cache(ds, grid, teacher, out)
    dt = time.perf_counter() - t0
    print(f"wrote {out}: {len(cache)} records ({cache.n_objects} objects x {cache.views} views), "
          f"{len(cache) / max(dt, 1e-9):.1f} records/s")
    cache.close()
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    ds = _read(load_dataset, args.dataset).train()
    grid = cfg.grid.build()
    if args.cache:
        targets = _read(EmbeddingCache, args.cache)
        if targets.views != len(grid) or targets.dim != cfg.teacher.dim:
            raise ConfigError(f"cache {args.cache} has {targets.views} views of width {targets.dim}, "
                              f"config expects {len(grid)} x {cfg.teacher.dim}")
    else:
        targets = TeacherTargets(ds, grid, make_teacher(cfg.teacher))
    out = _out(args, "run")
    out.mkdir(parents=True, exist_ok=True)
    log = (lambda r: print(f"step {r.step} epoch {r.epoch} loss {r.loss:.6f} lr {r.lr:.3e}")) if args.verbose else None
    result = pipeline.run_pretrain(cfg, ds, targets, timing=args.timing, workers=_threads(args), log=log)
    save_checkpoint(out / "checkpoint.xjck", model_state(result.model), cfg.digest())
    (out / "loss.csv").write_text(history_csv(result.history))
    (out / "config.json").write_text(dump_config(cfg))
    last = result.history[-1].loss if result.history else float("nan")
    print(f"wrote {out}: {len(result.history)} steps, final loss {last:.6f}, config {cfg.hash()[:16]}")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = _config(args)
    ds = _read(load_dataset, args.dataset)
    model = _load_model(cfg, args.checkpoint)
    torch.set_num_threads(1)
    result = pipeline.probe(cfg, model, ds)
    report = {"config_hash": cfg.hash(), "seeds": [cfg.train.seed], "probe": result.to_dict()}
    print(f"linear probe: train {result.train_accuracy:.4f} test {result.test_accuracy:.4f}")
    ok = True
    if args.baseline:
        base = pipeline.random_init_probes(cfg, ds)
        accs = [b.test_accuracy for b in base]
        report["random_init"] = {"seeds": list(range(len(base))), "test_accuracy": accs,
                                 "mean": float(np.mean(accs))}
        gap = result.test_accuracy - float(np.mean(accs))
        report["gap"] = gap
        print(f"random-init mean {np.mean(accs):.4f}, gap {100 * gap:.2f} points")
        ok = gap >= 0.10
    write_report(_out(args, "probe.json"), report)
    _check(args, result.test_accuracy >= args.min_accuracy and ok,
           f"probe accuracy {result.test_accuracy:.4f} (min {args.min_accuracy}"
           + (", gap >= 10 points)" if args.baseline else ")"))
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    ds = _read(load_dataset, args.dataset)
    model = _load_model(cfg, args.checkpoint)
    e = cfg.eval
    ft = FinetuneConfig(epochs=e.finetune_epochs, batch_size=e.finetune_batch_size, lr=e.finetune_lr,
                        weight_decay=e.finetune_weight_decay, head_only=e.head_only or args.head_only,
                        seed=cfg.train.seed)
    result = finetune(model, ds, ft, config_hash=cfg.hash())
    write_report(_out(args, "finetune.json"), {"config_hash": cfg.hash(), "seeds": [cfg.train.seed],
                                               "finetune": result.to_dict()})
    print(f"fine-tune ({'head only' if ft.head_only else 'full'}): train {result.train_accuracy:.4f} "
          f"test {result.test_accuracy:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    a = cfg.analysis
    loss_fn, params, _ = tiny_stack_closure(seed=cfg.train.seed)
    res = grad_check(loss_fn, params, a.gradcheck_eps, a.gradcheck_coords, seed=cfg.train.seed)
    print(f"max relative error {res.max_rel_error:.3e} over {res.checked} coordinates "
          f"(worst: {res.worst_param})")
    if args.out:
        write_report(_out(args, "gradcheck.json"), {"config_hash": cfg.hash(), "seeds": [cfg.train.seed],
                                                    "max_rel_error": res.max_rel_error,
                                                    "worst_param": res.worst_param,
                                                    "per_param": res.per_param})
    ok = res.max_rel_error < a.gradcheck_tolerance
    print(("PASS" if ok else "FAIL") + f" gradient check (tolerance {a.gradcheck_tolerance:g})")
    return EXIT_OK if ok else EXIT_ASSERT


def cmd_gradvar(args) -> int:
    cfg = _config(args)
    a = cfg.analysis
    torch.set_num_threads(1)
    pose = gradient_variance_experiment(a.gradvar_shapes, a.gradvar_poses, a.gradvar_seeds,
                                        pose_gain=cfg.teacher.pose_gain or 1.0, seed0=cfg.train.seed)
    flat = gradient_variance_experiment(a.gradvar_shapes, a.gradvar_poses, a.gradvar_seeds,
                                        pose_gain=0.0, seed0=cfg.train.seed)
    write_report(_out(args, "gradvar.json"), {"config_hash": cfg.hash(), "pose_teacher": pose.to_dict(),
                                              "pose_free_teacher": flat.to_dict()})
    need = int(np.ceil(0.9 * a.gradvar_seeds))
    print(f"pose teacher: conditioned trace lower in {pose.wins}/{a.gradvar_seeds} seeds")
    print(f"pose-free teacher: relative gap {flat.relative_gap:.4f}")
    _check(args, pose.wins >= need, f"conditioning lowers gradient variance in >= {need} seeds")
    _check(args, flat.relative_gap < 0.05, "pose-free teacher gap < 5%")
    return EXIT_OK


def _parse_grid(text: Optional[str]):
    if text is None:
        return None
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = [v.strip() for v in text.split(",") if v.strip()]
    if not isinstance(value, list):
        raise ConfigError("--grid must be a JSON list or a comma-separated list")
    return value


def cmd_sweep(args) -> int:
    cfg = _config(args)
    axis = args.axis or cfg.analysis.sweep_axis
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    grid = _parse_grid(args.grid) or cfg.analysis.sweep_grid or DEFAULT_GRIDS[axis]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else cfg.analysis.sweep_seeds
    out = _out(args, "sweep")
    out.mkdir(parents=True, exist_ok=True)
    work = Path(args.workdir) if args.workdir else out
    log = (lambda r: print(f"{r.axis}={r.value} seed {r.seed}: loss {r.final_loss:.5f} "
                           f"probe {r.probe_accuracy:.4f} epoch {r.epoch_wall_ms:.0f} ms"))
    report = run_sweep(axis, grid, cfg, seeds, work, workers=_threads(args), log=log)
    stem = f"sweep-{axis}-{cfg.hash()[:16]}"
    (out / f"{stem}.csv").write_text(report.csv())
    (out / f"{stem}.timing.csv").write_text(report.timing_csv())
    write_report(out / f"{stem}.json", report.summary())
    print(f"wrote {out / stem}.csv ({len(report.rows)} rows)")
    return EXIT_OK


def _read_sweep_csv(path) -> List[dict]:
    import csv

    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows or set(SWEEP_COLUMNS) - set(rows[0]):
        raise FileFormatError(f"{path}: not a sweep table")
    return rows


def render_table(rows: List[dict]) -> str:
    groups = {}
    for r in rows:
        groups.setdefault((r["axis"], r["value"]), []).append(r)
    lines = [f"{'axis':<14}{'value':<16}{'n':>3}{'final_loss':>14}{'sem':>10}{'probe_acc':>11}"]
    for (axis, value), rs in groups.items():
        loss = np.array([float(r["final_loss"]) for r in rs])
        acc = np.array([float(r["probe_accuracy"]) for r in rs])
        sem = loss.std(ddof=1) / np.sqrt(len(loss)) if len(loss) > 1 else 0.0
        lines.append(f"{axis:<14}{value:<16}{len(rs):>3}{loss.mean():>14.5f}{sem:>10.5f}{acc.mean():>11.4f}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        rows += _read_sweep_csv(path)
    text = render_table(rows)
    ok = True
    if args.baseline:
        base = json.loads(Path(args.baseline).read_text())
        tol = float(base.get("tolerance", 0.05))
        lines = []
        for key, expect in base.get("final_loss", {}).items():
            axis, value = key.split("=", 1)
            got = [float(r["final_loss"]) for r in rows if r["axis"] == axis and r["value"] == value]
            if not got:
                lines.append(f"MISSING {key}")
                ok = False
                continue
            mean = float(np.mean(got))
            good = abs(mean - expect) <= tol * abs(expect)
            ok &= good
            lines.append(f"{'ok  ' if good else 'DIFF'} {key}: {mean:.5f} vs baseline {expect:.5f}")
        text += "\n".join(lines) + ("\n" if lines else "")
    sys.stdout.write(text)
    if args.out:
        _out(args, "report.txt").write_text(text)
    _check(args, ok, "sweep results within baseline tolerance")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON (defaults when omitted)")
    common.add_argument("--seed", type=int, help="one seed for data, teacher and training")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--assert", dest="assert_", action="store_true",
                        help="exit 1 when an acceptance check fails")
    common.add_argument("--threads", type=int, help="preprocessing workers (env XJEPA_THREADS)")
    common.add_argument("--views", help="view grid, e.g. spherical, cylindrical:6x6, fixed-pitch:15:6")

    p = argparse.ArgumentParser(prog="xjepa", description="Cross-modal point-cloud JEPA pretraining toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset").set_defaults(fn=cmd_gen_data)

    c = sub.add_parser("build-cache", parents=[common], help="precompute teacher targets")
    c.add_argument("--dataset", required=True)
    c.set_defaults(fn=cmd_build_cache)

    c = sub.add_parser("pretrain", parents=[common], help="pretrain encoder and predictor")
    c.add_argument("--dataset", required=True)
    c.add_argument("--cache", help="embedding cache; the teacher runs on the fly when omitted")
    c.add_argument("--timing", action="store_true", help="record per-step wall time in the loss table")
    c.add_argument("--verbose", action="store_true")
    c.set_defaults(fn=cmd_pretrain)

    c = sub.add_parser("probe", parents=[common], help="linear probe on frozen features")
    c.add_argument("--dataset", required=True)
    c.add_argument("--checkpoint", help="random initialization when omitted")
    c.add_argument("--baseline", action="store_true", help="also probe random-init encoders")
    c.add_argument("--min-accuracy", type=float, default=0.9)
    c.set_defaults(fn=cmd_probe)

    c = sub.add_parser("finetune", parents=[common], help="fine-tune with an MLP head")
    c.add_argument("--dataset", required=True)
    c.add_argument("--checkpoint")
    c.add_argument("--head-only", action="store_true")
    c.set_defaults(fn=cmd_finetune)

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check").set_defaults(fn=cmd_gradcheck)
    sub.add_parser("gradvar", parents=[common], help="gradient-variance experiment").set_defaults(fn=cmd_gradvar)

    c = sub.add_parser("sweep", parents=[common], help="ablation sweep over one axis")
    c.add_argument("--axis", choices=SWEEP_AXES)
    c.add_argument("--grid", help="JSON list or comma-separated values")
    c.add_argument("--seeds", help="comma-separated seeds")
    c.add_argument("--workdir", help="where caches are kept (defaults to --out)")
    c.set_defaults(fn=cmd_sweep)

    c = sub.add_parser("report", parents=[common], help="summarize sweep tables")
    c.add_argument("inputs", nargs="+")
    c.add_argument("--baseline", help="JSON with stored final losses and a relative tolerance")
    c.set_defaults(fn=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AssertionFailed as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT


if __name__ == "__main__":
    sys.exit(main())
