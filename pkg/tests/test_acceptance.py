"""End-to-end acceptance checks, one test per criterion, each printing a PASS/FAIL line."""

import hashlib
import json
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from golden_files import GOLDEN, NAMES, build
from xjepa.analysis import grad_check, gradient_variance_experiment, tiny_stack_closure
from xjepa.cli import main
from xjepa.dataset import gen_dataset
from xjepa.evaluation import extract_features, linear_probe
from xjepa.geometry import CameraPose, camera_position, make_view_grid, rotation_matrix
from xjepa.model import EncoderConfig, PredictorConfig, build_model, count_params, variant_configs
from xjepa.teacher import SlowTeacher, SyntheticTeacher, TeacherConfig, TeacherTargets, build_cache
from xjepa.training import AdamState, TrainConfig, pretrain, train_step

pytestmark = pytest.mark.slow

# Reduced model used where a criterion does not name a configuration.
MINI_ENC = EncoderConfig(dim=96, layers=2, heads=4, num_groups=32, group_size=16, tokenizer_widths=(32, 64, 96),
                         pos_hidden=32, variant="mini")
MINI_PRED = PredictorConfig(dim=96, layers=2, heads=4, teacher_dim=768)


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _sem(x):
    x = np.asarray(x, dtype=np.float64)
    return float(x.std(ddof=1) / np.sqrt(len(x)))


def _last_epoch_mean(history):
    last = history[-1].epoch
    return float(np.mean([h.loss for h in history if h.epoch == last]))


@pytest.fixture(scope="module")
def mini_data(tmp_path_factory):
    ds = gen_dataset(16, seed=0, test_fraction=0.5).train()
    grid = make_view_grid()
    teacher = SyntheticTeacher()
    cache = build_cache(ds, grid, teacher, tmp_path_factory.mktemp("mini") / "cache.xjec")
    return ds, grid, teacher, cache


def test_1_parameter_budget():
    enc, total = count_params(*variant_configs("base"))
    ok = abs(enc - 8.5e6) <= 0.1 * 8.5e6 and abs(total - 14.1e6) <= 0.1 * 14.1e6
    verdict(1, ok, f"encoder {enc / 1e6:.3f}M (8.5M +-10%), total {total / 1e6:.3f}M (14.1M +-10%)")


def test_2_gradient_correctness():
    enc, pred = variant_configs("tiny", 8)
    assert (enc.dim, enc.layers, pred.layers, enc.num_groups, enc.group_size) == (16, 2, 2, 8, 4)
    t0 = time.perf_counter()
    fn, params, model = tiny_stack_closure()
    assert all(p.dtype == torch.float64 for p in params.values())
    res = grad_check(fn, params, coords_per_param=200)
    dt = time.perf_counter() - t0
    verdict(2, res.max_rel_error < 1e-4 and dt < 60,
            f"max relative error {res.max_rel_error:.2e} over {res.checked} coordinates in {dt:.1f}s (< 1e-4, < 1 min)")


def test_3_geometry_exactness():
    rng = np.random.default_rng(0)
    worst_orth = worst_det = worst_dist = 0.0
    for yaw, pitch, roll, r, cx, cy, cz in zip(*rng.uniform(-360, 360, (3, 1000)), rng.uniform(0.1, 10, 1000),
                                                *rng.uniform(-5, 5, (3, 1000))):
        R = rotation_matrix(yaw, pitch, roll)
        worst_orth = max(worst_orth, np.abs(R.T @ R - np.eye(3)).max())
        worst_det = max(worst_det, abs(np.linalg.det(R) - 1))
        p = camera_position(CameraPose(yaw, pitch, radius=r, center=(cx, cy, cz)))
        worst_dist = max(worst_dist, abs(np.linalg.norm(p - np.array([cx, cy, cz])) - r) / r)
    examples = [
        np.abs(rotation_matrix(0, 0, 0) - np.eye(3)).max(),
        np.abs(rotation_matrix(90, 0, 0) - np.array([[0, 0, 1], [0, 1, 0], [-1, 0, 0]])).max(),
        np.abs(rotation_matrix(0, 90, 0) - np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]])).max(),
        np.abs(camera_position(CameraPose(0, 0, radius=2)) - [0, 0, 2]).max(),
        np.abs(camera_position(CameraPose(90, 0, radius=2)) - [2, 0, 0]).max(),
        np.abs(camera_position(CameraPose(0, 90, radius=2, center=(1, 1, 1))) - [1, -1, 1]).max(),
    ]
    ok = worst_orth < 1e-9 and worst_det < 1e-9 and worst_dist < 1e-9 and max(examples) <= 1e-12
    verdict(3, ok, f"|R^T R - I| {worst_orth:.1e}, |det - 1| {worst_det:.1e}, camera distance rel {worst_dist:.1e}, "
                   f"worst example {max(examples):.1e}")


def test_4_cache_correctness_and_benefit(mini_data):
    ds, grid, teacher, cache = mini_data
    t0 = time.perf_counter()
    cfg = TrainConfig(epochs=25, batch_size=32, latent_mode="pose_hist", seed=0)
    cached = [h.loss for h in pretrain(ds, cache, grid, cfg, MINI_ENC, MINI_PRED).history]
    live = [h.loss for h in pretrain(ds, TeacherTargets(ds, grid, teacher), grid, cfg, MINI_ENC, MINI_PRED).history]
    same = len(cached) == 50 and cached == live

    short = TrainConfig(epochs=1, batch_size=32, max_steps=2, latent_mode="pose_hist", seed=0)
    slow = TeacherTargets(ds, grid, SlowTeacher(teacher, 10.0))
    t_cached = sum(h.wall_ms for h in pretrain(ds, cache, grid, short, MINI_ENC, MINI_PRED, timing=True).history)
    t_slow = sum(h.wall_ms for h in pretrain(ds, slow, grid, short, MINI_ENC, MINI_PRED, timing=True).history)
    speedup = t_slow / t_cached
    verdict(4, same and speedup >= 5,
            f"50-step loss sequences identical: {same}; cached throughput {speedup:.1f}x uncached at batch 32 "
            f"with 10 ms teacher latency (>= 5x); {time.perf_counter() - t0:.0f}s")


def test_5_latent_information_ordering(mini_data):
    ds, grid, _, cache = mini_data
    t0 = time.perf_counter()
    finals = {}
    for mode in ("none", "pose", "pose_hist"):
        finals[mode] = [_last_epoch_mean(pretrain(ds, cache, grid, TrainConfig(epochs=30, batch_size=16,
                                                                               latent_mode=mode, seed=s),
                                                  MINI_ENC, MINI_PRED).history) for s in range(5)]
    mean = {m: float(np.mean(v)) for m, v in finals.items()}
    sem = {m: _sem(v) for m, v in finals.items()}
    gaps = []
    for lo, hi in (("pose_hist", "pose"), ("pose", "none")):
        gap = mean[hi] - mean[lo]
        gaps.append(gap >= 3 * np.hypot(sem[hi], sem[lo]))
    ok = mean["pose_hist"] < mean["pose"] < mean["none"] and all(gaps)
    verdict(5, ok, "final loss " + ", ".join(f"{m} {mean[m]:.4f}+-{sem[m]:.4f}" for m in mean)
            + f"; ordering pose_hist < pose < none with gaps >= 3 SE: {ok}; {time.perf_counter() - t0:.0f}s")


def test_6_gradient_variance():
    t0 = time.perf_counter()
    pose = gradient_variance_experiment(n_shapes=8, n_poses=12, n_seeds=20, pose_gain=1.0)
    flat = gradient_variance_experiment(n_shapes=8, n_poses=12, n_seeds=20, pose_gain=0.0)
    dt = time.perf_counter() - t0
    verdict(6, pose.wins >= 18 and flat.relative_gap < 0.05,
            f"conditioned trace lower in {pose.wins}/20 seeds (>= 18); pose-free teacher relative gap "
            f"{flat.relative_gap:.3f} (< 0.05); {dt:.0f}s")


def test_7_representation_quality(tmp_path):
    ds = gen_dataset(300, seed=0, test_fraction=1 / 3)
    train, test = ds.train(), ds.test()
    assert len(train) == 1600 and len(test) == 800
    grid = make_view_grid()
    cache = build_cache(train, grid, SyntheticTeacher(), tmp_path / "cache.xjec")
    enc, pred = variant_configs("base")
    cfg = TrainConfig(epochs=10, batch_size=32, max_steps=120, latent_mode="pose_hist", seed=0)
    t0 = time.perf_counter()
    model = pretrain(train, cache, grid, cfg, enc, pred).model
    minutes = (time.perf_counter() - t0) / 60

    def probe(m):
        return linear_probe(extract_features(m, train), extract_features(m, test)).test_accuracy

    acc = probe(model)
    random_init = [probe(build_model(enc, pred, seed=s)) for s in range(5)]
    gap = acc - float(np.mean(random_init))
    verdict(7, minutes <= 10 and acc >= 0.90 and gap >= 0.10,
            f"pretrained in {minutes:.1f} min (<= 10), probe {100 * acc:.2f}% (>= 90%), random-init 5-seed mean "
            f"{100 * np.mean(random_init):.2f}%, gap {100 * gap:+.2f} points (>= +10)")


def _median_step_seconds(cfg, batch, targets, grid, enc, pred, reps=3):
    model = build_model(enc, pred, seed=0)
    state = AdamState.zeros_like(list(model.parameters()))
    times = []
    for k in range(reps + 1):
        t0 = time.perf_counter()
        train_step(batch, targets, model, state, cfg, grid, k, 1e-4)
        times.append(time.perf_counter() - t0)
    return float(np.median(times[1:])), model.encoder.forward_count, reps + 1


@pytest.fixture(scope="module")
def base_batch(tmp_path_factory):
    ds = gen_dataset(2, seed=0, test_fraction=0.5)
    grid = make_view_grid()
    cache = build_cache(ds, grid, SyntheticTeacher(), tmp_path_factory.mktemp("base") / "cache.xjec")
    return [(o, c) for o, c, _ in ds][:8], grid, cache


def test_8_masking_trend(tmp_path, base_batch):
    ds = gen_dataset(60, seed=0, test_fraction=1 / 3)
    train, test = ds.train(), ds.test()
    grid = make_view_grid()
    cache = build_cache(train, grid, SyntheticTeacher(), tmp_path / "cache.xjec")
    acc = {}
    for ratio in (0.0, 0.75):
        runs = []
        for s in range(3):
            m = pretrain(train, cache, grid, TrainConfig(epochs=15, batch_size=16, mask_ratio=ratio, seed=s),
                         MINI_ENC, MINI_PRED).model
            runs.append(linear_probe(extract_features(m, train), extract_features(m, test)).test_accuracy)
        acc[ratio] = runs

    batch, bgrid, bcache = base_batch
    enc, pred = variant_configs("base")
    times = [_median_step_seconds(TrainConfig(mask_ratio=r), batch, bcache, bgrid, enc, pred)[0]
             for r in (0.0, 0.3, 0.5, 0.75)]
    decreasing = all(a > b for a, b in zip(times, times[1:]))
    per_seed = {r: "/".join(f"{100 * a:.1f}" for a in runs) for r, runs in acc.items()}
    acc = {r: float(np.mean(runs)) for r, runs in acc.items()}
    verdict(8, acc[0.0] >= acc[0.75] and decreasing,
            f"probe accuracy mask 0 {100 * acc[0.0]:.2f}% ({per_seed[0.0]}) vs mask 0.75 {100 * acc[0.75]:.2f}% "
            f"({per_seed[0.75]}), 3-seed means; "
            "base step seconds " + " > ".join(f"{t:.3f}" for t in times))


def test_9_parallel_view_cost(base_batch):
    batch, grid, cache = base_batch
    enc, pred = variant_configs("base")
    t1, n1, s1 = _median_step_seconds(TrainConfig(views_per_step=1), batch, cache, grid, enc, pred)
    t36, n36, s36 = _median_step_seconds(TrainConfig(views_per_step=36), batch, cache, grid, enc, pred)
    counts_ok = n1 == len(batch) * s1 and n36 == len(batch) * s36
    verdict(9, t36 <= 1.6 * t1 and counts_ok,
            f"step time L=36 {t36:.3f}s vs L=1 {t1:.3f}s (ratio {t36 / t1:.2f} <= 1.6); "
            f"encoder forwards per object per step exactly 1: {counts_ok}")


CLI_CONFIG = {
    "dataset": {"n_per_class": 6, "n_points": 256, "test_fraction": 0.5},
    "teacher": {"dim": 16},
    "model": {"variant": "tiny"},
    "train": {"latent_mode": "pose", "epochs": 2, "batch_size": 8},
    "eval": {"random_baseline_seeds": 2, "finetune_epochs": 1},
    "analysis": {"gradcheck_coords": 5, "gradvar_shapes": 2, "gradvar_poses": 3, "gradvar_seeds": 1,
                 "sweep_seeds": [0, 1]},
}


def _run_all_commands(root, cfg_path):
    c = ["--config", str(cfg_path), "--seed", "5"]
    ds, cache, run = root / "ds.xjds", root / "cache.xjec", root / "run"
    codes = [
        main(["gen-data", *c, "--out", str(ds)]),
        main(["build-cache", *c, "--dataset", str(ds), "--out", str(cache)]),
        main(["pretrain", *c, "--dataset", str(ds), "--cache", str(cache), "--out", str(run)]),
        main(["probe", *c, "--dataset", str(ds), "--checkpoint", str(run / "checkpoint.xjck"), "--baseline",
              "--min-accuracy", "0", "--out", str(root / "probe.json")]),
        main(["finetune", *c, "--dataset", str(ds), "--checkpoint", str(run / "checkpoint.xjck"),
              "--out", str(root / "finetune.json")]),
        main(["gradcheck", *c, "--out", str(root / "gradcheck.json")]),
        main(["gradvar", *c, "--out", str(root / "gradvar.json")]),
        main(["sweep", *c, "--axis", "latent", "--grid", "none,pose", "--out", str(root / "sweep")]),
    ]
    tables = sorted(str(p) for p in (root / "sweep").glob("sweep-*[0-9a-f].csv"))
    codes.append(main(["report", *tables, "--out", str(root / "report.txt")]))
    return codes


def test_10_determinism(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(CLI_CONFIG))
    digests = []
    for name in ("a", "b"):
        root = tmp_path / name
        root.mkdir()
        codes = _run_all_commands(root, cfg_path)
        assert codes == [0] * len(codes), codes
        digests.append({str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
                        for p in sorted(root.rglob("*")) if p.is_file() and not p.name.endswith(".timing.csv")})
    same = digests[0] == digests[1]
    verdict(10, same and len(digests[0]) >= 12,
            f"{len(digests[0])} output files (checkpoint, CSVs, reports) byte-identical across repeated runs: {same}")


def test_11_format_stability(tmp_path):
    from xjepa.dataset import load_dataset, save_dataset
    from xjepa.model import load_checkpoint, save_checkpoint
    from xjepa.teacher import EmbeddingCache

    build(tmp_path / "fresh")
    golden = all((tmp_path / "fresh" / n).read_bytes() == (GOLDEN / n).read_bytes() for n in NAMES)
    save_dataset(load_dataset(GOLDEN / "dataset.xjds"), tmp_path / "d.xjds")
    save_checkpoint(tmp_path / "c.xjck", *load_checkpoint(GOLDEN / "checkpoint.xjck"))
    ds = load_dataset(GOLDEN / "dataset.xjds")
    with EmbeddingCache(GOLDEN / "cache.xjec") as cache:
        records = {k: cache.read(*k) for k in cache.index}
    teacher = SyntheticTeacher(TeacherConfig(dim=8, seed=11))
    build_cache(ds, make_view_grid(yaw_count=2, pitch_count=2), teacher, tmp_path / "cache.xjec").close()
    with EmbeddingCache(tmp_path / "cache.xjec") as cache:
        cache_ok = all(cache.read(*k)[0].tobytes() == v[0].tobytes() and cache.read(*k)[1].tobytes() == v[1].tobytes()
                       for k, v in records.items())
    round_trip = ((tmp_path / "d.xjds").read_bytes() == (GOLDEN / "dataset.xjds").read_bytes()
                  and (tmp_path / "c.xjck").read_bytes() == (GOLDEN / "checkpoint.xjck").read_bytes() and cache_ok)
    verdict(11, golden and round_trip,
            f"regenerated files match committed golden files: {golden}; bit-exact round trips: {round_trip}")
