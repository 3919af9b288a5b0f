"""Numerical gradient checks, gradient-variance and view-consistency studies, ablation sweeps."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .geometry import AugmentConfig, ViewGrid, augment, make_view_grid
from .model import (
    CrossModel,
    EncoderConfig,
    PredictorConfig,
    build_model,
    conditioning_tokens,
    pool_s_p,
    smooth_l1,
)
from .teacher import SyntheticTeacher, TeacherConfig, object_pose
from .tokenizer import group_points
from .training import AdamState, adam_step

# ---------------------------------------------------------------- gradient check

# Below this magnitude float64 rounding in a central difference dominates, so the
# comparison becomes absolute (about 1e-10 at the default tolerance).
REL_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    checked: int
    per_param: Dict[str, float] = field(default_factory=dict)


def _coords(t: torch.Tensor, grad: torch.Tensor, n: int, rng: np.random.Generator) -> np.ndarray:
    size = t.numel()
    if size <= n:
        return np.arange(size)
    picks = rng.choice(size, size=n, replace=False)
    top = int(torch.argmax(grad.abs().reshape(-1)))
    return np.unique(np.append(picks, top))


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Dict[str, torch.Tensor], eps: float = 1e-5,
               coords_per_param: int = 50, seed: int = 0) -> GradCheckResult:
    """Compare autograd with central differences on sampled coordinates of each parameter.

    Relative error is ``|a - n| / max(|a|, |n|, REL_FLOOR)``. Each tensor contributes up to
    ``coords_per_param`` random coordinates plus its largest-gradient coordinate.
    """
    names = list(params)
    tensors = [params[k] for k in names]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst, worst_name, checked, per = 0.0, "", 0, {}
    with torch.no_grad():
        for name, t, g in zip(names, tensors, grads):
            g = torch.zeros_like(t) if g is None else g
            flat, gflat = t.view(-1), g.reshape(-1)
            err = 0.0
            for i in _coords(t, g, coords_per_param, rng):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                num = (up - down) / (2 * eps)
                ana = gflat[i].item()
                err = max(err, abs(ana - num) / max(abs(ana), abs(num), REL_FLOOR))
                checked += 1
            per[name] = err
            if err > worst:
                worst, worst_name = err, name
    return GradCheckResult(worst, worst_name, checked, per)


def eps_sweep(loss_fn, params, eps_values: Sequence[float], **kw) -> List[float]:
    return [grad_check(loss_fn, params, eps, **kw).max_rel_error for eps in eps_values]


def tiny_stack_closure(seed: int = 0, teacher_dim: int = 8, views: int = 3, mask_ratio: float = 0.0,
                       latent_mode: str = "pose", n_objects: int = 2):
    """Double-precision full-stack loss on the smallest configuration, with fixed inputs.

    Returns ``(loss_fn, named_params, model)``.
    """
    from .dataset import gen_shape
    from .model import mask_keep_indices, variant_configs

    enc, pred = variant_configs("tiny", teacher_dim)
    model = build_model(enc, pred, seed=seed, dtype=torch.float64)
    rng = np.random.default_rng(seed)
    pos = torch.from_numpy(np.stack([gen_shape(c, seed * 31 + c, n=64, noise=0.0).positions
                                     for c in range(n_objects)]).astype(np.float64))
    groups = group_points(pos, enc.groups)
    keep = None
    if mask_ratio > 0:
        keep = torch.as_tensor(np.stack([mask_keep_indices(enc.num_groups, mask_ratio, rng)
                                         for _ in range(n_objects)]))
    yaw = torch.as_tensor(rng.choice([0.0, 60.0, 120.0], size=(n_objects, views)))
    pitch = torch.as_tensor(rng.choice([-36.0, 12.0, 60.0], size=(n_objects, views)))
    z = conditioning_tokens(latent_mode, yaw, pitch, pred.dim, dtype=torch.float64)
    target = torch.as_tensor(rng.normal(0, 0.3, size=(n_objects, views, teacher_dim)))

    def loss_fn():
        tokens, cls = model.encoder(groups, keep)
        out = model.predictor(pool_s_p(tokens, cls), z)
        return smooth_l1(out, target, 1.0).sum(dim=1).mean()

    return loss_fn, dict(model.named_parameters()), model


# ---------------------------------------------------------------- gradient variance


@dataclass
class GradVarReport:
    trace_conditioned: List[float]
    trace_unconditioned: List[float]
    seeds: List[int]
    n_shapes: int
    n_poses: int
    pose_gain: float
    config: dict = field(default_factory=dict)

    @property
    def wins(self) -> int:
        return int(sum(c < u for c, u in zip(self.trace_conditioned, self.trace_unconditioned)))

    @property
    def relative_gap(self) -> float:
        c, u = np.mean(self.trace_conditioned), np.mean(self.trace_unconditioned)
        return float(abs(c - u) / u) if u > 0 else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(wins=self.wins, relative_gap=self.relative_gap)
        return d


@dataclass(frozen=True)
class GradVarConfig:
    dim: int = 32
    encoder_layers: int = 2
    predictor_layers: int = 2
    heads: int = 4
    num_groups: int = 16
    group_size: int = 16
    n_points: int = 512
    teacher_dim: int = 64
    fit_copies: int = 8
    fit_steps: int = 400
    fit_lr: float = 3e-3
    fit_views: int = 6
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.03

    def model_configs(self):
        enc = EncoderConfig(dim=self.dim, layers=self.encoder_layers, heads=self.heads,
                            num_groups=self.num_groups, group_size=self.group_size,
                            tokenizer_widths=(32, 64, 64), pos_hidden=32, variant="gradvar")
        pred = PredictorConfig(dim=self.dim, layers=self.predictor_layers, heads=self.heads,
                               teacher_dim=self.teacher_dim)
        return enc, pred

    @property
    def jitter(self) -> AugmentConfig:
        return AugmentConfig(jitter_sigma=self.jitter_sigma, jitter_clip=self.jitter_clip)


def _grid_tokens(grid: ViewGrid, dim: int) -> torch.Tensor:
    yaw = torch.as_tensor([v[0] for v in grid.views], dtype=torch.float64)
    pitch = torch.as_tensor([v[1] for v in grid.views], dtype=torch.float64)
    return conditioning_tokens("pose", yaw, pitch, dim, dtype=torch.float64)


def _fit_predictor(model: CrossModel, shapes, targets: torch.Tensor, z_all: torch.Tensor,
                   cfg: GradVarConfig, rng: np.random.Generator) -> float:
    """Fit the predictor, encoder frozen at its random init, on jittered copies of ``shapes``.

    Each sampled (copy, view) pair receives the pose token or, with probability
    one half, the zero token. The conditioned inputs learn the full target and
    the zero token learns its pose average, so a single parameter point is a
    fitted predictor for both arms. The fit runs in float32 for speed.
    """
    with torch.no_grad():
        pos = np.stack([augment(c, cfg.jitter, rng)[0].positions for c in shapes for _ in range(cfg.fit_copies)])
        s_p = pool_s_p(*model.encoder(group_points(torch.from_numpy(pos).to(torch.float64),
                                                   model.enc_cfg.groups))).float()
    tgt = targets.repeat_interleave(cfg.fit_copies, dim=0).float()
    z_all = z_all.float()
    n, V = tgt.shape[:2]
    predictor = model.predictor.float()
    params = list(predictor.parameters())
    state = AdamState.zeros_like(params)
    warm = max(1, int(0.05 * cfg.fit_steps))
    loss = torch.zeros(())
    for k in range(cfg.fit_steps):
        views = torch.as_tensor(np.argsort(rng.random((n, V)), axis=1)[:, :cfg.fit_views])
        drop = torch.as_tensor(rng.random((n, cfg.fit_views, 1)) < 0.5)
        z = torch.where(drop, 0.0, z_all[views])
        target = torch.gather(tgt, 1, views[..., None].expand(-1, -1, tgt.shape[-1]))
        loss = smooth_l1(predictor(s_p, z), target).sum(dim=1).mean()
        lr = cfg.fit_lr * min(1.0, (k + 1) / warm) * 0.5 * (1 + np.cos(np.pi * k / cfg.fit_steps))
        adam_step(params, torch.autograd.grad(loss, params), state, lr)
    model.predictor.double()
    return float(loss.detach())


def _encoder_grad(model: CrossModel, groups, z: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    params = list(model.encoder.parameters())
    out = model.predictor(pool_s_p(*model.encoder(groups)), z.reshape(1, 1, -1))
    loss = smooth_l1(out, target.reshape(1, 1, -1)).sum()
    return torch.cat([g.reshape(-1) for g in torch.autograd.grad(loss, params)])


def _across_pose_trace(grads: torch.Tensor) -> float:
    if grads.shape[0] < 2:
        return 0.0
    centered = grads - grads.mean(dim=0, keepdim=True)
    return float((centered * centered).sum() / (grads.shape[0] - 1))


def gradient_variance_experiment(n_shapes: int = 8, n_poses: int = 12, n_seeds: int = 20,
                                 pose_gain: float = 1.0, cfg: GradVarConfig = GradVarConfig(),
                                 seed0: int = 0) -> GradVarReport:
    """Across-pose encoder-gradient covariance trace with and without pose conditioning.

    Per seed: a synthetic teacher with the given pose gain, a random encoder and
    a predictor fitted with conditioning dropout (see :func:`_fit_predictor`).
    Each pose of a shape sees a fresh jittered copy of it, as in training, and
    the target of the clean shape at that pose. Both arms use the same copy,
    parameters and target; only the conditioning token differs.
    """
    from .dataset import NUM_CLASSES, gen_shape

    grid = make_view_grid()
    if not 1 <= n_poses <= len(grid):
        raise ValueError(f"n_poses must be in [1, {len(grid)}]")
    enc, pred = cfg.model_configs()
    z_all = _grid_tokens(grid, pred.dim)
    cond, uncond, seeds, fit_losses = [], [], [], []
    for s in range(seed0, seed0 + n_seeds):
        teacher = SyntheticTeacher(TeacherConfig(dim=cfg.teacher_dim, seed=s, pose_gain=pose_gain))
        model = build_model(enc, pred, seed=s, dtype=torch.float64)
        shapes = [gen_shape(i % NUM_CLASSES, 1_000_000 + s * 1000 + i, n=cfg.n_points) for i in range(n_shapes)]
        targets = torch.as_tensor(np.stack([[teacher.embed(c, object_pose(c, grid, v)) for v in range(len(grid))]
                                            for c in shapes]), dtype=torch.float64)
        rng = np.random.default_rng(np.random.SeedSequence([s, 0x6A7]))
        fit_losses.append(_fit_predictor(model, shapes, targets, z_all, cfg, rng))
        tc, tu = [], []
        for i, shape in enumerate(shapes):
            g_c, g_u = [], []
            for v in rng.choice(len(grid), size=n_poses, replace=False):
                pos = torch.from_numpy(augment(shape, cfg.jitter, rng)[0].positions).to(torch.float64)
                groups = group_points(pos.unsqueeze(0), model.enc_cfg.groups)
                g_c.append(_encoder_grad(model, groups, z_all[v], targets[i, v]))
                g_u.append(_encoder_grad(model, groups, torch.zeros_like(z_all[v]), targets[i, v]))
            tc.append(_across_pose_trace(torch.stack(g_c)))
            tu.append(_across_pose_trace(torch.stack(g_u)))
        cond.append(float(np.mean(tc)))
        uncond.append(float(np.mean(tu)))
        seeds.append(s)
    return GradVarReport(cond, uncond, seeds, n_shapes, n_poses, pose_gain,
                         {**asdict(cfg), "fit_loss": fit_losses})


# ---------------------------------------------------------------- view consistency


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0 or nb == 0:
        return 0.0
    return float((a @ b) / (na * nb))


def _mean_pairwise_corr(columns: np.ndarray) -> float:
    n = columns.shape[1]
    vals = [_corr(columns[:, i], columns[:, j]) for i in range(n) for j in range(i + 1, n)]
    return float(np.mean(vals)) if vals else 0.0


def view_consistency(errors: np.ndarray):
    """``(within_object_corr, across_object_corr)`` for an objects x views residual matrix.

    Within-object: mean correlation, over pairs of views, of the per-object
    errors (high when an object's error persists across its views). Across-object:
    mean correlation, over pairs of objects, of their error profiles across views.
    A zero-variance profile contributes a correlation of 0.
    """
    e = np.asarray(errors, dtype=np.float64)
    if e.ndim != 2:
        raise ValueError("errors must be an objects x views matrix")
    return _mean_pairwise_corr(e), _mean_pairwise_corr(e.T)


@torch.no_grad()
def residual_matrix(model: CrossModel, dataset, targets, grid: ViewGrid, latent_mode: str,
                    beta: float = 1.0, chunk: int = 32) -> np.ndarray:
    """Per-(object, view) smooth-L1 residual of a trained model over the full grid."""
    dtype = next(model.parameters()).dtype
    V = len(grid)
    yaw = torch.as_tensor([g[0] for g in grid.views], dtype=torch.float64)
    pitch = torch.as_tensor([g[1] for g in grid.views], dtype=torch.float64)
    out = np.empty((len(dataset), V))
    for start in range(0, len(dataset), chunk):
        idx = list(range(start, min(start + chunk, len(dataset))))
        pos = torch.from_numpy(np.stack([dataset.clouds[i].positions for i in idx])).to(dtype)
        tokens, cls = model.encoder(group_points(pos, model.enc_cfg.groups))
        s_p = pool_s_p(tokens, cls)
        fetched = [targets.fetch(int(dataset.object_ids[i]), range(V)) for i in idx]
        tgt = torch.as_tensor(np.stack([f[0] for f in fetched])).to(dtype)
        hist = torch.as_tensor(np.stack([f[1] for f in fetched]))
        z = conditioning_tokens(latent_mode, yaw.expand(len(idx), V), pitch.expand(len(idx), V),
                                model.pred_cfg.dim, hist, dtype=dtype)
        out[idx] = smooth_l1(model.predictor(s_p, z), tgt, beta).numpy()
    return out


# ---------------------------------------------------------------- sweeps

SWEEP_AXES = ("latent", "masking", "views", "scale", "sampling", "fixed_pitch", "data_fraction", "cache")
DEFAULT_GRIDS = {
    "latent": ["none", "pose", "pose_hist"],
    "masking": [0.0, 0.3, 0.5, 0.75],
    "views": [1, 6, 12, 36],
    "scale": ["small", "base", "large"],
    "sampling": ["spherical", "cylindrical", "cartesian"],
    "fixed_pitch": [0.0, 15.0, 30.0],
    "data_fraction": [0.25, 0.5, 1.0],
    "cache": [True, False],
}
SWEEP_COLUMNS = ["axis", "value", "seed", "final_loss", "probe_accuracy", "saturation_epoch"]


@dataclass
class SweepRow:
    axis: str
    value: object
    seed: int
    final_loss: float
    probe_accuracy: float
    saturation_epoch: int
    epoch_wall_ms: float = 0.0


@dataclass
class SweepReport:
    axis: str
    grid: list
    seeds: List[int]
    rows: List[SweepRow]
    config_hash: str = ""

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            w.writerow([r.axis, json.dumps(r.value), r.seed, repr(r.final_loss), repr(r.probe_accuracy),
                        r.saturation_epoch])
        return buf.getvalue()

    def timing_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["axis", "value", "seed", "epoch_wall_ms"])
        for r in self.rows:
            w.writerow([r.axis, json.dumps(r.value), r.seed, f"{r.epoch_wall_ms:.3f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        by_value = []
        for v in self.grid:
            rows = [r for r in self.rows if r.value == v]
            by_value.append({
                "value": v,
                "final_loss_mean": float(np.mean([r.final_loss for r in rows])),
                "final_loss_sem": _sem([r.final_loss for r in rows]),
                "probe_accuracy_mean": float(np.mean([r.probe_accuracy for r in rows])),
                "saturation_epoch_mean": float(np.mean([r.saturation_epoch for r in rows])),
            })
        return {"axis": self.axis, "grid": self.grid, "seeds": self.seeds,
                "config_hash": self.config_hash, "results": by_value}


def _sem(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0


def final_loss(history, epochs: int) -> float:
    """Mean training loss over the last epoch that ran."""
    last = max(h.epoch for h in history)
    return float(np.mean([h.loss for h in history if h.epoch == last]))


def saturation_epoch(history, tol: float = 0.05) -> int:
    """First epoch whose mean loss is within ``tol`` of the total drop from the final value."""
    epochs = sorted({h.epoch for h in history})
    means = [np.mean([h.loss for h in history if h.epoch == e]) for e in epochs]
    first, last = means[0], means[-1]
    for e, m in zip(epochs, means):
        if m <= last + tol * (first - last):
            return int(e)
    return int(epochs[-1])


def apply_axis(cfg, axis: str, value):
    """Experiment config with one sweep axis set to ``value``."""
    if axis == "latent":
        return replace(cfg, train=replace(cfg.train, latent_mode=value))
    if axis == "masking":
        return replace(cfg, train=replace(cfg.train, mask_ratio=float(value)))
    if axis == "views":
        return replace(cfg, train=replace(cfg.train, views_per_step=int(value)))
    if axis == "scale":
        return replace(cfg, model=replace(cfg.model, variant=value))
    if axis == "sampling":
        return replace(cfg, grid=replace(cfg.grid, views=str(value)))
    if axis == "fixed_pitch":
        return replace(cfg, grid=replace(cfg.grid, views=f"fixed-pitch:{float(value):g}:6"),
                       train=replace(cfg.train, views_per_step=min(cfg.train.views_per_step, 6)))
    if axis in ("data_fraction", "cache"):
        return cfg
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def _epoch_wall_ms(history) -> float:
    per_epoch: Dict[int, float] = {}
    for h in history:
        per_epoch[h.epoch] = per_epoch.get(h.epoch, 0.0) + h.wall_ms
    return float(np.mean(list(per_epoch.values()))) if per_epoch else 0.0


def run_sweep(axis: str, grid: Optional[list], base_cfg, seeds: Sequence[int], workdir,
              workers: int = 1, log=None) -> SweepReport:
    """Train and probe every (grid value, seed); rows are ordered by grid index, then seed.

    Wall time goes only to the timing table so the main table stays reproducible.
    """
    from . import pipeline

    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    grid = list(DEFAULT_GRIDS[axis] if grid is None else grid)
    dataset = pipeline.build_dataset(base_cfg)
    rows = []
    for value in grid:
        cfg = apply_axis(base_cfg, axis, value)
        train_set = dataset.train()
        if axis == "data_fraction":
            train_set = train_set.fraction(float(value), base_cfg.dataset.seed)
        cached = bool(value) if axis == "cache" else True
        targets = pipeline.target_source(cfg, train_set, workdir, cached=cached)
        for seed in seeds:
            run_cfg = replace(cfg, train=replace(cfg.train, seed=int(seed)))
            result = pipeline.run_pretrain(run_cfg, train_set, targets, timing=True, workers=workers)
            acc = pipeline.probe(run_cfg, result.model, dataset).test_accuracy
            row = SweepRow(axis, value, int(seed), final_loss(result.history, run_cfg.train.epochs), acc,
                           saturation_epoch(result.history), _epoch_wall_ms(result.history))
            rows.append(row)
            if log is not None:
                log(row)
    return SweepReport(axis, grid, [int(s) for s in seeds], rows, base_cfg.hash())
