"""Pretraining loop: view sampling, per-view smooth-L1 against teacher targets, Adam with warmup and cosine decay."""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch

from .geometry import AugmentConfig, PointCloud, ViewGrid, augment
from .model import (
    LATENT_MODES,
    CrossModel,
    EncoderConfig,
    PredictorConfig,
    build_model,
    check_normalized,
    conditioning_tokens,
    mask_keep_indices,
    pool_s_p,
    smooth_l1,
)
from .tokenizer import group_points

_STREAM_STEP = 0x51E9
_STREAM_SHUFFLE = 0x5F1E


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    weight_decay: float = 1e-6
    warmup_fraction: float = 0.05
    epochs: int = 1
    batch_size: int = 256
    views_per_step: int = 6
    mask_ratio: float = 0.0
    latent_mode: str = "pose_hist"
    beta: float = 1.0
    seed: int = 0
    max_steps: Optional[int] = None
    scale_range: tuple = (0.9, 1.1)
    translate_range: float = 0.05
    jitter_sigma: float = 0.005
    jitter_clip: float = 0.02
    rotation_steps: int = 0

    def __post_init__(self):
        if self.latent_mode not in LATENT_MODES:
            raise ValueError(f"unknown latent_mode {self.latent_mode!r}")
        if not 0 <= self.mask_ratio < 1:
            raise ValueError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.views_per_step < 1:
            raise ValueError("views_per_step must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not 0 <= self.warmup_fraction <= 1:
            raise ValueError("warmup_fraction must be in [0, 1]")

    @property
    def augmentation(self) -> AugmentConfig:
        return AugmentConfig(tuple(self.scale_range), self.translate_range, self.jitter_sigma,
                             self.jitter_clip, self.rotation_steps)


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp from 0 to ``base_lr`` over the warmup fraction, then cosine to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = cfg.warmup_fraction * total_steps
    if step < warm:
        return cfg.base_lr * step / warm
    if total_steps <= warm:
        return cfg.base_lr
    progress = (step - warm) / (total_steps - warm)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: List[torch.Tensor]
    v: List[torch.Tensor]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@torch.no_grad()
def adam_step(params: Sequence[torch.Tensor], grads: Sequence[Optional[torch.Tensor]],
              state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """In-place bias-corrected Adam with decoupled multiplicative weight decay."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    state.t += 1
    c1 = 1.0 - BETA1 ** state.t
    c2 = 1.0 - BETA2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        if weight_decay:
            p.mul_(1.0 - lr * weight_decay)
        m.mul_(BETA1).add_(g, alpha=1.0 - BETA1)
        v.mul_(BETA2).addcmul_(g, g, value=1.0 - BETA2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS))


def sample_views(V_size: int, L: int, rng: np.random.Generator) -> np.ndarray:
    """``L`` distinct view indices drawn uniformly without replacement."""
    if not 1 <= L <= V_size:
        raise ValueError(f"cannot sample {L} distinct views from {V_size}")
    return rng.choice(V_size, size=L, replace=False)


def step_rng(seed: int, step: int, object_id: int) -> np.random.Generator:
    """Per-(step, object) stream, so results do not depend on batch composition or order."""
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAM_STEP, step, object_id]))


@dataclass
class PreparedObject:
    object_id: int
    positions: torch.Tensor     # (N, 3)
    views: np.ndarray           # target view indices in the object's frame
    cond_views: np.ndarray      # view indices as seen from the augmented cloud
    keep: Optional[np.ndarray]


def prepare_object(object_id: int, cloud: PointCloud, grid: ViewGrid, cfg: TrainConfig,
                   step: int, num_groups: int) -> PreparedObject:
    rng = step_rng(cfg.seed, step, object_id)
    aug, k = augment(cloud, cfg.augmentation, rng, grid)
    views = sample_views(len(grid), cfg.views_per_step, rng)
    cond = np.array([grid.shift(int(v), k) for v in views])
    keep = mask_keep_indices(num_groups, cfg.mask_ratio, rng) if cfg.mask_ratio > 0 else None
    return PreparedObject(object_id, torch.from_numpy(np.ascontiguousarray(aug.positions)), views, cond, keep)


def batch_loss(model: CrossModel, prepared: Sequence[PreparedObject], targets, grid: ViewGrid,
               cfg: TrainConfig, groups=None) -> torch.Tensor:
    """Mean over objects of the summed per-view smooth-L1; the encoder runs once per object."""
    dtype = next(model.parameters()).dtype
    pos = torch.stack([p.positions for p in prepared])
    check_normalized(pos)
    if groups is None:
        groups = group_points(pos, model.enc_cfg.groups)
    keep = None
    if prepared[0].keep is not None:
        keep = torch.as_tensor(np.stack([p.keep for p in prepared]))
    tokens, cls = model.encoder(groups, keep)
    s_p = pool_s_p(tokens, cls)
    fetched = [targets.fetch(p.object_id, p.views) for p in prepared]
    target = torch.as_tensor(np.stack([f[0] for f in fetched])).to(dtype)
    hist = torch.as_tensor(np.stack([f[1] for f in fetched]))
    angles = np.array([[grid.views[int(v)] for v in p.cond_views] for p in prepared], dtype=np.float64)
    z = conditioning_tokens(cfg.latent_mode, angles[..., 0], torch.as_tensor(angles[..., 1]),
                            model.pred_cfg.dim, hist, dtype=dtype)
    pred = model.predictor(s_p, z)
    return smooth_l1(pred, target, cfg.beta).sum(dim=1).mean()


def trainable(model: CrossModel) -> List[torch.Tensor]:
    return [p for p in model.parameters() if p.requires_grad]


def train_step(batch, targets, model: CrossModel, state: AdamState, cfg: TrainConfig,
               grid: ViewGrid, step: int, lr: float, pool: Optional[ThreadPoolExecutor] = None) -> float:
    """One optimizer step on ``batch`` (iterable of ``(object_id, cloud)``); returns the loss."""
    items = sorted(((int(o), c) for o, c in batch), key=lambda t: t[0])
    K = model.enc_cfg.num_groups
    prep = lambda it: prepare_object(it[0], it[1], grid, cfg, step, K)  # noqa: E731
    prepared = list(pool.map(prep, items)) if pool is not None else [prep(it) for it in items]
    params = trainable(model)
    loss = batch_loss(model, prepared, targets, grid, cfg)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    adam_step(params, grads, state, lr, cfg.weight_decay)
    return float(loss.detach())


@dataclass(frozen=True)
class LossRecord:
    step: int
    epoch: int
    loss: float
    lr: float
    wall_ms: float


def history_csv(history: Sequence[LossRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "epoch", "loss", "lr", "wall_ms"])
    for r in history:
        w.writerow([r.step, r.epoch, repr(r.loss), repr(r.lr), f"{r.wall_ms:.3f}"])
    return buf.getvalue()


def read_history_csv(text: str) -> List[LossRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [LossRecord(int(r["step"]), int(r["epoch"]), float(r["loss"]), float(r["lr"]),
                       float(r["wall_ms"])) for r in rows]


@dataclass
class PretrainResult:
    model: CrossModel
    history: List[LossRecord] = field(default_factory=list)
    state: Optional[AdamState] = None


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAM_SHUFFLE, epoch])).permutation(n)


def total_steps(n_objects: int, cfg: TrainConfig) -> int:
    steps = cfg.epochs * math.ceil(n_objects / cfg.batch_size)
    return steps if cfg.max_steps is None else min(steps, cfg.max_steps)


def pretrain(dataset, targets, grid: ViewGrid, cfg: TrainConfig, enc: EncoderConfig,
             pred: PredictorConfig, model: Optional[CrossModel] = None, timing: bool = False,
             workers: int = 1, dtype=torch.float32, log=None) -> PretrainResult:
    """Train on every object of ``dataset`` for ``cfg.epochs`` shuffled epochs.

    ``workers`` only parallelizes per-object preprocessing; results are
    identical for any value. ``wall_ms`` is recorded only when ``timing`` is set
    so that histories stay byte-reproducible by default.
    """
    if cfg.views_per_step > len(grid):
        raise ValueError(f"views_per_step {cfg.views_per_step} exceeds grid size {len(grid)}")
    torch.set_num_threads(1)
    if model is None:
        model = build_model(enc, pred, seed=cfg.seed, dtype=dtype)
    state = AdamState.zeros_like(trainable(model))
    n = len(dataset)
    total = total_steps(n, cfg)
    history: List[LossRecord] = []
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = epoch_order(n, cfg.seed, epoch)
            for start in range(0, n, cfg.batch_size):
                if step >= total:
                    break
                idx = order[start:start + cfg.batch_size]
                batch = [(int(dataset.object_ids[i]), dataset.clouds[i]) for i in idx]
                lr = lr_schedule(step + 1, total, cfg)
                t0 = time.perf_counter()
                loss = train_step(batch, targets, model, state, cfg, grid, step, lr, pool)
                wall = (time.perf_counter() - t0) * 1000.0 if timing else 0.0
                history.append(LossRecord(step, epoch, loss, lr, wall))
                if log is not None:
                    log(history[-1])
                step += 1
    finally:
        if pool is not None:
            pool.shutdown()
    return PretrainResult(model, history, state)
