"""Frozen-feature linear probing and MLP fine-tuning on the synthetic classes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from scipy.optimize import minimize
from torch import nn

from .model import CrossModel, check_normalized, pool_features
from .tokenizer import group_points
from .training import AdamState, adam_step

FEATURE_CHUNK = 32


@dataclass
class FeatureMatrix:
    rows: np.ndarray          # (n, 3D) float64
    labels: np.ndarray        # (n,) int64
    object_ids: np.ndarray    # (n,) uint64

    def __post_init__(self):
        if len(self.rows) != len(self.labels):
            raise ValueError("feature rows and labels differ in length")


def _encode_features(model: CrossModel, positions: torch.Tensor) -> torch.Tensor:
    check_normalized(positions)
    groups = group_points(positions, model.enc_cfg.groups)
    tokens, cls = model.encoder(groups)
    return pool_features(tokens, cls)


@torch.no_grad()
def extract_features(model: CrossModel, dataset, chunk: int = FEATURE_CHUNK) -> FeatureMatrix:
    """``cls + mean + max`` features without masking, one row per object in dataset order.

    Objects are encoded in fixed-size chunks in ascending id order so each row
    depends only on the object set, not on how the dataset is ordered.
    """
    ids = np.asarray(dataset.object_ids, dtype=np.uint64)
    order = np.argsort(ids, kind="stable")
    dtype = next(model.parameters()).dtype
    out = np.empty((len(ids), 3 * model.enc_cfg.dim), dtype=np.float64)
    for start in range(0, len(order), chunk):
        idx = order[start:start + chunk]
        pos = torch.from_numpy(np.stack([dataset.clouds[i].positions for i in idx])).to(dtype)
        out[idx] = _encode_features(model, pos).to(torch.float64).numpy()
    return FeatureMatrix(out, np.asarray(dataset.labels, dtype=np.int64), ids)


@dataclass
class ProbeResult:
    train_accuracy: float
    test_accuracy: float
    confusion: List[List[int]]          # test confusion, rows = true class
    config_hash: str = ""
    reg_lambda: float = 0.0
    iterations: int = 0
    grad_norm: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
            "confusion": self.confusion,
            "config_hash": self.config_hash,
            "reg_lambda": self.reg_lambda,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            **self.extra,
        }


@dataclass
class LogisticModel:
    weights: np.ndarray   # (F, C)
    bias: np.ndarray      # (C,)
    classes: np.ndarray
    iterations: int
    grad_norm: float

    def decision(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.decision(x), axis=1)]


def _softmax_objective(theta, x, y_onehot, lam, F, C):
    w = theta[:F * C].reshape(F, C)
    b = theta[F * C:]
    logits = x @ w + b
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    n = len(x)
    loss = -np.sum(y_onehot * logp) / n + lam * np.sum(w * w)
    resid = (np.exp(logp) - y_onehot) / n
    gw = x.T @ resid + 2.0 * lam * w
    gb = resid.sum(axis=0)
    return loss, np.concatenate([gw.ravel(), gb])


def fit_logistic(x: np.ndarray, y: np.ndarray, reg_lambda: float = 1e-3,
                 max_iter: int = 10_000, gtol: float = 1e-6) -> LogisticModel:
    """Multinomial logistic regression: mean cross-entropy + ``reg_lambda * ||W||^2`` (bias free)."""
    x = np.asarray(x, dtype=np.float64)
    classes, yi = np.unique(np.asarray(y), return_inverse=True)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least two classes in the training set")
    if reg_lambda < 0:
        raise ValueError("reg_lambda must be non-negative")
    F, C = x.shape[1], len(classes)
    onehot = np.eye(C)[yi]
    res = minimize(_softmax_objective, np.zeros(F * C + C), args=(x, onehot, reg_lambda, F, C),
                   jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": gtol, "ftol": 0.0, "maxcor": 20})
    _, grad = _softmax_objective(res.x, x, onehot, reg_lambda, F, C)
    return LogisticModel(res.x[:F * C].reshape(F, C), res.x[F * C:], classes, int(res.nit),
                         float(np.abs(grad).max()))


def confusion_matrix(y_true, y_pred, n_classes: int) -> List[List[int]]:
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return m.tolist()


def standardize(train: FeatureMatrix, test: FeatureMatrix):
    """z-score both matrices with the training split's per-dimension mean and std."""
    mu = train.rows.mean(axis=0)
    sd = train.rows.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (FeatureMatrix((train.rows - mu) / sd, train.labels, train.object_ids),
            FeatureMatrix((test.rows - mu) / sd, test.labels, test.object_ids))


def linear_probe(train: FeatureMatrix, test: FeatureMatrix, reg_lambda: float = 1e-3,
                 config_hash: str = "", n_classes: Optional[int] = None,
                 standardize_features: bool = True) -> ProbeResult:
    """Logistic-regression probe; features are z-scored with training statistics unless disabled."""
    if standardize_features:
        train, test = standardize(train, test)
    clf = fit_logistic(train.rows, train.labels, reg_lambda)
    n_classes = n_classes or int(max(train.labels.max(), test.labels.max()) + 1)
    pred_tr = clf.predict(train.rows)
    pred_te = clf.predict(test.rows)
    return ProbeResult(
        train_accuracy=float(np.mean(pred_tr == train.labels)),
        test_accuracy=float(np.mean(pred_te == test.labels)),
        confusion=confusion_matrix(test.labels, pred_te, n_classes),
        config_hash=config_hash, reg_lambda=reg_lambda,
        iterations=clf.iterations, grad_norm=clf.grad_norm,
    )


class ClassifierHead(nn.Module):
    """Three-layer MLP over pooled features: 3D -> 512 -> 256 -> classes."""

    def __init__(self, in_dim: int, n_classes: int, hidden=(512, 256)):
        super().__init__()
        h1, h2 = hidden
        self.net = nn.Sequential(nn.Linear(in_dim, h1), nn.GELU(), nn.Linear(h1, h2), nn.GELU(),
                                 nn.Linear(h2, n_classes))

    def forward(self, x):
        return self.net(x)


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 0.0
    head_only: bool = False
    hidden: tuple = (512, 256)
    seed: int = 0


def finetune(model: CrossModel, dataset, cfg: FinetuneConfig, n_classes: Optional[int] = None,
             config_hash: str = "") -> ProbeResult:
    """Train a fresh MLP head (and, unless ``head_only``, the encoder) with cross-entropy.

    ``model`` is updated in place when the encoder is trained.
    """
    torch.set_num_threads(1)
    train, test = dataset.train(), dataset.test()
    n_classes = n_classes or int(dataset.labels.max() + 1)
    dtype = next(model.parameters()).dtype
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(cfg.seed)
    try:
        head = ClassifierHead(3 * model.enc_cfg.dim, n_classes, cfg.hidden).to(dtype)
    finally:
        torch.random.set_rng_state(gen_state)
    params = list(head.parameters())
    if not cfg.head_only:
        params += list(model.encoder.parameters())
    state = AdamState.zeros_like(params)

    frozen_train = extract_features(model, train) if cfg.head_only else None
    order_ids = np.argsort(np.asarray(train.object_ids), kind="stable")
    n = len(train)
    for epoch in range(cfg.epochs):
        perm = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xF17E, epoch])).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order_ids[perm[start:start + cfg.batch_size]])
            y = torch.as_tensor(train.labels[idx], dtype=torch.long)
            if frozen_train is not None:
                feats = torch.as_tensor(frozen_train.rows[idx]).to(dtype)
            else:
                pos = torch.from_numpy(np.stack([train.clouds[i].positions for i in idx])).to(dtype)
                feats = _encode_features(model, pos)
            loss = nn.functional.cross_entropy(head(feats), y)
            grads = torch.autograd.grad(loss, params)
            adam_step(params, grads, state, cfg.lr, cfg.weight_decay)

    with torch.no_grad():
        ftr = extract_features(model, train)
        fte = extract_features(model, test)
        pred_tr = head(torch.as_tensor(ftr.rows).to(dtype)).argmax(dim=1).numpy()
        pred_te = head(torch.as_tensor(fte.rows).to(dtype)).argmax(dim=1).numpy()
    return ProbeResult(
        train_accuracy=float(np.mean(pred_tr == ftr.labels)),
        test_accuracy=float(np.mean(pred_te == fte.labels)),
        confusion=confusion_matrix(fte.labels, pred_te, n_classes),
        config_hash=config_hash,
        extra={"head_only": cfg.head_only, "epochs": cfg.epochs},
    )


def write_report(path, report: dict) -> None:
    """Deterministic JSON (sorted keys, fixed indent, trailing newline)."""
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
