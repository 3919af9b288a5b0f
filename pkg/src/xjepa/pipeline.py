"""End-to-end plumbing shared by the command line and the sweeps."""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .config import ExperimentConfig
from .dataset import SyntheticDataset, gen_dataset
from .evaluation import ProbeResult, extract_features, linear_probe
from .model import build_model
from .teacher import EmbeddingCache, TeacherTargets, build_cache, make_teacher
from .training import PretrainResult, pretrain


def build_dataset(cfg: ExperimentConfig) -> SyntheticDataset:
    d = cfg.dataset
    return gen_dataset(d.n_per_class, d.seed, d.test_fraction, d.n_points, d.orientation, d.noise)


def cache_file(workdir, cfg: ExperimentConfig, dataset: SyntheticDataset) -> Path:
    """Cache location keyed by teacher, view grid and the exact object set."""
    teacher = make_teacher(cfg.teacher)
    h = hashlib.sha256(teacher.fingerprint())
    h.update(cfg.grid.views.encode())
    h.update(np.asarray(dataset.object_ids, dtype="<u8").tobytes())
    h.update(str(dataset.seed).encode())
    return Path(workdir) / f"cache-{h.hexdigest()[:16]}.bin"


def ensure_cache(cfg: ExperimentConfig, dataset: SyntheticDataset, path) -> EmbeddingCache:
    path = Path(path)
    if path.exists():
        return EmbeddingCache(path)
    teacher = make_teacher(cfg.teacher)
    return build_cache(dataset, cfg.grid.build(), getattr(teacher, "inner", teacher), path)


def target_source(cfg: ExperimentConfig, dataset: SyntheticDataset, workdir=None, cached: bool = True):
    if cached:
        if workdir is None:
            raise ValueError("a working directory is needed for the cache")
        return ensure_cache(cfg, dataset, cache_file(workdir, cfg, dataset))
    return TeacherTargets(dataset, cfg.grid.build(), make_teacher(cfg.teacher))


def run_pretrain(cfg: ExperimentConfig, dataset: SyntheticDataset, targets, timing: bool = False,
                 workers: int = 1, log=None) -> PretrainResult:
    enc, pred = cfg.model_configs()
    return pretrain(dataset, targets, cfg.grid.build(), cfg.train, enc, pred, timing=timing,
                    workers=workers, log=log)


def probe(cfg: ExperimentConfig, model, dataset: SyntheticDataset) -> ProbeResult:
    train = extract_features(model, dataset.train())
    test = extract_features(model, dataset.test())
    return linear_probe(train, test, cfg.eval.reg_lambda, cfg.hash())


def random_init_probes(cfg: ExperimentConfig, dataset: SyntheticDataset,
                       seeds: Optional[List[int]] = None) -> List[ProbeResult]:
    """Probe results for untrained encoders, one per initialization seed."""
    enc, pred = cfg.model_configs()
    seeds = list(range(cfg.eval.random_baseline_seeds)) if seeds is None else seeds
    out = []
    for s in seeds:
        torch.set_num_threads(1)
        out.append(probe(cfg, build_model(enc, pred, seed=s), dataset))
    return out
