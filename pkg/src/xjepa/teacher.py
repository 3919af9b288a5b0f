"""Frozen synthetic teacher and the one-time indexed embedding cache."""

from __future__ import annotations

import hashlib
import json
import mmap
import os
import struct
import time
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, Optional, Protocol, Tuple

import numpy as np

from .geometry import CameraPose, PointCloud, ViewGrid, scene_radius
from .model import HIST_DIM, color_histogram

CONTENT_DIM = 16
POSE_DIM = 8

CACHE_MAGIC = b"XJEC"
CACHE_VERSION = 1
JOURNAL_MAGIC = b"XJEJ"
_HEADER = struct.Struct("<4sIIIQ")
_INDEX = struct.Struct("<QHQ")
_JOURNAL_HEADER = struct.Struct("<4sII32s")
_OID = struct.Struct("<Q")


class Teacher(Protocol):
    def embed(self, cloud: PointCloud, pose: CameraPose) -> np.ndarray: ...

    def dim(self) -> int: ...

    def fingerprint(self) -> bytes: ...


@dataclass(frozen=True)
class TeacherConfig:
    dim: int = 768
    seed: int = 0
    content_gain: float = 1.0
    pose_gain: float = 1.0
    latency_ms: float = 0.0


def content_features(cloud: PointCloud) -> np.ndarray:
    """Rotation-invariant 16-vector of shape and color statistics.

    Sorted covariance eigenvalues (3), radial mean/std/min/max (4), mean and
    std of |n . r_hat| plus the fraction above 0.9 (3), color mean (3) and
    color std (3).
    """
    pos = np.asarray(cloud.positions, dtype=np.float64)
    centered = pos - pos.mean(axis=0)
    eig = np.sort(np.linalg.eigvalsh(centered.T @ centered / len(pos)))
    radial = np.linalg.norm(centered, axis=1)
    out = [eig, [radial.mean(), radial.std(), radial.min(), radial.max()]]
    if cloud.normals is not None:
        rhat = centered / np.maximum(radial, 1e-12)[:, None]
        align = np.abs(np.sum(np.asarray(cloud.normals, dtype=np.float64) * rhat, axis=1))
        out.append([align.mean(), align.std(), np.mean(align > 0.9)])
    else:
        out.append(np.zeros(3))
    if cloud.colors is not None:
        col = np.asarray(cloud.colors, dtype=np.float64)
        out += [col.mean(axis=0), col.std(axis=0)]
    else:
        out.append(np.zeros(6))
    return np.concatenate([np.asarray(o, dtype=np.float64) for o in out])


def pose_features(yaw: float, pitch: float) -> np.ndarray:
    """sin/cos of yaw, pitch and their doubles (degrees in, 8-vector out)."""
    a = np.radians([yaw, pitch, 2.0 * yaw, 2.0 * pitch])
    return np.concatenate([np.sin(a), np.cos(a)])


@lru_cache(maxsize=1)
def _feature_stats() -> Tuple[np.ndarray, np.ndarray]:
    # Fixed reference population so standardization never depends on the dataset at hand.
    from .dataset import NUM_CLASSES, gen_shape

    feats = np.stack([content_features(gen_shape(c, 10_000 + 97 * i + c, n=1024))
                      for i in range(8) for c in range(NUM_CLASSES)])
    return feats.mean(axis=0), np.maximum(feats.std(axis=0), 1e-6)


def relative_yaw(cloud: PointCloud, pose: CameraPose) -> float:
    """Camera yaw in the object's own frame, reduced to [0, 360)."""
    return float((pose.yaw - cloud.yaw_offset) % 360.0)


class SyntheticTeacher:
    """``embed(S, z) = tanh(W_s phi(S)) + tanh(W_p psi(z))``, evaluated in float64.

    The content term ignores the camera and the pose term ignores the object,
    so the per-view target is exactly additive. ``pose_gain = 0`` gives a
    pose-free teacher.
    """

    def __init__(self, cfg: TeacherConfig = TeacherConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7EAC]))
        self.w_s = rng.standard_normal((cfg.dim, CONTENT_DIM)) * (cfg.content_gain / np.sqrt(CONTENT_DIM))
        self.w_p = rng.standard_normal((cfg.dim, POSE_DIM)) * (cfg.pose_gain / np.sqrt(POSE_DIM / 2))
        self.mu, self.sigma = _feature_stats()

    def dim(self) -> int:
        return self.cfg.dim

    def fingerprint(self) -> bytes:
        blob = json.dumps(asdict(self.cfg), sort_keys=True).encode()
        return hashlib.sha256(b"synthetic-teacher/1" + blob).digest()

    def content_term(self, cloud: PointCloud) -> np.ndarray:
        return np.tanh(self.w_s @ ((content_features(cloud) - self.mu) / self.sigma))

    def pose_term(self, yaw: float, pitch: float) -> np.ndarray:
        return np.tanh(self.w_p @ pose_features(yaw, pitch))

    def embed(self, cloud: PointCloud, pose: CameraPose) -> np.ndarray:
        y = self.content_term(cloud) + self.pose_term(relative_yaw(cloud, pose), pose.pitch)
        return y.astype(np.float32)


class SlowTeacher:
    """Wraps a teacher and sleeps ``latency_ms`` per call to mimic an expensive model."""

    def __init__(self, inner, latency_ms: float):
        self.inner = inner
        self.latency = latency_ms / 1000.0
        self.calls = 0

    def dim(self) -> int:
        return self.inner.dim()

    def fingerprint(self) -> bytes:
        return self.inner.fingerprint()

    def embed(self, cloud: PointCloud, pose: CameraPose) -> np.ndarray:
        self.calls += 1
        if self.latency > 0:
            time.sleep(self.latency)
        return self.inner.embed(cloud, pose)


def make_teacher(cfg: TeacherConfig):
    t = SyntheticTeacher(cfg)
    return SlowTeacher(t, cfg.latency_ms) if cfg.latency_ms > 0 else t


def synth_teacher_embed(teacher, cloud: PointCloud, pose: CameraPose) -> np.ndarray:
    return teacher.embed(cloud, pose)


def object_pose(cloud: PointCloud, grid: ViewGrid, v: int) -> CameraPose:
    """Pose of view ``v`` at the cloud's scene radius around its bounding-box center."""
    pos = np.asarray(cloud.positions, dtype=np.float64)
    center = 0.5 * (pos.max(axis=0) + pos.min(axis=0))
    radius = scene_radius(cloud)
    return grid.pose(v, radius=radius if radius > 0 else 1.0, center=tuple(center.tolist()))


def view_record(teacher, cloud: PointCloud, grid: ViewGrid, v: int) -> Tuple[np.ndarray, np.ndarray]:
    """Teacher embedding and visible color histogram for one (object, view) pair, both float32."""
    pose = object_pose(cloud, grid, v)
    emb = np.asarray(teacher.embed(cloud, pose), dtype=np.float32)
    hist = color_histogram(cloud, pose).astype(np.float32)
    return emb, hist


# ---------------------------------------------------------------- cache


class CacheKeyError(KeyError):
    """Requested (object, view) pair is not in the cache."""


def _journal_digest(teacher, grid: ViewGrid) -> bytes:
    h = hashlib.sha256(teacher.fingerprint())
    h.update(json.dumps([grid.parameterization, [list(v) for v in grid.views]]).encode())
    return h.digest()


def _read_journal(path: Path, dim: int, views: int, digest: bytes) -> Dict[int, bytes]:
    """Complete object groups from a journal; anything after the last whole group is dropped."""
    if not path.exists():
        return {}
    data = path.read_bytes()
    if len(data) < _JOURNAL_HEADER.size:
        return {}
    magic, d, v, dig = _JOURNAL_HEADER.unpack_from(data, 0)
    if magic != JOURNAL_MAGIC or d != dim or v != views or dig != digest:
        return {}
    group = _OID.size + views * 4 * (dim + HIST_DIM)
    done, off = {}, _JOURNAL_HEADER.size
    while off + group <= len(data):
        (oid,) = _OID.unpack_from(data, off)
        done[oid] = data[off + _OID.size:off + group]
        off += group
    return done


def build_cache(dataset, grid: ViewGrid, teacher, path, max_objects: Optional[int] = None,
                progress=None) -> Optional["EmbeddingCache"]:
    """Embed every (object, view) pair once and write the indexed cache at ``path``.

    Work is appended to ``path + '.partial'`` one whole object at a time and
    flushed, so an interrupted build resumes where it stopped. ``max_objects``
    stops after that many newly computed objects without finalizing (returns
    None), which is how interruption is exercised.
    """
    path = Path(path)
    journal = Path(str(path) + ".partial")
    dim, V = teacher.dim(), len(grid)
    digest = _journal_digest(teacher, grid)
    done = _read_journal(journal, dim, V, digest)
    group = _OID.size + V * 4 * (dim + HIST_DIM)
    with open(journal, "r+b" if done else "wb") as f:
        if done:
            f.truncate(_JOURNAL_HEADER.size + len(done) * group)
            f.seek(0, os.SEEK_END)
        else:
            f.write(_JOURNAL_HEADER.pack(JOURNAL_MAGIC, dim, V, digest))
        fresh = 0
        for oid, cloud, _ in dataset:
            if oid in done:
                continue
            if max_objects is not None and fresh >= max_objects:
                return None
            chunks = []
            for v in range(V):
                emb, hist = view_record(teacher, cloud, grid, v)
                chunks.append(emb.astype("<f4").tobytes() + hist.astype("<f4").tobytes())
            body = b"".join(chunks)
            f.write(_OID.pack(oid) + body)
            f.flush()
            done[oid] = body
            fresh += 1
            if progress is not None:
                progress(len(done))
    _finalize(path, [int(o) for o in dataset.object_ids], done, dim, V)
    journal.unlink()
    return EmbeddingCache(path)


def _finalize(path: Path, order, done: Dict[int, bytes], dim: int, V: int) -> None:
    oids = [o for o in order if o in done]
    record = 4 * (dim + HIST_DIM)
    base = _HEADER.size + _INDEX.size * V * len(oids)
    index = bytearray()
    for i, oid in enumerate(oids):
        for v in range(V):
            index += _INDEX.pack(oid, v, base + (i * V + v) * record)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, dim, V, len(oids)))
        f.write(bytes(index))
        for oid in oids:
            f.write(done[oid])
    os.replace(tmp, path)


class EmbeddingCache:
    """Read-only view of a finalized cache with an in-memory (object, view) -> offset index."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as f:
            self._mm = mmap.mmap(f.fileno(), 0, access=mmap.ACCESS_READ)
        magic, version, self.dim, self.views, self.n_objects = _HEADER.unpack_from(self._mm, 0)
        if magic != CACHE_MAGIC:
            raise ValueError(f"{path}: not an embedding cache (magic {magic!r})")
        if version != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        n = self.views * self.n_objects
        entries = np.frombuffer(self._mm, dtype=np.dtype([("oid", "<u8"), ("view", "<u2"), ("off", "<u8")]),
                                count=n, offset=_HEADER.size)
        self.index = {(int(o), int(v)): int(off) for o, v, off in entries.tolist()}
        self.object_ids = list(dict.fromkeys(int(o) for o in entries["oid"]))

    def __len__(self) -> int:
        return len(self.index)

    def close(self) -> None:
        self._mm.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def read(self, object_id: int, view: int) -> Tuple[np.ndarray, np.ndarray]:
        try:
            off = self.index[(int(object_id), int(view))]
        except KeyError:
            raise CacheKeyError(f"no cached embedding for object {object_id}, view {view}") from None
        rec = np.frombuffer(self._mm, dtype="<f4", count=self.dim + HIST_DIM, offset=off)
        return rec[:self.dim].astype(np.float32), rec[self.dim:].astype(np.float32)

    def fetch(self, object_id: int, views: Iterable[int]) -> Tuple[np.ndarray, np.ndarray]:
        pairs = [self.read(object_id, v) for v in views]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def read_embedding(cache: EmbeddingCache, object_id: int, view_idx: int):
    return cache.read(object_id, view_idx)


class TeacherTargets:
    """On-the-fly target source with the same ``fetch`` interface as the cache."""

    def __init__(self, dataset, grid: ViewGrid, teacher):
        self.dataset, self.grid, self.teacher = dataset, grid, teacher

    def fetch(self, object_id: int, views: Iterable[int]) -> Tuple[np.ndarray, np.ndarray]:
        cloud = self.dataset.clouds[self.dataset.index_of(object_id)]
        pairs = [view_record(self.teacher, cloud, self.grid, v) for v in views]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
