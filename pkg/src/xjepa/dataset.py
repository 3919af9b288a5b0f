"""Procedural 3D shapes with surface normals and class-correlated colors."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterator, List

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import PointCloud, normalize_cloud

POINTS_PER_OBJECT = 2048
SENSOR_NOISE = 0.06
DATASET_MAGIC = b"XJDS"
DATASET_VERSION = 1
TRAIN, TEST = 0, 1


class ShapeClass(IntEnum):
    SPHERE = 0
    CUBE = 1
    CYLINDER = 2
    CONE = 3
    TORUS = 4
    ELLIPSOID = 5
    PYRAMID = 6
    CAPSULE = 7

    @property
    def label(self) -> str:
        return self.name.lower()


NUM_CLASSES = len(ShapeClass)
# evenly spaced base hues, one per class
CLASS_HUES = np.arange(NUM_CLASSES) / NUM_CLASSES


def instance_seed(seed: int, object_id: int) -> int:
    """Per-object seed from a splittable hash of ``(seed, object_id)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(object_id),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _choose(rng, n, weights):
    w = np.asarray(weights, dtype=np.float64)
    return rng.choice(len(w), size=n, p=w / w.sum())


def _sphere(rng, n):
    # antipodal pairs keep the centroid at the origin, so normalization leaves a unit sphere
    half = _unit(rng.normal(size=((n + 1) // 2, 3)))
    p = np.concatenate([half, -half])[:n]
    return p, p.copy()


def _box(rng, n, half):
    half = np.asarray(half, dtype=np.float64)
    # face areas for +/-x, +/-y, +/-z
    areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]]
    axis = _choose(rng, n, areas)
    sign = rng.choice([-1.0, 1.0], size=n)
    p = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    normals = np.zeros((n, 3))
    idx = np.arange(n)
    p[idx, axis] = sign * half[axis]
    normals[idx, axis] = sign
    return p, normals


def _disk(rng, n, radius, y, up):
    r = radius * np.sqrt(rng.uniform(size=n))
    t = rng.uniform(0, 2 * np.pi, size=n)
    p = np.stack([r * np.cos(t), np.full(n, y), r * np.sin(t)], axis=1)
    normals = np.tile([0.0, 1.0 if up else -1.0, 0.0], (n, 1))
    return p, normals


def _tube(rng, n, radius, y0, y1):
    t = rng.uniform(0, 2 * np.pi, size=n)
    y = rng.uniform(y0, y1, size=n)
    normals = np.stack([np.cos(t), np.zeros(n), np.sin(t)], axis=1)
    p = normals * radius
    p[:, 1] = y
    return p, normals


def _assemble(rng, n, parts):
    """Sample ``n`` points from surface patches weighted by area.

    ``parts`` is a list of ``(area, sampler)`` with ``sampler(rng, m)``.
    """
    which = _choose(rng, n, [a for a, _ in parts])
    pos = np.empty((n, 3))
    nor = np.empty((n, 3))
    for i, (_, sampler) in enumerate(parts):
        mask = which == i
        m = int(mask.sum())
        if m:
            pos[mask], nor[mask] = sampler(rng, m)
    return pos, nor


def _cylinder(rng, n, radius, height):
    h = height / 2
    return _assemble(rng, n, [
        (2 * np.pi * radius * height, lambda g, m: _tube(g, m, radius, -h, h)),
        (np.pi * radius ** 2, lambda g, m: _disk(g, m, radius, h, True)),
        (np.pi * radius ** 2, lambda g, m: _disk(g, m, radius, -h, False)),
    ])


def _cone(rng, n, radius, height):
    slant = np.hypot(radius, height)

    def lateral(g, m):
        # area-uniform along the slant: radius fraction ~ sqrt(U)
        s = np.sqrt(g.uniform(size=m))
        t = g.uniform(0, 2 * np.pi, size=m)
        p = np.stack([s * radius * np.cos(t), height * (1 - s), s * radius * np.sin(t)], axis=1)
        nor = _unit(np.stack([height * np.cos(t), np.full(m, radius), height * np.sin(t)], axis=1))
        return p, nor

    return _assemble(rng, n, [
        (np.pi * radius * slant, lateral),
        (np.pi * radius ** 2, lambda g, m: _disk(g, m, radius, 0.0, False)),
    ])


def _torus(rng, n, major, minor):
    # rejection on the circumference weight keeps sampling area-uniform
    out_u, out_v = [], []
    need = n
    while need > 0:
        u = rng.uniform(0, 2 * np.pi, size=2 * need)
        v = rng.uniform(0, 2 * np.pi, size=2 * need)
        keep = rng.uniform(size=2 * need) < (major + minor * np.cos(v)) / (major + minor)
        out_u.append(u[keep][:need])
        out_v.append(v[keep][:need])
        need -= int(min(keep.sum(), need))
    u = np.concatenate(out_u)
    v = np.concatenate(out_v)
    nor = np.stack([np.cos(v) * np.cos(u), np.sin(v), np.cos(v) * np.sin(u)], axis=1)
    ring = np.stack([major * np.cos(u), np.zeros(n), major * np.sin(u)], axis=1)
    return ring + minor * nor, nor


def _ellipsoid(rng, n, axes):
    axes = np.asarray(axes, dtype=np.float64)
    u = _unit(rng.normal(size=(n, 3)))
    return u * axes, _unit(u / axes)


def _triangles(rng, n, tris):
    tris = np.asarray(tris, dtype=np.float64)
    e1 = tris[:, 1] - tris[:, 0]
    e2 = tris[:, 2] - tris[:, 0]
    cross = np.cross(e1, e2)
    areas = np.linalg.norm(cross, axis=1) / 2
    which = _choose(rng, n, areas)
    a, b = rng.uniform(size=n), rng.uniform(size=n)
    flip = a + b > 1
    a[flip], b[flip] = 1 - a[flip], 1 - b[flip]
    pos = tris[which, 0] + a[:, None] * e1[which] + b[:, None] * e2[which]
    return pos, _unit(cross[which])


def _pyramid(rng, n, half, height):
    c = [(-half, 0, -half), (half, 0, -half), (half, 0, half), (-half, 0, half)]
    apex = (0.0, height, 0.0)
    # counter-clockwise seen from outside so cross products point outward
    tris = [(c[0], apex, c[1]), (c[1], apex, c[2]), (c[2], apex, c[3]), (c[3], apex, c[0]),
            (c[0], c[1], c[2]), (c[0], c[2], c[3])]
    return _triangles(rng, n, tris)


def _capsule(rng, n, radius, length):
    h = length / 2

    def cap(top):
        def sample(g, m):
            d = _unit(g.normal(size=(m, 3)))
            d[:, 1] = np.abs(d[:, 1]) * (1 if top else -1)
            p = d * radius
            p[:, 1] += h if top else -h
            return p, d
        return sample

    return _assemble(rng, n, [
        (2 * np.pi * radius * length, lambda g, m: _tube(g, m, radius, -h, h)),
        (2 * np.pi * radius ** 2, cap(True)),
        (2 * np.pi * radius ** 2, cap(False)),
    ])


def sample_surface(cls: ShapeClass, rng: np.random.Generator, n: int = POINTS_PER_OBJECT):
    """Canonical-frame surface samples ``(positions, normals)`` before pose/normalization.

    Per-instance proportions vary mildly around the class template.
    """
    cls = ShapeClass(cls)
    j = lambda lo, hi: rng.uniform(lo, hi)  # noqa: E731
    if cls is ShapeClass.SPHERE:
        return _sphere(rng, n)
    if cls is ShapeClass.CUBE:
        return _box(rng, n, [j(0.9, 1.1), j(0.9, 1.1), j(0.9, 1.1)])
    if cls is ShapeClass.CYLINDER:
        return _cylinder(rng, n, radius=j(0.45, 0.55), height=j(1.9, 2.3))
    if cls is ShapeClass.CONE:
        return _cone(rng, n, radius=j(0.9, 1.1), height=j(1.8, 2.2))
    if cls is ShapeClass.TORUS:
        return _torus(rng, n, major=1.0, minor=j(0.25, 0.35))
    if cls is ShapeClass.ELLIPSOID:
        return _ellipsoid(rng, n, [j(1.0, 1.1), j(0.55, 0.65), j(0.3, 0.36)])
    if cls is ShapeClass.PYRAMID:
        return _pyramid(rng, n, half=j(0.9, 1.1), height=j(0.8, 1.0))
    return _capsule(rng, n, radius=j(0.28, 0.34), length=j(2.0, 2.4))


def _hsv_to_rgb(h, s, v):
    h = np.mod(h, 1.0) * 6.0
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    table = np.stack([
        np.stack([v, t, p], -1), np.stack([q, v, p], -1), np.stack([p, v, t], -1),
        np.stack([p, q, v], -1), np.stack([t, p, v], -1), np.stack([v, p, q], -1),
    ])
    return table[i, np.arange(len(h))]


def _colors(cls, rng, normals):
    n = len(normals)
    hue = CLASS_HUES[int(cls)] + rng.uniform(-0.06, 0.06)
    sat = rng.uniform(0.45, 0.95)
    light = _unit(rng.normal(size=3))
    shade = 0.6 + 0.3 * normals @ light + rng.normal(0, 0.04, size=n)
    rgb = _hsv_to_rgb(np.full(n, hue), np.full(n, sat), np.clip(shade, 0.05, 1.0))
    return np.clip(rgb, 0.0, 1.0)


def gen_shape(cls, seed: int, n: int = POINTS_PER_OBJECT, orientation: str = "so3",
              noise: float = SENSOR_NOISE) -> PointCloud:
    """Deterministic labeled cloud: surface samples, outward normals, colors, random pose.

    ``orientation`` is ``"so3"`` (uniform random rotation), ``"yaw"`` (about y only)
    or ``"none"``. ``noise`` is the mean per-coordinate Gaussian sensor noise,
    relative to the normalized extent, drawn per instance in ``[0.5, 1.5] * noise``;
    normals keep the clean surface orientation. Output is normalized and stored
    as float32.
    """
    cls = ShapeClass(cls)
    rng = np.random.default_rng(seed)
    pos, nor = sample_surface(cls, rng, n)
    if orientation == "so3":
        rot = Rotation.random(random_state=rng).as_matrix()
    elif orientation == "yaw":
        rot = Rotation.from_euler("y", rng.uniform(0, 360), degrees=True).as_matrix()
    elif orientation == "none":
        rot = np.eye(3)
    else:
        raise ValueError(f"unknown orientation mode {orientation!r}")
    pos, nor = pos @ rot.T, nor @ rot.T
    colors = _colors(cls, rng, nor)
    cloud = normalize_cloud(PointCloud(pos, colors=colors, normals=_unit(nor), label=int(cls)))
    if noise > 0:
        sigma = noise * rng.uniform(0.5, 1.5)
        noisy = cloud.positions + rng.normal(0.0, sigma, size=cloud.positions.shape)
        cloud = normalize_cloud(PointCloud(noisy, colors=cloud.colors, normals=cloud.normals, label=int(cls)))
    return PointCloud(
        positions=cloud.positions.astype(np.float32),
        colors=cloud.colors.astype(np.float32),
        normals=_unit(cloud.normals).astype(np.float32),
        label=int(cls),
    )


@dataclass
class SyntheticDataset:
    object_ids: np.ndarray   # (M,) uint64
    clouds: List[PointCloud]
    labels: np.ndarray       # (M,) int
    splits: np.ndarray       # (M,) uint8, TRAIN or TEST
    seed: int = 0

    def __len__(self):
        return len(self.clouds)

    def __iter__(self) -> Iterator:
        return iter(zip(self.object_ids.tolist(), self.clouds, self.labels.tolist()))

    @property
    def points_per_object(self) -> int:
        return len(self.clouds[0]) if self.clouds else 0

    def index_of(self, object_id: int) -> int:
        if not hasattr(self, "_index"):
            self._index = {int(o): i for i, o in enumerate(self.object_ids)}
        return self._index[int(object_id)]

    def subset(self, mask) -> "SyntheticDataset":
        idx = np.flatnonzero(mask)
        return SyntheticDataset(self.object_ids[idx], [self.clouds[i] for i in idx],
                                self.labels[idx], self.splits[idx], self.seed)

    def split(self, which: int) -> "SyntheticDataset":
        return self.subset(self.splits == which)

    def train(self) -> "SyntheticDataset":
        return self.split(TRAIN)

    def test(self) -> "SyntheticDataset":
        return self.split(TEST)

    def fraction(self, frac: float, seed: int = 0) -> "SyntheticDataset":
        """Class-balanced subset keeping ``frac`` of each class (at least one object)."""
        if not 0 < frac <= 1:
            raise ValueError(f"fraction must be in (0, 1], got {frac}")
        rng = np.random.default_rng(seed)
        keep = np.zeros(len(self), dtype=bool)
        for c in np.unique(self.labels):
            idx = np.flatnonzero(self.labels == c)
            k = max(1, int(round(frac * len(idx))))
            keep[np.sort(rng.permutation(idx)[:k])] = True
        return self.subset(keep)


def gen_dataset(n_per_class: int, seed: int, test_fraction: float,
                n_points: int = POINTS_PER_OBJECT, orientation: str = "so3",
                noise: float = SENSOR_NOISE) -> SyntheticDataset:
    """Balanced dataset of ``8 * n_per_class`` objects with a per-class train/test split.

    Object ids interleave classes (``id = i * 8 + class``).
    """
    if n_per_class < 2:
        raise ValueError("n_per_class must be >= 2")
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    n_test = min(max(int(round(n_per_class * test_fraction)), 1), n_per_class - 1)
    split_rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(2 ** 32,)))
    test_slots = {c: set(split_rng.permutation(n_per_class)[:n_test].tolist()) for c in range(NUM_CLASSES)}

    ids, clouds, labels, splits = [], [], [], []
    for i in range(n_per_class):
        for c in range(NUM_CLASSES):
            oid = i * NUM_CLASSES + c
            ids.append(oid)
            clouds.append(gen_shape(c, instance_seed(seed, oid), n_points, orientation, noise))
            labels.append(c)
            splits.append(TEST if i in test_slots[c] else TRAIN)
    return SyntheticDataset(np.array(ids, dtype=np.uint64), clouds, np.array(labels, dtype=np.int64),
                            np.array(splits, dtype=np.uint8), int(seed))


_HEADER = struct.Struct("<4sIII")


def save_dataset(ds: SyntheticDataset, path) -> None:
    """Little-endian: header then per object (id u64, class u8, pos/colors/normals f32 N*3, split u8)."""
    n = ds.points_per_object
    with open(path, "wb") as f:
        f.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(ds), n))
        for oid, cloud, label, split in zip(ds.object_ids, ds.clouds, ds.labels, ds.splits):
            if len(cloud) != n or cloud.colors is None or cloud.normals is None:
                raise ValueError(f"object {oid}: every cloud needs {n} points, colors and normals")
            f.write(struct.pack("<QB", int(oid), int(label)))
            for arr in (cloud.positions, cloud.colors, cloud.normals):
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            f.write(struct.pack("<B", int(split)))


def load_dataset(path) -> SyntheticDataset:
    data = Path(path).read_bytes()
    magic, version, n_obj, n = _HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file (magic {magic!r})")
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off = _HEADER.size
    block = n * 3 * 4
    ids, clouds, labels, splits = [], [], [], []
    for _ in range(n_obj):
        oid, label = struct.unpack_from("<QB", data, off)
        off += 9
        arrs = []
        for _ in range(3):
            arrs.append(np.frombuffer(data, dtype="<f4", count=n * 3, offset=off).reshape(n, 3).astype(np.float32))
            off += block
        (split,) = struct.unpack_from("<B", data, off)
        off += 1
        ids.append(oid)
        labels.append(label)
        splits.append(split)
        clouds.append(PointCloud(arrs[0], colors=arrs[1], normals=arrs[2], label=int(label)))
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return SyntheticDataset(np.array(ids, dtype=np.uint64), clouds, np.array(labels, dtype=np.int64),
                            np.array(splits, dtype=np.uint8))
