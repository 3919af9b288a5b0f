"""Patchification: farthest-point centers, kNN groups and the per-group point network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class GroupSpec:
    num_groups: int = 64
    group_size: int = 32


@dataclass
class PointGroups:
    centers: torch.Tensor   # (..., K, 3)
    grouped: torch.Tensor   # (..., K, k, 3) center-relative
    indices: torch.Tensor   # (..., K, k)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        return torch.from_numpy(x)
    return x


def _sq_dist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Squared distances between every row of ``a`` (..., N, 3) and ``b`` (..., M, 3) -> (..., M, N)."""
    out = None
    for c in range(3):
        diff = a[..., c].unsqueeze(-2) - b[..., c].unsqueeze(-1)
        sq = diff * diff
        out = sq if out is None else out + sq
    return out


def fps(positions, K: int, start_index: int = 0) -> torch.Tensor:
    """Greedy farthest-point sampling; argmax ties go to the lowest index.

    Accepts (N, 3) or (B, N, 3); distances are evaluated in float64.
    """
    pos = _as_tensor(positions).to(torch.float64)
    squeeze = pos.dim() == 2
    if squeeze:
        pos = pos.unsqueeze(0)
    B, N, _ = pos.shape
    if K > N:
        raise ValueError(f"cannot pick {K} centers from {N} points")
    if not 0 <= start_index < N:
        raise ValueError(f"start_index {start_index} out of range")
    idx = torch.empty(B, K, dtype=torch.long)
    if K == 0:
        return idx[0] if squeeze else idx
    rows = torch.arange(B)
    nearest = torch.full((B, N), float("inf"), dtype=torch.float64)
    cur = torch.full((B,), start_index, dtype=torch.long)
    for i in range(K):
        idx[:, i] = cur
        nearest = torch.minimum(nearest, _sq_dist(pos, pos[rows, cur].unsqueeze(1))[:, 0])
        cur = torch.argmax(nearest, dim=1)
    return idx[0] if squeeze else idx


def knn_group(positions, centers, k: int) -> PointGroups:
    """The ``k`` nearest points of each center (stable sort: ties by lower index), center-relative."""
    pos = _as_tensor(positions)
    ctr = _as_tensor(centers).to(pos.dtype)
    squeeze = pos.dim() == 2
    if squeeze:
        pos, ctr = pos.unsqueeze(0), ctr.unsqueeze(0)
    N = pos.shape[-2]
    if k > N:
        raise ValueError(f"group size {k} exceeds cloud size {N}")
    d = _sq_dist(pos.to(torch.float64), ctr.to(torch.float64))
    order = torch.sort(d, dim=-1, stable=True).indices[..., :k]
    B, K = order.shape[:2]
    gathered = torch.gather(pos.unsqueeze(1).expand(B, K, N, 3), 2,
                            order.unsqueeze(-1).expand(B, K, k, 3))
    groups = PointGroups(ctr, gathered - ctr.unsqueeze(2), order)
    if squeeze:
        groups = PointGroups(groups.centers[0], groups.grouped[0], groups.indices[0])
    return groups


def group_points(positions, spec: GroupSpec) -> PointGroups:
    """FPS centers (start index 0) followed by kNN grouping."""
    pos = _as_tensor(positions)
    centers_idx = fps(pos, spec.num_groups, 0)
    if pos.dim() == 2:
        centers = pos[centers_idx]
    else:
        centers = torch.gather(pos, 1, centers_idx.unsqueeze(-1).expand(-1, -1, 3))
    return knn_group(pos, centers, spec.group_size)


class PointTokenizer(nn.Module):
    """Shared two-stage point network mapping each group to one D-vector.

    Stage one lifts points to ``widths[1]`` features; their max-pool is
    concatenated back onto every point before stage two and a final max-pool.
    """

    def __init__(self, dim: int = 192, widths=(128, 256, 384)):
        super().__init__()
        w1, w2, w3 = widths
        self.first = nn.Sequential(nn.Linear(3, w1), nn.GELU(), nn.Linear(w1, w2))
        self.second = nn.Sequential(nn.Linear(2 * w2, w3), nn.GELU(), nn.Linear(w3, dim))

    def forward(self, grouped: torch.Tensor) -> torch.Tensor:
        # grouped: (..., K, k, 3) -> (..., K, D)
        f = self.first(grouped)
        g = f.max(dim=-2, keepdim=True).values.expand_as(f)
        f = self.second(torch.cat([g, f], dim=-1))
        return f.max(dim=-2).values


def embed_groups(groups: PointGroups, tokenizer: PointTokenizer) -> torch.Tensor:
    param = next(tokenizer.parameters())
    return tokenizer(groups.grouped.to(param.dtype))


def prepend_cls(tokens: torch.Tensor, cls_param: torch.Tensor) -> torch.Tensor:
    """Prepend the CLS vector along the sequence axis: (..., K, D) -> (..., K+1, D)."""
    cls = cls_param.expand(*tokens.shape[:-2], 1, tokens.shape[-1])
    return torch.cat([cls, tokens], dim=-2)
