"""Point encoder, pooled representation, conditioning tokens, predictor and loss."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import CameraPose, PointCloud, view_direction
from .tokenizer import GroupSpec, PointGroups, PointTokenizer, group_points, prepend_cls

HIST_BINS = 16
HIST_DIM = 3 * HIST_BINS
LATENT_MODES = ("none", "pose", "pose_hist")


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 192
    layers: int = 18
    heads: int = 6
    mlp_ratio: float = 4.0
    num_groups: int = 64
    group_size: int = 32
    tokenizer_widths: Tuple[int, int, int] = (128, 256, 384)
    pos_hidden: int = 128
    variant: str = "base"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def groups(self) -> GroupSpec:
        return GroupSpec(self.num_groups, self.group_size)


@dataclass(frozen=True)
class PredictorConfig:
    dim: int = 192
    layers: int = 12
    heads: int = 6
    mlp_ratio: float = 4.0
    teacher_dim: int = 768

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")


def variant_configs(name: str, teacher_dim: int = 768) -> Tuple[EncoderConfig, PredictorConfig]:
    """Model-scaling variants: small ~6.4M, base ~14.1M, large ~24.8M total parameters."""
    if name == "small":
        return (EncoderConfig(dim=192, layers=8, variant="small"),
                PredictorConfig(dim=192, layers=5, teacher_dim=teacher_dim))
    if name == "base":
        return EncoderConfig(), PredictorConfig(teacher_dim=teacher_dim)
    if name == "large":
        return (EncoderConfig(dim=256, layers=18, heads=8, variant="large"),
                PredictorConfig(dim=256, layers=12, heads=8, teacher_dim=teacher_dim))
    if name == "tiny":
        # finite-difference scale: 8 groups x 4 points, width 16, 2 + 2 layers
        return (EncoderConfig(dim=16, layers=2, heads=2, num_groups=8, group_size=4,
                              tokenizer_widths=(8, 16, 24), pos_hidden=8, variant="tiny"),
                PredictorConfig(dim=16, layers=2, heads=2, teacher_dim=teacher_dim))
    raise ValueError(f"unknown model variant {name!r}")


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        *lead, n, d = x.shape
        h = self.heads
        # (..., n, 3, h, dh) -> three (..., h, n, dh)
        qkv = self.qkv(x).reshape(*lead, n, 3, h, d // h)
        q, k, v = (t.transpose(-2, -3) for t in qkv.unbind(-3))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h), dim=-1)
        out = (att @ v).transpose(-2, -3).reshape(*lead, n, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def _init_transformer(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class PointEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = PointTokenizer(cfg.dim, cfg.tokenizer_widths)
        self.pos_embed = nn.Sequential(nn.Linear(3, cfg.pos_hidden), nn.GELU(),
                                       nn.Linear(cfg.pos_hidden, cfg.dim))
        self.cls_token = nn.Parameter(torch.zeros(cfg.dim))
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.dim)
        _init_transformer(self.blocks)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.forward_count = 0

    def forward(self, groups: PointGroups, keep: Optional[torch.Tensor] = None):
        """Encode grouped clouds (B, K, k, 3); ``keep`` (B, M) selects unmasked groups.

        Returns ``(tokens (B, M, D), cls (B, D))``.
        """
        dtype = self.cls_token.dtype
        grouped = groups.grouped.to(dtype)
        centers = groups.centers.to(dtype)
        if keep is not None:
            grouped = torch.gather(grouped, 1, keep[:, :, None, None].expand(-1, -1, *grouped.shape[2:]))
            centers = torch.gather(centers, 1, keep[:, :, None].expand(-1, -1, 3))
        x = self.tokenizer(grouped) + self.pos_embed(centers)
        x = prepend_cls(x, self.cls_token)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        self.forward_count += x.shape[0]
        return x[:, 1:], x[:, 0]


class Predictor(nn.Module):
    """Maps ``s_p`` (B, 2, D_enc) and conditioning tokens (B, L, D) to teacher space (B, L, D_t).

    Each view is an independent 3-token sequence ``[s_p row 0, s_p row 1, query + z]``;
    the output is read at the query position.
    """

    def __init__(self, cfg: PredictorConfig, enc_dim: int):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(enc_dim, cfg.dim)
        self.slot_embed = nn.Parameter(torch.zeros(2, cfg.dim))
        self.query_token = nn.Parameter(torch.zeros(cfg.dim))
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.teacher_dim)
        _init_transformer(self)
        nn.init.trunc_normal_(self.slot_embed, std=0.02)
        nn.init.trunc_normal_(self.query_token, std=0.02)

    def forward(self, s_p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        B, L, _ = z.shape
        ctx = self.in_proj(s_p) + self.slot_embed              # (B, 2, D)
        query = (self.query_token + z).unsqueeze(2)             # (B, L, 1, D)
        x = torch.cat([ctx.unsqueeze(1).expand(B, L, 2, -1), query], dim=2)
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.norm(x[:, :, 2]))


class CrossModel(nn.Module):
    def __init__(self, enc: EncoderConfig, pred: PredictorConfig):
        super().__init__()
        self.encoder = PointEncoder(enc)
        self.predictor = Predictor(pred, enc.dim)

    @property
    def enc_cfg(self) -> EncoderConfig:
        return self.encoder.cfg

    @property
    def pred_cfg(self) -> PredictorConfig:
        return self.predictor.cfg


def build_model(enc: EncoderConfig, pred: PredictorConfig, seed: int = 0,
                dtype=torch.float32) -> CrossModel:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = CrossModel(enc, pred)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)


def check_normalized(positions: torch.Tensor, tol: float = 0.5):
    """Reject clouds clearly outside the normalized frame (augmentation slack allowed)."""
    pos = positions.to(torch.float64)
    if not torch.isfinite(pos).all():
        raise ValueError("cloud has non-finite coordinates")
    max_norm = pos.norm(dim=-1).amax(dim=-1)
    centroid = pos.mean(dim=-2).norm(dim=-1)
    if (max_norm > 1 + tol).any() or (max_norm < 1 - tol).any() or (centroid > tol).any():
        raise ValueError("input cloud is not normalized (centroid near 0, max norm near 1)")


def mask_keep_indices(num_groups: int, mask_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of the groups left after dropping ``floor(ratio * K)`` at random."""
    if not 0 <= mask_ratio < 1:
        raise ValueError(f"mask_ratio must be in [0, 1), got {mask_ratio}")
    drop = int(math.floor(mask_ratio * num_groups))
    if drop == 0:
        return np.arange(num_groups)
    return np.sort(rng.permutation(num_groups)[drop:])


def encode_points(positions, model: CrossModel, mask_ratio: float = 0.0,
                  rng: Optional[np.random.Generator] = None, groups: Optional[PointGroups] = None):
    """Tokenize, drop masked groups, run the encoder. ``positions`` is (N, 3) or (B, N, 3).

    Returns ``(tokens (B, M, D), cls (B, D))`` with ``M = K - floor(ratio * K)``.
    """
    if isinstance(positions, PointCloud):
        positions = positions.positions
    pos = torch.as_tensor(np.asarray(positions)) if not torch.is_tensor(positions) else positions
    if pos.dim() == 2:
        pos = pos.unsqueeze(0)
    check_normalized(pos)
    cfg = model.enc_cfg
    if groups is None:
        groups = group_points(pos, cfg.groups)
    keep = None
    if mask_ratio > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        keep = torch.as_tensor(np.stack([mask_keep_indices(cfg.num_groups, mask_ratio, rng)
                                         for _ in range(pos.shape[0])]))
    else:
        mask_keep_indices(cfg.num_groups, mask_ratio, rng)  # validates the ratio
    return model.encoder(groups, keep)


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    n = x.norm(dim=-1, keepdim=True)
    if (n == 0).any():
        raise RuntimeError("cannot normalize a zero vector in s_p pooling")
    return x / n


def pool_s_p(tokens: torch.Tensor, cls_out: torch.Tensor) -> torch.Tensor:
    """Stack the unit CLS output and the unit max-pooled tokens: (..., 2, D)."""
    return torch.stack([_unit_rows(cls_out), _unit_rows(tokens.max(dim=-2).values)], dim=-2)


def pool_features(tokens: torch.Tensor, cls_out: torch.Tensor) -> torch.Tensor:
    """``cls + mean + max`` feature vector of width 3D."""
    return torch.cat([cls_out, tokens.mean(dim=-2), tokens.max(dim=-2).values], dim=-1)


def _sincos(angle_rad: torch.Tensor, width: int) -> torch.Tensor:
    n = width // 2
    omega = 1.0 / 10000 ** (torch.arange(n, dtype=torch.float64) * 2 / width)
    arg = angle_rad.unsqueeze(-1) * omega.to(angle_rad.dtype)
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


def pose_encoding(yaw, pitch, dim: int, hist=None) -> torch.Tensor:
    """Sinusoidal yaw/pitch token of width ``dim``.

    Yaw fills the first half of the pose part and pitch the second, each laid
    out as ``[sin(w_j a), cos(w_j a)]`` with ``w_j = 10000^(-2j/half)``. With a
    48-bin color histogram the pose part shrinks to ``dim - 48`` and the
    histogram occupies the tail verbatim.
    """
    if dim <= 0 or dim % 4:
        raise ValueError(f"pose encoding width must be a positive multiple of 4, got {dim}")
    pose_dim = dim
    if hist is not None:
        if dim < 2 * HIST_DIM:
            raise ValueError(f"width {dim} too small to carry a {HIST_DIM}-bin histogram")
        pose_dim = dim - HIST_DIM
    yaw = torch.as_tensor(yaw, dtype=torch.float64) if not torch.is_tensor(yaw) else yaw
    pitch = torch.as_tensor(pitch, dtype=yaw.dtype) if not torch.is_tensor(pitch) else pitch
    half = pose_dim // 2
    parts = [_sincos(torch.deg2rad(yaw), half), _sincos(torch.deg2rad(pitch), half)]
    if hist is not None:
        h = torch.as_tensor(hist) if not torch.is_tensor(hist) else hist
        if h.shape[-1] != HIST_DIM:
            raise ValueError(f"histogram must have {HIST_DIM} entries")
        parts.append(h.to(parts[0].dtype).expand(*parts[0].shape[:-1], HIST_DIM))
    return torch.cat(parts, dim=-1)


def conditioning_tokens(mode: str, yaw, pitch, dim: int, hist=None, dtype=torch.float32) -> torch.Tensor:
    """Conditioning token per ``mode``: zeros, pose, or pose plus histogram."""
    if mode not in LATENT_MODES:
        raise ValueError(f"unknown latent mode {mode!r}")
    yaw = torch.as_tensor(yaw, dtype=torch.float64)
    if mode == "none":
        return torch.zeros(*yaw.shape, dim, dtype=dtype)
    z = pose_encoding(yaw, pitch, dim, hist if mode == "pose_hist" else None)
    return z.to(dtype)


def color_histogram(cloud: PointCloud, pose: CameraPose) -> np.ndarray:
    """16-bin-per-channel color histogram of points whose normals face the camera.

    Each channel sums to 1; with nothing visible every bin is 1/16.
    """
    if cloud.colors is None or cloud.normals is None:
        raise ValueError("color histogram needs colors and normals")
    to_camera = -view_direction(pose)
    visible = np.asarray(cloud.normals, dtype=np.float64) @ to_camera > 0
    out = np.full(HIST_DIM, 1.0 / HIST_BINS)
    n = int(visible.sum())
    if n == 0:
        return out
    cols = np.asarray(cloud.colors, dtype=np.float64)[visible]
    bins = np.clip(np.floor(cols * HIST_BINS).astype(np.int64), 0, HIST_BINS - 1)
    for c in range(3):
        out[c * HIST_BINS:(c + 1) * HIST_BINS] = np.bincount(bins[:, c], minlength=HIST_BINS) / n
    return out


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Mean over the last axis of ``d^2 / (2 beta)`` for ``|d| < beta`` else ``|d| - beta / 2``."""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    d = (pred - target).abs()
    per = torch.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)
    return per.mean(dim=-1)


def predict(s_p: torch.Tensor, z: torch.Tensor, model: CrossModel) -> torch.Tensor:
    squeeze = s_p.dim() == 2
    if squeeze:
        s_p, z = s_p.unsqueeze(0), z.reshape(1, -1, z.shape[-1])
    out = model.predictor(s_p, z)
    return out[0] if squeeze else out


def _numel(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def count_params(enc: EncoderConfig, pred: PredictorConfig) -> Tuple[int, int]:
    """Exact learnable parameter counts ``(encoder incl. tokenizer, encoder + predictor)``."""
    with torch.device("meta"):
        model = CrossModel(enc, pred)
    e = _numel(model.encoder)
    return e, e + _numel(model.predictor)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"XJCK"
CKPT_VERSION = 1


def config_digest(obj) -> bytes:
    """SHA-256 of canonical JSON (sorted keys, no whitespace)."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default).encode()
    return hashlib.sha256(blob).digest()


def _json_default(o):
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def save_checkpoint(path, tensors: Dict[str, torch.Tensor], config_hash: bytes) -> None:
    """Little-endian: magic, version u32, 32-byte config hash, then named f32 tensors."""
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + config_hash)
        for name, t in tensors.items():
            raw = name.encode()
            arr = t.detach().to(torch.float32).contiguous().numpy()
            f.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4", copy=False).tobytes())


def load_checkpoint(path) -> Tuple[Dict[str, torch.Tensor], bytes]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    digest = data[8:40]
    off = 40
    tensors = {}
    while off < len(data):
        (n,) = struct.unpack_from("<H", data, off)
        name = data[off + 2:off + 2 + n].decode()
        off += 2 + n
        (rank,) = struct.unpack_from("<B", data, off)
        dims = struct.unpack_from(f"<{rank}I", data, off + 1)
        off += 1 + 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return tensors, digest


def model_state(model: CrossModel) -> Dict[str, torch.Tensor]:
    return {k: v for k, v in model.state_dict().items()}


def load_model_state(model: CrossModel, tensors: Dict[str, torch.Tensor]) -> None:
    missing = set(model.state_dict()) - set(tensors)
    if missing:
        raise KeyError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    dtype = next(model.parameters()).dtype
    model.load_state_dict({k: v.to(dtype) for k, v in tensors.items()}, strict=True)
