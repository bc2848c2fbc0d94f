"""Sparse-label pixel regression on top of the (pre-trained or scratch) encoder."""
from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.ndimage import map_coordinates

from .data_model import CHL, SST_BAND, LabeledPatch, ModelCheckpoint
from .errors import ConfigurationError, DivergenceError, EmptyLossError
from .ingestion import label_block_slice
from .mae import (Encoder, LossRecord, ModelProfile, band_statistics, get_profile,
                  load_params, normalize)
from .nn_core import Dense, LayerNorm, param_set
from .optim import OptimizerState, adamw_step, scheduled_lr

log = logging.getLogger(__name__)

FRACTION_GRID = (0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0)
MAX_ROTATION_DEG = 30.0
AUGMENT_TRIES = 10
N_TAPS = 4


# --- augmentation -------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    row: int
    col: int
    flip_h: bool = False
    flip_v: bool = False
    angle: float = 0.0  # degrees, counter-clockwise


def crop_offset_range(size: int, crop: int) -> tuple[int, int]:
    """Inclusive offsets that keep the whole label block inside the crop."""
    block = label_block_slice(size)
    lo = max(0, block.stop - crop)
    hi = min(size - crop, block.start)
    return lo, hi


def centered_params(size: int = 80, crop: int = 42) -> AugmentParams:
    o = (size - crop) // 2
    return AugmentParams(o, o)


def draw_augment(rng: np.random.Generator, size: int = 80, crop: int = 42) -> AugmentParams:
    lo, hi = crop_offset_range(size, crop)
    row = int(rng.integers(lo, hi + 1))
    col = int(rng.integers(lo, hi + 1))
    flip_h = bool(rng.random() < 0.5)
    flip_v = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
    return AugmentParams(row, col, flip_h, flip_v, angle)


def rotate_planes(planes: np.ndarray, angle: float, order: int) -> np.ndarray:
    """Rotate ``[..., H, W]`` about the image center; outside pixels become NaN."""
    if angle == 0.0:
        return planes.copy()
    h, w = planes.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    a = math.radians(angle)
    # inverse map: output pixel -> source coordinate
    sy = cy + (yy - cy) * math.cos(a) - (xx - cx) * math.sin(a)
    sx = cx + (yy - cy) * math.sin(a) + (xx - cx) * math.cos(a)
    flat = planes.reshape(-1, h, w)
    out = np.stack([map_coordinates(p, [sy, sx], order=order, mode="constant", cval=np.nan)
                    for p in flat])
    return out.reshape(planes.shape).astype(planes.dtype)


def apply_augment(bands: np.ndarray, label: np.ndarray, p: AugmentParams,
                  crop: int = 42) -> tuple[np.ndarray, np.ndarray]:
    """crop -> horizontal/vertical flips -> rotation (bilinear bands, nearest label)."""
    x = bands[:, p.row:p.row + crop, p.col:p.col + crop]
    y = label[p.row:p.row + crop, p.col:p.col + crop]
    if p.flip_h:
        x, y = x[:, :, ::-1], y[:, ::-1]
    if p.flip_v:
        x, y = x[:, ::-1, :], y[::-1, :]
    x = rotate_planes(np.ascontiguousarray(x, dtype=np.float32), p.angle, order=1)
    y = rotate_planes(np.ascontiguousarray(y, dtype=np.float32), p.angle, order=0)
    return x, y


def augment(patch: LabeledPatch, seed, crop: int = 42,
            bands: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Random crop/flip/rotate keeping at least one labeled pixel.

    ``bands`` overrides the patch planes (e.g. pre-normalized or band-subset data).
    """
    x = patch.tile.planes if bands is None else bands
    size = patch.label.shape[0]
    rng = np.random.default_rng(seed)
    for _ in range(AUGMENT_TRIES):
        bx, by = apply_augment(x, patch.label, draw_augment(rng, size, crop), crop)
        if np.isfinite(by).any():
            return bx, by
    return apply_augment(x, patch.label, centered_params(size, crop), crop)


# --- model --------------------------------------------------------------------

def tap_indices(depth: int, n: int = N_TAPS) -> list[int]:
    return [int(i) for i in np.linspace(0, depth - 1, n).round()]


class Conv2d(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int):
        super().__init__()
        self.w = nn.Parameter(torch.empty(c_out, c_in, k, k))
        self.b = nn.Parameter(torch.zeros(c_out))
        nn.init.kaiming_uniform_(self.w, a=math.sqrt(5))
        self.pad = k // 2

    def forward(self, x):
        return F.conv2d(x, self.w, self.b, padding=self.pad)


class RegressionHead(nn.Module):
    """Multi-tap upsampling decoder: per-tap norm + projection, 2x upsample,
    sum fusion, two 3x3 convs, 1-channel output."""

    def __init__(self, embed_dim: int, channels: int, patch: int):
        super().__init__()
        self.patch = patch
        self.tap_norm = nn.ModuleList(LayerNorm(embed_dim) for _ in range(N_TAPS))
        self.tap_proj = nn.ModuleList(Dense(embed_dim, channels) for _ in range(N_TAPS))
        self.conv1 = Conv2d(channels, channels, 3)
        self.conv2 = Conv2d(channels, channels, 3)
        self.out = Conv2d(channels, 1, 1)

    def forward(self, taps: Sequence[torch.Tensor], gh: int, gw: int) -> torch.Tensor:
        fused = 0
        for tokens, ln, proj in zip(taps, self.tap_norm, self.tap_proj):
            f = proj(ln(tokens))  # [B, T, F]
            f = f.transpose(1, 2).reshape(f.shape[0], f.shape[2], gh, gw)
            fused = fused + F.interpolate(f, scale_factor=self.patch, mode="bilinear",
                                          align_corners=False)
        x = F.gelu(self.conv1(fused))
        x = F.gelu(self.conv2(x))
        return self.out(x)[:, 0]


class PixelRegressor(nn.Module):
    def __init__(self, profile: ModelProfile, in_chans: int):
        super().__init__()
        self.profile = profile
        self.in_chans = in_chans
        self.encoder = Encoder(profile, in_chans)
        self.head = RegressionHead(profile.embed_dim, profile.head_dim, profile.patch_size)
        self.taps = tap_indices(profile.depth)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``[B, C, H, W]`` normalized input -> ``[B, H, W]`` log10 prediction."""
        p = self.profile.patch_size
        _, taps = self.encoder(x, None, self.taps)
        return self.head(taps, x.shape[-2] // p, x.shape[-1] // p)


@dataclass
class FinetuneConfig:
    init: str | ModelCheckpoint = "scratch"  # "scratch", a CKP1 path, or a checkpoint
    task: str = CHL
    bands: str = "olci"  # "olci" drops an SST band, "olci+sst" keeps every band
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    fraction: float = 1.0
    weight_decay: float = 0.05

    def __post_init__(self):
        if self.bands not in ("olci", "olci+sst"):
            raise ConfigurationError(f"bands must be 'olci' or 'olci+sst', got {self.bands!r}")
        if not any(math.isclose(self.fraction, f) for f in FRACTION_GRID):
            raise ConfigurationError(f"fraction {self.fraction} not in {FRACTION_GRID}")


def band_selection(band_names: Sequence[str], bands: str) -> list[int]:
    if bands == "olci":
        return [i for i, b in enumerate(band_names) if b != SST_BAND]
    return list(range(len(band_names)))


def select_encoder_bands(params: "OrderedDict[str, np.ndarray]", keep: Sequence[int],
                         patch: int) -> "OrderedDict[str, np.ndarray]":
    """Drop input-projection rows of unused bands (rows are channel-major)."""
    out = OrderedDict(params)
    w = params["encoder.patch_embed.w"]
    rows = [c * patch * patch + j for c in keep for j in range(patch * patch)]
    out["encoder.patch_embed.w"] = w[rows]
    return out


@dataclass
class FinetunedModel:
    model: PixelRegressor
    band_mean: np.ndarray
    band_std: np.ndarray
    band_index: list[int]  # indices into the patch planes
    history: list[LossRecord] = field(default_factory=list)
    n_train: int = 0

    def prepare(self, planes: np.ndarray) -> np.ndarray:
        """Select bands and standardize; NaN (no-data) is kept for ``predict``."""
        x = planes[self.band_index]
        return ((x - self.band_mean[:, None, None]) / self.band_std[:, None, None]).astype(np.float32)

    def predict(self, planes: np.ndarray) -> np.ndarray:
        """Predict a log10 plane from raw (unnormalized) planes."""
        return predict(self.model, self.prepare(planes))

    def predict_block(self, patch: LabeledPatch, crop: int | None = None) -> np.ndarray:
        """Predictions at the labeled pixels of a centered crop (model input size by default)."""
        crop = crop or self.model.profile.input_size
        p = centered_params(patch.label.shape[0], crop)
        x = self.prepare(patch.tile.planes)[:, p.row:p.row + crop, p.col:p.col + crop]
        y = patch.label[p.row:p.row + crop, p.col:p.col + crop]
        return predict(self.model, x)[np.isfinite(y)]

    def checkpoint(self) -> ModelCheckpoint:
        params = OrderedDict((k, v.detach().numpy().astype(np.float32).copy())
                             for k, v in param_set(self.model).items())
        return ModelCheckpoint(self.model.profile.name, self.band_mean.copy(),
                               self.band_std.copy(), params)


def regressor_from_checkpoint(ckpt: ModelCheckpoint) -> FinetunedModel:
    n = len(ckpt.band_mean)
    model = PixelRegressor(get_profile(ckpt.profile), n)
    load_params(model, ckpt.params)
    return FinetunedModel(model, ckpt.band_mean, ckpt.band_std, list(range(n)))


@torch.no_grad()
def predict(model: PixelRegressor, x: np.ndarray) -> np.ndarray:
    """Single-channel prediction for one normalized ``C x H x W`` input.

    No-data (NaN) inputs are zero-filled; an input with no valid value at all
    yields an all-NaN plane.
    """
    valid = np.isfinite(x)
    if not valid.any():
        return np.full(x.shape[-2:], np.nan, dtype=np.float32)
    model.eval()
    xt = torch.from_numpy(np.where(valid, x, 0.0).astype(np.float32))[None]
    return model(xt)[0].numpy().astype(np.float32)


def sparse_masked_loss(pred: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """RMSE over labeled (finite) pixels only."""
    m = torch.isfinite(label)
    count = int(m.sum())
    if count == 0:
        raise EmptyLossError("no labeled pixels")
    diff = torch.where(m, pred - torch.nan_to_num(label), torch.zeros((), dtype=pred.dtype))
    return (diff.to(torch.float64).pow(2).sum() / count).sqrt().to(pred.dtype)


def subset_fraction(items: Sequence, fraction: float, seed) -> list:
    """Deterministic subset of ``floor(fraction * n)`` items, original order kept."""
    n = len(items)
    k = int(math.floor(fraction * n + 1e-9))
    idx = np.sort(np.random.default_rng(seed).permutation(n)[:k])
    return [items[i] for i in idx]


def _resolve_checkpoint(init) -> ModelCheckpoint | None:
    if isinstance(init, ModelCheckpoint):
        return init
    if init == "scratch":
        return None
    from .data_model import read_checkpoint
    return read_checkpoint(init)


def build_model(cfg: FinetuneConfig, profile: ModelProfile, band_names: Sequence[str],
                stats: tuple[np.ndarray, np.ndarray] | None = None) -> FinetunedModel:
    """Encoder from the checkpoint (pretrained) or random (scratch); head always random.

    The head is initialized from ``cfg.seed`` identically in both modes.
    """
    keep = band_selection(band_names, cfg.bands)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = PixelRegressor(profile, len(keep))
    ckpt = _resolve_checkpoint(cfg.init)
    if ckpt is not None:
        if len(ckpt.band_mean) != len(band_names):
            raise ConfigurationError(
                f"checkpoint has {len(ckpt.band_mean)} bands, data has {len(band_names)}")
        if ckpt.profile != profile.name:
            raise ConfigurationError(f"checkpoint profile {ckpt.profile!r} != {profile.name!r}")
        enc = OrderedDict((k, v) for k, v in ckpt.params.items() if k.startswith("encoder."))
        load_params(model, select_encoder_bands(enc, keep, profile.patch_size), "encoder.")
        mean, std = ckpt.band_mean[keep], ckpt.band_std[keep]
    elif stats is not None:
        mean, std = stats[0][keep], stats[1][keep]
    else:
        raise ConfigurationError("scratch init needs normalization statistics")
    return FinetunedModel(model, np.asarray(mean, np.float32), np.asarray(std, np.float32), keep)


def finetune(train: Sequence[LabeledPatch], cfg: FinetuneConfig,
             profile: ModelProfile) -> FinetunedModel:
    """Minimize the sparse masked RMSE with per-step augmentation."""
    train = subset_fraction(train, cfg.fraction, [cfg.seed, 0xF8AC])
    if not train:
        raise EmptyLossError("no training samples after subsetting")
    band_names = train[0].tile.bands
    stats = band_statistics([p.tile for p in train])
    fm = build_model(cfg, profile, band_names, stats)
    model = fm.model
    params = param_set(model)
    crop = profile.input_size
    prepared = [fm.prepare(p.tile.planes) for p in train]

    steps = math.ceil(len(train) / cfg.batch_size)
    opt = OptimizerState.for_run(cfg.lr, cfg.epochs * steps, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 0xA06])
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train))
        losses = []
        for step in range(steps):
            xs, ys = [], []
            for i in order[step * cfg.batch_size:(step + 1) * cfg.batch_size]:
                x, y = augment(train[i], rng.integers(2 ** 63), crop, prepared[i])
                xs.append(np.nan_to_num(x, nan=0.0))
                ys.append(y)
            pred = model(torch.from_numpy(np.stack(xs)))
            loss = sparse_masked_loss(pred, torch.from_numpy(np.stack(ys)))
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            for p in params.values():
                p.grad = None
            loss.backward()
            adamw_step(params, opt, scheduled_lr(opt))
            losses.append(loss.item())
        fm.history.append(LossRecord(epoch, "train", "ALL", float(np.mean(losses))))
    fm.n_train = len(train)
    return fm
