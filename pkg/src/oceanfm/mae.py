"""Masked-autoencoder ViT: tokenization, masking, model, loss and pre-training loop."""
from __future__ import annotations

import logging
import math
from collections import OrderedDict, defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .data_model import ModelCheckpoint, Tile
from .errors import (ConfigurationError, DivergenceError, EmptyLossError, GeometryError,
                     ValidationError)
from .ingestion import MIN_VALID_FRACTION, valid_fraction
from .nn_core import Dense, LayerNorm, TransformerBlock, param_set
from .optim import OptimizerState, adamw_step, scheduled_lr

log = logging.getLogger(__name__)

DEFAULT_MASK_RATIO = 0.75
PAPER_PEAK_LR = 2.4e-3


@dataclass(frozen=True)
class ModelProfile:
    name: str
    input_size: int = 42
    patch_size: int = 2
    embed_dim: int = 128
    depth: int = 6
    heads: int = 8
    decoder_dim: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    head_dim: int = 32  # channels of the fine-tuning decoder
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.input_size % self.patch_size:
            raise ConfigurationError(
                f"input size {self.input_size} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.heads or self.decoder_dim % self.decoder_heads:
            raise ConfigurationError("embed dims must be divisible by head counts")
        if self.embed_dim % 4 or self.decoder_dim % 4:
            raise ConfigurationError("embed dims must be divisible by 4 for 2D sin/cos")

    @property
    def grid(self) -> int:
        return self.input_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid ** 2


PROFILES = {
    p.name: p for p in (
        ModelProfile("tiny", input_size=8, embed_dim=16, depth=1, heads=2,
                     decoder_dim=16, decoder_depth=1, decoder_heads=2, head_dim=8),
        ModelProfile("small", embed_dim=64, depth=4, heads=4,
                     decoder_dim=32, decoder_depth=1, decoder_heads=4, head_dim=32),
        ModelProfile("desk", embed_dim=128, depth=6, heads=8,
                     decoder_dim=64, decoder_depth=2, decoder_heads=4, head_dim=64),
        ModelProfile("paper", embed_dim=512, depth=12, heads=8,
                     decoder_dim=512, decoder_depth=4, decoder_heads=16, head_dim=256),
    )
}


def get_profile(name: str) -> ModelProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigurationError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")


# --- tokenization -----------------------------------------------------------

def patchify(x, patch: int = 2):
    """``[..., C, H, W] -> [..., T, C*patch*patch]``; row-major patches,
    channel-major then row-major pixels inside a patch. Works on numpy and torch."""
    *lead, c, h, w = x.shape
    if h % patch or w % patch:
        raise GeometryError(f"{h}x{w} image not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    n = len(lead)
    x = x.reshape(*lead, c, gh, patch, gw, patch)
    order = (*range(n), n + 1, n + 3, n, n + 2, n + 4)
    x = x.permute(*order) if isinstance(x, torch.Tensor) else x.transpose(order)
    return x.reshape(*lead, gh * gw, c * patch * patch)


def unpatchify(tokens, channels: int, height: int, width: int, patch: int = 2):
    *lead, t, d = tokens.shape
    gh, gw = height // patch, width // patch
    if gh * gw != t or d != channels * patch * patch or height % patch or width % patch:
        raise GeometryError(f"{t} tokens of dim {d} do not tile {channels}x{height}x{width}")
    n = len(lead)
    x = tokens.reshape(*lead, gh, gw, channels, patch, patch)
    order = (*range(n), n + 2, n, n + 3, n + 1, n + 4)
    x = x.permute(*order) if isinstance(x, torch.Tensor) else x.transpose(order)
    return x.reshape(*lead, channels, height, width)


def pos_embed_2d(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Fixed 2D sin/cos embedding ``[grid_h*grid_w, dim]``.

    The first half of the channels encodes the row, the second half the
    column; within a half, channel ``2i`` is ``sin(pos * w_i)`` and ``2i+1``
    is ``cos(pos * w_i)`` with ``w_i = 10000 ** (-i / (dim/4))``.
    """
    if dim % 4:
        raise ConfigurationError(f"embedding dim {dim} not divisible by 4")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)

    def axis(pos):
        out = np.empty((pos.size, 2 * quarter))
        arg = pos[:, None] * omega[None, :]
        out[:, 0::2] = np.sin(arg)
        out[:, 1::2] = np.cos(arg)
        return out

    rows, cols = np.divmod(np.arange(grid_h * grid_w, dtype=np.float64), grid_w)
    return np.concatenate([axis(rows), axis(cols)], axis=1).astype(np.float32)


@dataclass(frozen=True)
class MaskPlan:
    n_tokens: int
    masked: np.ndarray  # sorted unique int64 indices
    ratio: float

    @property
    def visible(self) -> np.ndarray:
        keep = np.ones(self.n_tokens, dtype=bool)
        keep[self.masked] = False
        return np.flatnonzero(keep)

    def token_mask(self) -> np.ndarray:
        m = np.zeros(self.n_tokens, dtype=bool)
        m[self.masked] = True
        return m


def n_masked(n_tokens: int, ratio: float) -> int:
    return int(math.floor(ratio * n_tokens + 1e-9))


def random_mask(n_tokens: int, ratio: float, seed) -> MaskPlan:
    if not 0.0 < ratio < 1.0:
        raise ConfigurationError(f"mask ratio {ratio} outside (0, 1)")
    rng = np.random.default_rng(seed)
    masked = np.sort(rng.choice(n_tokens, size=n_masked(n_tokens, ratio), replace=False))
    return MaskPlan(n_tokens, masked.astype(np.int64), ratio)


def no_mask(n_tokens: int) -> MaskPlan:
    return MaskPlan(n_tokens, np.zeros(0, dtype=np.int64), 0.0)


# --- model ------------------------------------------------------------------

class _PosCache:
    def __init__(self):
        self._cache = {}

    def get(self, gh, gw, dim, like: torch.Tensor) -> torch.Tensor:
        key = (gh, gw, dim, like.dtype)
        if key not in self._cache:
            self._cache[key] = torch.from_numpy(pos_embed_2d(gh, gw, dim)).to(like.dtype)
        return self._cache[key]


class Encoder(nn.Module):
    def __init__(self, profile: ModelProfile, in_chans: int):
        super().__init__()
        self.patch = profile.patch_size
        self.in_chans = in_chans
        d = profile.embed_dim
        self.patch_embed = Dense(in_chans * self.patch ** 2, d)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, profile.heads, profile.mlp_ratio) for _ in range(profile.depth))
        self.norm = LayerNorm(d)
        self._pos = _PosCache()

    def forward(self, x: torch.Tensor, keep: torch.Tensor | None = None, taps: Sequence[int] = ()):
        """Encode ``x [B, C, H, W]``; ``keep [B, K]`` selects visible tokens.

        Returns ``(normed_output, [tap outputs])``.
        """
        if x.shape[-3] != self.in_chans:
            raise GeometryError(f"expected {self.in_chans} channels, got {x.shape[-3]}")
        gh, gw = x.shape[-2] // self.patch, x.shape[-1] // self.patch
        tokens = self.patch_embed(patchify(x, self.patch))
        tokens = tokens + self._pos.get(gh, gw, tokens.shape[-1], tokens)
        if keep is not None:
            tokens = torch.gather(tokens, 1, keep[..., None].expand(-1, -1, tokens.shape[-1]))
        tapped = {}
        for i, blk in enumerate(self.blocks):
            tokens = blk(tokens)
            if i in taps:
                tapped[i] = tokens
        return self.norm(tokens), [tapped[t] for t in taps]


class MaskedAutoencoder(nn.Module):
    def __init__(self, profile: ModelProfile, in_chans: int):
        super().__init__()
        self.profile = profile
        self.in_chans = in_chans
        p = profile.patch_size
        self.encoder = Encoder(profile, in_chans)
        self.decoder_embed = Dense(profile.embed_dim, profile.decoder_dim)
        self.mask_token = nn.Parameter(torch.empty(profile.decoder_dim))
        nn.init.normal_(self.mask_token, std=0.02)
        self.decoder_blocks = nn.ModuleList(
            TransformerBlock(profile.decoder_dim, profile.decoder_heads, profile.mlp_ratio)
            for _ in range(profile.decoder_depth))
        self.decoder_norm = LayerNorm(profile.decoder_dim)
        self.decoder_pred = Dense(profile.decoder_dim, in_chans * p * p)
        self._pos = _PosCache()

    def forward(self, x: torch.Tensor, plans: Sequence[MaskPlan] | MaskPlan) -> torch.Tensor:
        """Reconstruct ``x [B, C, H, W]`` (or ``[C, H, W]``) under per-sample mask plans."""
        single = x.dim() == 3
        if single:
            x = x[None]
        if isinstance(plans, MaskPlan):
            plans = [plans] * x.shape[0]
        b, c, h, w = x.shape
        p = self.profile.patch_size
        if h % p or w % p:
            raise GeometryError(f"{h}x{w} image not divisible by patch {p}")
        gh, gw = h // p, w // p
        t = gh * gw
        if len(plans) != b or any(pl.n_tokens != t for pl in plans):
            raise GeometryError(f"mask plans do not match {b} images of {t} tokens")
        keep = torch.from_numpy(np.stack([pl.visible for pl in plans]))

        enc, _ = self.encoder(x, keep)
        vis = self.decoder_embed(enc)
        full = self.mask_token.expand(b, t, -1)
        full = full.scatter(1, keep[..., None].expand(-1, -1, vis.shape[-1]), vis)
        full = full + self._pos.get(gh, gw, full.shape[-1], full)
        for blk in self.decoder_blocks:
            full = blk(full)
        out = unpatchify(self.decoder_pred(self.decoder_norm(full)), c, h, w, p)
        return out[0] if single else out


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def build_mae(profile: ModelProfile, in_chans: int, seed: int = 0) -> MaskedAutoencoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MaskedAutoencoder(profile, in_chans)


# --- loss -------------------------------------------------------------------

def pixel_mask(plans: Sequence[MaskPlan] | MaskPlan, height: int, width: int,
               patch: int = 2) -> torch.Tensor:
    """Boolean ``[B, 1, H, W]`` (or ``[1, H, W]``) marking pixels of masked patches."""
    single = isinstance(plans, MaskPlan)
    plans = [plans] if single else list(plans)
    tok = torch.from_numpy(np.stack([pl.token_mask() for pl in plans]))
    px = tok[..., None].expand(-1, -1, patch * patch)
    px = unpatchify(px, 1, height, width, patch)
    return px[0] if single else px


def masked_rmse_loss(recon: torch.Tensor, target: torch.Tensor,
                     plans: Sequence[MaskPlan] | MaskPlan,
                     validity: torch.Tensor | None = None, patch: int = 2) -> torch.Tensor:
    """RMSE over pixels that are both inside masked patches and valid.

    Squared errors are summed globally over every such pixel (all bands,
    all images) before the mean, accumulating in float64.
    """
    if recon.shape != target.shape:
        raise GeometryError(f"recon {tuple(recon.shape)} vs target {tuple(target.shape)}")
    m = pixel_mask(plans, recon.shape[-2], recon.shape[-1], patch).expand_as(recon)
    if validity is not None:
        m = m & validity.bool()
    count = int(m.sum())
    if count == 0:
        raise EmptyLossError("no valid pixels inside masked patches")
    diff = (recon - target).to(torch.float64)
    sq = torch.where(m, diff * diff, torch.zeros((), dtype=torch.float64))
    return (sq.sum() / count).sqrt().to(recon.dtype)


# --- normalization ------------------------------------------------------------

def band_statistics(tiles: Sequence[Tile]) -> tuple[np.ndarray, np.ndarray]:
    """Per-band mean/std over valid pixels (float64 accumulation)."""
    c = tiles[0].shape[0]
    s = np.zeros(c)
    s2 = np.zeros(c)
    n = np.zeros(c)
    for t in tiles:
        v = np.where(t.validity, t.planes, 0.0).astype(np.float64)
        s += v.sum(axis=(1, 2))
        s2 += (v * v).sum(axis=(1, 2))
        n += t.validity.sum(axis=(1, 2))
    n = np.maximum(n, 1)
    mean = s / n
    std = np.sqrt(np.maximum(s2 / n - mean ** 2, 0.0))
    std = np.where(std > 1e-12, std, 1.0)
    return mean.astype(np.float32), std.astype(np.float32)


def normalize(planes: np.ndarray, mean: np.ndarray, std: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Standardize bands; invalid pixels become 0 (the band mean). Returns (x, validity)."""
    valid = np.isfinite(planes)
    x = (planes - mean[:, None, None]) / std[:, None, None]
    return np.where(valid, x, 0.0).astype(np.float32), valid


# --- training -----------------------------------------------------------------

@dataclass
class LossRecord:
    epoch: int
    split: str
    region: str
    loss: float


def checkpoint_from_model(model: nn.Module, profile: ModelProfile, mean, std) -> ModelCheckpoint:
    params = OrderedDict((k, v.detach().cpu().numpy().astype(np.float32).copy())
                         for k, v in param_set(model).items())
    return ModelCheckpoint(profile.name, np.asarray(mean, np.float32).copy(),
                           np.asarray(std, np.float32).copy(), params)


def load_params(model: nn.Module, params: "OrderedDict[str, np.ndarray]", prefix: str = "") -> None:
    """Copy named arrays into ``model``; names/shapes must match exactly."""
    own = param_set(model)
    wanted = OrderedDict((k, v) for k, v in params.items() if k.startswith(prefix))
    own_sel = [k for k in own if k.startswith(prefix)]
    if list(wanted) != own_sel:
        missing = set(own_sel) - set(wanted)
        extra = set(wanted) - set(own_sel)
        raise ConfigurationError(f"parameter mismatch; missing={sorted(missing)[:5]} "
                                 f"unexpected={sorted(extra)[:5]}")
    with torch.no_grad():
        for k, v in wanted.items():
            if tuple(own[k].shape) != tuple(v.shape):
                raise ConfigurationError(f"shape mismatch for {k}: {tuple(own[k].shape)} vs {v.shape}")
            own[k].copy_(torch.from_numpy(np.ascontiguousarray(v)))


def mae_from_checkpoint(ckpt: ModelCheckpoint) -> MaskedAutoencoder:
    model = MaskedAutoencoder(get_profile(ckpt.profile), len(ckpt.band_mean))
    load_params(model, ckpt.params)
    return model


def _augment_source(x: np.ndarray, v: np.ndarray, k: int, r: int, c: int, size: int):
    x = np.rot90(x, k, axes=(1, 2))[:, r:r + size, c:c + size]
    v = np.rot90(v, k, axes=(1, 2))[:, r:r + size, c:c + size]
    return np.ascontiguousarray(x), np.ascontiguousarray(v)


def _epoch_seeds(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0xE0C, epoch])


def evaluate_reconstruction(model: MaskedAutoencoder, tiles: Sequence[Tile], mean, std,
                            mask_ratio: float = DEFAULT_MASK_RATIO, seed: int = 0,
                            batch_size: int = 16) -> dict[str, float]:
    """Masked RMSE in original pixel units on a fixed center crop with seeded
    masks; returned overall (``"ALL"``) and per region code."""
    prof = model.profile
    size = prof.input_size
    scale = torch.from_numpy(np.asarray(std, np.float32))[:, None, None].double()
    sq = defaultdict(float)
    cnt = defaultdict(int)
    model.eval()
    with torch.no_grad():
        for start in range(0, len(tiles), batch_size):
            batch = tiles[start:start + batch_size]
            xs, vs, plans = [], [], []
            for i, t in enumerate(batch, start):
                x, v = normalize(t.planes, mean, std)
                off = (t.height - size) // 2
                xs.append(x[:, off:off + size, off:off + size])
                vs.append(v[:, off:off + size, off:off + size])
                plans.append(random_mask(prof.n_tokens, mask_ratio, [seed, 0xEA1, i]))
            x = torch.from_numpy(np.stack(xs))
            v = torch.from_numpy(np.stack(vs))
            recon = model(x, plans)
            m = pixel_mask(plans, size, size, prof.patch_size).expand_as(x) & v
            err = (((recon - x).double() * scale) ** 2 * m).sum(dim=(1, 2, 3))
            n = m.sum(dim=(1, 2, 3))
            for t, e, k in zip(batch, err.tolist(), n.tolist()):
                for key in ("ALL", t.region or "NONE"):
                    sq[key] += e
                    cnt[key] += k
    return {k: math.sqrt(sq[k] / cnt[k]) for k in sq if cnt[k]}


def pretrain(tiles: Sequence[Tile], profile: ModelProfile, epochs: int,
             lr_peak: float = PAPER_PEAK_LR, mask_ratio: float = DEFAULT_MASK_RATIO,
             seed: int = 0, batch_size: int = 8, val_tiles: Sequence[Tile] = (),
             weight_decay: float = 0.05) -> tuple[ModelCheckpoint, list[LossRecord]]:
    """Pre-train a masked autoencoder; returns the checkpoint and the loss log.

    Each sample gets a random 90-degree rotation and a random crop to the
    profile input size, and draws a fresh mask every epoch. The optimized
    objective is the masked RMSE on standardized bands (split
    ``"train_norm"``); the reported ``"train"``/``"val"`` losses are the
    masked RMSE in original pixel units.
    """
    if not tiles:
        raise ValidationError("empty pre-training dataset")
    size = profile.input_size
    for i, t in enumerate(tiles):
        if valid_fraction(t) < MIN_VALID_FRACTION:
            raise ValidationError(f"tile {i} is less than {MIN_VALID_FRACTION:.0%} cloud free")
        if t.height < size or t.width < size:
            raise GeometryError(f"tile {i} smaller than input size {size}")
    mean, std = band_statistics(tiles)
    model = build_mae(profile, tiles[0].shape[0], seed)
    params = param_set(model)
    normed = [normalize(t.planes, mean, std) for t in tiles]
    scale = torch.from_numpy(std)[:, None, None]

    steps_per_epoch = math.ceil(len(tiles) / batch_size)
    opt = OptimizerState.for_run(lr_peak, epochs * steps_per_epoch, weight_decay=weight_decay)
    history: list[LossRecord] = []
    for epoch in range(epochs):
        model.train()
        rng = _epoch_seeds(seed, epoch)
        order = rng.permutation(len(tiles))
        losses, pixel_losses = [], []
        for step in range(steps_per_epoch):
            idx = order[step * batch_size:(step + 1) * batch_size]
            xs, vs, plans = [], [], []
            for i in idx:
                x, v = normed[i]
                k = int(rng.integers(4))
                r = int(rng.integers(x.shape[1] - size + 1))
                c = int(rng.integers(x.shape[2] - size + 1))
                x, v = _augment_source(x, v, k, r, c, size)
                xs.append(x)
                vs.append(v)
                plans.append(random_mask(profile.n_tokens, mask_ratio, rng.integers(2 ** 63)))
            x = torch.from_numpy(np.stack(xs))
            v = torch.from_numpy(np.stack(vs))
            recon = model(x, plans)
            try:
                loss = masked_rmse_loss(recon, x, plans, v, profile.patch_size)
            except EmptyLossError:
                continue
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            for p in params.values():
                p.grad = None
            loss.backward()
            lr = scheduled_lr(opt)
            try:
                adamw_step(params, opt, lr)
            except DivergenceError as e:
                raise DivergenceError(f"epoch {epoch}, step {step}: {e}") from None
            losses.append(loss.item())
            with torch.no_grad():
                pixel_losses.append(masked_rmse_loss(
                    recon * scale, x * scale, plans, v, profile.patch_size).item())
        train_loss = float(np.mean(pixel_losses)) if pixel_losses else float("nan")
        history.append(LossRecord(epoch, "train", "ALL", train_loss))
        history.append(LossRecord(epoch, "train_norm", "ALL",
                                  float(np.mean(losses)) if losses else float("nan")))
        if val_tiles:
            for region, val in sorted(evaluate_reconstruction(
                    model, val_tiles, mean, std, mask_ratio, seed).items()):
                history.append(LossRecord(epoch, "val", region, val))
        log.debug("epoch %d train loss %.5f", epoch, train_loss)
    return checkpoint_from_model(model, profile, mean, std), history
