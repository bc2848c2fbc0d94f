"""Synthetic multispectral ocean tiles with a known band -> target mapping.

Each band is a fixed spectral mix of a few smooth latent fields (sums of
random-phase sinusoids), so bands are strongly correlated the way real
water-leaving reflectances are. Clouds are a thresholded smooth field.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data_model import CHL, LabeledPatch, Tile, band_set
from .ingestion import label_block_slice, make_labeled_patch

REFLECTANCE_RANGE = (0.0, 0.2)
SST_RANGE = (271.0, 305.0)
N_LATENT = 3
N_HARMONICS = 8
SYNTH_REGIONS = ("NADR", "NASE", "CNRY")

_MIX_STREAM = 0x5EED
_TILE_STREAM = 1
_LABELED_STREAM = 2


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_bands: int = 16
    with_sst: bool = False
    size: int = 45
    corr_length: float = 30.0  # pixels; ~9 km at 300 m
    cloud_fraction: float = 0.0
    weights: tuple[float, ...] | None = None  # per band, None -> seeded default
    bias: float | None = None  # None -> centers labels near log10(1)
    regions: tuple[str, ...] = SYNTH_REGIONS
    year: int = 2020

    def __post_init__(self):
        if self.corr_length < 1:
            raise ValueError("corr_length must be >= 1")
        if not 0.0 <= self.cloud_fraction < 1.0:
            raise ValueError("cloud_fraction must lie in [0, 1)")
        if self.weights is not None:
            if len(self.weights) != self.n_bands:
                raise ValueError(f"{len(self.weights)} weights for {self.n_bands} bands")
            if not all(math.isfinite(w) for w in self.weights):
                raise ValueError("weights must be finite")

    @property
    def bands(self) -> tuple[str, ...]:
        return band_set(self.n_bands, self.with_sst)


@dataclass(frozen=True)
class _Spectra:
    base: np.ndarray  # [C]
    mix: np.ndarray  # [C, K]
    weights: np.ndarray  # [C]
    bias: float


def _spectra(cfg: SynthConfig) -> _Spectra:
    rng = np.random.default_rng([cfg.seed, _MIX_STREAM])
    c = cfg.n_bands
    base = rng.uniform(0.05, 0.11, size=c)
    mix = rng.normal(0.0, 0.012, size=(c, N_LATENT))
    if cfg.with_sst:
        base[-1], mix[-1] = 288.0, [5.0, 0.0, 0.0]
    if cfg.weights is not None:
        weights = np.asarray(cfg.weights, dtype=np.float64)
    else:
        raw = rng.normal(size=c)
        if cfg.with_sst:
            raw[-1] = 0.0
        # scale so the natural-log target has unit-ish spread (~0.35 in log10)
        spread = np.linalg.norm(mix.T @ raw)
        weights = raw * (0.8 / spread if spread > 0 else 0.0)
    bias = float(-weights @ base) if cfg.bias is None else float(cfg.bias)
    return _Spectra(base, mix, weights, bias)


def smooth_field(rng: np.random.Generator, size: int, corr_length: float,
                 n_harmonics: int = N_HARMONICS) -> np.ndarray:
    """Zero-mean, unit-variance (in expectation) sum of random plane waves."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, 2 * np.pi, n_harmonics)
    wavelength = corr_length * rng.uniform(1.5, 4.0, n_harmonics)
    phase = rng.uniform(0, 2 * np.pi, n_harmonics)
    k = 2 * np.pi / wavelength
    field = np.zeros((size, size))
    for i in range(n_harmonics):
        field += np.cos(k[i] * (np.cos(theta[i]) * xx + np.sin(theta[i]) * yy) + phase[i])
    return field * np.sqrt(2.0 / n_harmonics)


def _fields(cfg: SynthConfig, index: int, size: int, stream: int = _TILE_STREAM):
    spec = _spectra(cfg)
    rng = np.random.default_rng([cfg.seed, stream, index])
    latents = np.stack([smooth_field(rng, size, cfg.corr_length) for _ in range(N_LATENT)])
    planes = spec.base[:, None, None] + np.einsum("ck,khw->chw", spec.mix, latents)
    lo, hi = REFLECTANCE_RANGE
    n_refl = cfg.n_bands - 1 if cfg.with_sst else cfg.n_bands
    planes[:n_refl] = np.clip(planes[:n_refl], lo, hi)
    if cfg.with_sst:
        planes[-1] = np.clip(planes[-1], *SST_RANGE)
    cloud = np.zeros((size, size), dtype=bool)
    if cfg.cloud_fraction > 0:
        cf = smooth_field(rng, size, cfg.corr_length)
        cloud = cf > np.quantile(cf, 1.0 - cfg.cloud_fraction)
    return spec, planes.astype(np.float32), cloud


def _tile(cfg: SynthConfig, index: int, planes: np.ndarray, cloud: np.ndarray) -> Tile:
    validity = np.broadcast_to(~cloud, planes.shape).copy()
    planes = np.where(validity, planes, np.float32(np.nan)).astype(np.float32)
    region = cfg.regions[(index // 12) % len(cfg.regions)]
    return Tile(cfg.bands, planes, validity, region=region, year=cfg.year,
                month=index % 12 + 1, lat=0.0, lon=0.0)


def gen_tile(cfg: SynthConfig, index: int) -> Tile:
    """Deterministic synthetic tile; a pure function of ``(cfg, index)``."""
    _, planes, cloud = _fields(cfg, index, cfg.size)
    return _tile(cfg, index, planes, cloud)


def target_value(cfg: SynthConfig, band_means: np.ndarray) -> float:
    """Measurement in linear units: ``exp(w . x + b)``."""
    spec = _spectra(cfg)
    return float(np.exp(spec.weights @ np.asarray(band_means, np.float64) + spec.bias))


def mapping(cfg: SynthConfig) -> tuple[np.ndarray, float]:
    spec = _spectra(cfg)
    return spec.weights.copy(), spec.bias


def gen_labeled_dataset(cfg: SynthConfig, n: int, kind: str = CHL,
                        size: int = 80) -> list[LabeledPatch]:
    """``n`` labeled 80x80 patches; the label block is kept cloud free."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = replace(cfg, size=size)
    block = label_block_slice(size)
    out = []
    for i in range(n):
        _, planes, cloud = _fields(cfg, i, size, _LABELED_STREAM)
        cloud[block, block] = False
        tile = _tile(cfg, i, planes, cloud)
        xbar = tile.planes[:, block, block].astype(np.float64).mean(axis=(1, 2))
        out.append(make_labeled_patch(tile, target_value(cfg, xbar), kind, source_id=f"synth-{i}"))
    return out
