"""Dataset construction: scene splitting, cloud filtering, balanced sampling,
median compositing, sparse labels and depth integration."""
from __future__ import annotations

import warnings
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .data_model import CHL, LABEL_BLOCK, TARGET_KINDS, LabeledPatch, Tile
from .errors import DomainError, EmptyWindowError, InsufficientDataError, ValidationError

SOURCE_TILE = 45
MIN_VALID_FRACTION = 0.8
DEFAULT_EXCLUDED = frozenset({"APLR", "ANTA", "LAKE"})
MONTHS = tuple(range(1, 13))


def split_scene(scene: Tile, size: int = SOURCE_TILE) -> list[Tile]:
    """Cut non-overlapping ``size`` x ``size`` tiles from the top-left corner.

    Remainder rows/columns are dropped. Scenes smaller than one tile give ``[]``.
    """
    _, h, w = scene.shape
    out = []
    for r in range(0, h - size + 1, size):
        for c in range(0, w - size + 1, size):
            out.append(replace(
                scene,
                planes=scene.planes[:, r:r + size, c:c + size].copy(),
                validity=scene.validity[:, r:r + size, c:c + size].copy()))
    return out


def valid_fraction(tile: Tile) -> float:
    """Fraction of pixels that are valid in at least one band."""
    any_valid = tile.validity.any(axis=0)
    return float(any_valid.sum()) / any_valid.size


def passes_cloud_filter(tile: Tile, threshold: float = MIN_VALID_FRACTION) -> bool:
    return valid_fraction(tile) >= threshold


@dataclass
class SampleBudget:
    counts: dict[str, int]
    excluded: frozenset[str] = DEFAULT_EXCLUDED

    def __post_init__(self):
        if any(n < 0 for n in self.counts.values()):
            raise ValidationError("budget counts must be >= 0")

    @classmethod
    def uniform(cls, regions: Iterable[str], per_region: int, excluded=DEFAULT_EXCLUDED):
        return cls({r: per_region for r in regions}, frozenset(excluded))


@dataclass
class SampleResult:
    selected: list
    # (region, month, wanted, available) for every cell that could not be filled
    shortfall: list[tuple[str, int, int, int]] = field(default_factory=list)


def month_quota(total: int, rng: np.random.Generator) -> dict[int, int]:
    base, rem = divmod(total, len(MONTHS))
    quota = {m: base for m in MONTHS}
    for m in rng.choice(MONTHS, size=rem, replace=False):
        quota[int(m)] += 1
    return quota


def balanced_sample(candidates: Sequence, budget: SampleBudget, seed: int) -> SampleResult:
    """Draw the budgeted number of items per region, spread evenly over months.

    ``candidates`` may be :class:`Tile` objects or any record with ``region``
    and ``month`` attributes. Sampling is without replacement and
    deterministic for a given seed. Cells that cannot be filled return every
    available item and are listed in ``shortfall``.
    """
    cells: dict[tuple[str, int], list[int]] = defaultdict(list)
    for i, c in enumerate(candidates):
        cells[(c.region, int(c.month))].append(i)

    rng = np.random.default_rng(seed)
    result = SampleResult([])
    for region in sorted(budget.counts):
        if region in budget.excluded:
            continue
        quota = month_quota(budget.counts[region], rng)
        for month in MONTHS:
            want = quota[month]
            if want == 0:
                continue
            pool = cells.get((region, month), [])
            take = min(want, len(pool))
            if take < want:
                result.shortfall.append((region, month, want, len(pool)))
            picks = rng.choice(len(pool), size=take, replace=False) if take else []
            result.selected.extend(candidates[pool[int(j)]] for j in picks)
    return result


@dataclass
class SceneStack:
    tiles: list[Tile]
    days: list[float]

    def __post_init__(self):
        if len(self.tiles) != len(self.days):
            raise ValidationError("one timestamp per tile required")
        if any(b < a for a, b in zip(self.days, self.days[1:])):
            raise ValidationError("timestamps must be sorted ascending")
        shapes = {(t.bands, t.shape) for t in self.tiles}
        if len(shapes) > 1:
            raise ValidationError("stack tiles differ in shape or band set")


def median_composite(stack: SceneStack, center_day: float, window_days: float = 6.0) -> Tile:
    """Per-pixel, per-band median over valid values within the time window.

    Membership is closed: ``|t - center_day| <= window_days / 2``. Even counts
    take the mean of the two middle values.
    """
    half = window_days / 2.0
    members = [t for t, d in zip(stack.tiles, stack.days) if abs(d - center_day) <= half]
    if not members:
        raise EmptyWindowError(f"no tiles within {half} days of day {center_day}")
    cube = np.stack([np.where(t.validity, t.planes, np.nan) for t in members])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN slices
        med = np.nanmedian(cube, axis=0).astype(np.float32)
    validity = np.isfinite(med)
    return replace(members[0], planes=np.where(validity, med, np.float32(np.nan)),
                   validity=validity)


def label_block_slice(size: int) -> slice:
    """Rows/cols of the centered 3x3 label block (38..40 for an 80-pixel patch)."""
    start = size // 2 - 2
    return slice(start, start + LABEL_BLOCK)


def make_labeled_patch(composite: Tile, value: float, kind: str = CHL,
                       source_id: str = "") -> LabeledPatch:
    """Attach one in-situ measurement (linear units) to the center 3x3 block as log10."""
    if not np.isfinite(value) or value <= 0:
        raise DomainError(f"measurement must be positive and finite, got {value}")
    if kind not in TARGET_KINDS:
        raise DomainError(f"unknown target kind {kind!r}")
    h, w = composite.height, composite.width
    label = np.full((h, w), np.nan, dtype=np.float32)
    label[label_block_slice(h), label_block_slice(w)] = np.log10(value)
    return LabeledPatch(composite, label, kind, source_id)


@dataclass
class DepthProfile:
    depths: np.ndarray  # m, strictly increasing
    production: np.ndarray  # mgC/m^3/day

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[float, float]]) -> "DepthProfile":
        arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1])


def integrate_depth(profile: DepthProfile) -> float:
    """Column-integrated production (mgC/m^2/day) by the trapezoidal rule."""
    d, p = np.asarray(profile.depths, float), np.asarray(profile.production, float)
    if d.size < 2:
        raise InsufficientDataError("depth profile needs at least 2 samples")
    if np.any(np.diff(d) <= 0) or d[0] < 0:
        raise DomainError("depths must be >= 0 and strictly increasing")
    if np.any(p < 0):
        raise DomainError("production must be >= 0")
    return float(np.sum(np.diff(d) * (p[1:] + p[:-1]) / 2.0))


@dataclass
class ManifestEntry:
    path: str
    region: str
    month: int
    valid_fraction: float


def format_manifest(entries: Iterable[ManifestEntry]) -> str:
    return "".join(f"{e.path}\t{e.region}\t{e.month}\t{e.valid_fraction:.6f}\n" for e in entries)


def parse_manifest(text: str) -> list[ManifestEntry]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        path, region, month, frac = line.split("\t")
        out.append(ManifestEntry(path, region, int(month), float(frac)))
    return out
