"""Cross-validation, metrics, tiled inference and the training-fraction ablation."""
from __future__ import annotations

import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import correlate

from .data_model import LabeledPatch
from .errors import ConfigurationError, DimensionError, GeometryError, InsufficientDataError
from .finetune import FRACTION_GRID, subset_fraction

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
HIST_BINS = 64


@dataclass
class FoldPlan:
    k: int
    seed: int
    folds: list[np.ndarray]

    def train_indices(self, i: int) -> np.ndarray:
        return np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != i]))


def kfold_split(n: int, k: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded shuffle, then round-robin assignment to ``k`` folds."""
    if k < 2 and n:
        raise ConfigurationError("k must be >= 2")
    if n < k:
        raise InsufficientDataError(f"cannot split {n} samples into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return FoldPlan(k, seed, [np.sort(perm[i::k]) for i in range(k)])


def rmse(preds, targets) -> float:
    p = np.asarray(preds, np.float64).ravel()
    t = np.asarray(targets, np.float64).ravel()
    if p.size != t.size:
        raise DimensionError(f"{p.size} predictions for {t.size} targets")
    if p.size == 0:
        raise InsufficientDataError("rmse of empty arrays")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a: np.ndarray, b: np.ndarray, dynamic_range: float,
             window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Local SSIM with a Gaussian window, NaN where either input is NaN.

    Pixels that are NaN in either plane are dropped from every window and the
    window weights are renormalized over the remaining pixels (this also
    handles the image border).
    """
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"ssim needs equal 2-D shapes, got {a.shape} and {b.shape}")
    if dynamic_range <= 0:
        raise ConfigurationError("dynamic_range must be > 0")
    valid = np.isfinite(a) & np.isfinite(b)
    if not valid.any():
        raise InsufficientDataError("no mutually valid pixels")
    g = gaussian_window(window, sigma)
    m = valid.astype(np.float64)
    a0, b0 = np.where(valid, a, 0.0), np.where(valid, b, 0.0)

    def wmean(z):
        return correlate(z, g, mode="constant", cval=0.0)

    weight = wmean(m)
    mu_a, mu_b = wmean(a0) / weight, wmean(b0) / weight
    var_a = wmean(a0 * a0) / weight - mu_a * mu_a
    var_b = wmean(b0 * b0) / weight - mu_b * mu_b
    cov = wmean(a0 * b0) / weight - mu_a * mu_b
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
    return np.where(valid, smap, np.nan)


def ssim(a: np.ndarray, b: np.ndarray, dynamic_range: float,
         window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Mean of ``ssim_map`` over mutually valid pixels."""
    return float(np.nanmean(ssim_map(a, b, dynamic_range, window, sigma)))


def window_positions(n: int, window: int, stride: int) -> list[int]:
    """Start offsets at ``stride`` plus an edge-aligned final window."""
    if n < window:
        raise GeometryError(f"extent {n} smaller than window {window}")
    pos = list(range(0, n - window + 1, stride))
    if pos[-1] != n - window:
        pos.append(n - window)
    return pos


def tiled_inference(predict_fn: Callable[[np.ndarray], np.ndarray], scene: np.ndarray,
                    window: int = 42, stride: int = 21) -> np.ndarray:
    """Slide ``window`` x ``window`` predictions over ``scene [C, H, W]`` and
    average overlapping outputs with equal weights. NaN outputs do not vote."""
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    _, h, w = scene.shape
    rows, cols = window_positions(h, window, stride), window_positions(w, window, stride)
    total = np.zeros((h, w), np.float64)
    count = np.zeros((h, w), np.int64)
    for r in rows:
        for c in cols:
            out = np.asarray(predict_fn(scene[:, r:r + window, c:c + window]), np.float64)
            ok = np.isfinite(out)
            total[r:r + window, c:c + window] += np.where(ok, out, 0.0)
            count[r:r + window, c:c + window] += ok
    with np.errstate(invalid="ignore", divide="ignore"):
        out = total / count
    return np.where(count > 0, out, np.nan).astype(np.float32)


def coverage_counts(h: int, w: int, window: int = 42, stride: int = 21) -> np.ndarray:
    count = np.zeros((h, w), np.int64)
    for r in window_positions(h, window, stride):
        for c in window_positions(w, window, stride):
            count[r:r + window, c:c + window] += 1
    return count


@dataclass
class MetricReport:
    model: str
    task: str
    per_fold: list[float | None]
    failures: list[str | None] = field(default_factory=list)
    runtime: float = 0.0
    ssim: float | None = None

    @property
    def ok_folds(self) -> list[float]:
        return [v for v in self.per_fold if v is not None]

    @property
    def mean(self) -> float:
        v = self.ok_folds
        return float(np.mean(v)) if v else float("nan")

    @property
    def std(self) -> float:
        v = self.ok_folds
        return float(np.std(v)) if v else float("nan")

    @property
    def complete(self) -> bool:
        return all(v is not None for v in self.per_fold)


def labeled_targets(patch: LabeledPatch) -> np.ndarray:
    return patch.label[patch.labeled_mask].astype(np.float64)


def run_cv(dataset: Sequence[LabeledPatch], model_factory: Callable, folds: FoldPlan,
           model: str = "model", task: str = "") -> MetricReport:
    """Train on each fold's complement, report RMSE at the held-out labeled pixels.

    ``model_factory(train_patches, fold_index)`` must return an object with
    ``predict_block(patch) -> array`` of predictions at the labeled pixels.
    A fold whose training raises is recorded as failed and skipped.
    """
    covered = np.sort(np.concatenate(folds.folds))
    if not np.array_equal(covered, np.arange(len(dataset))):
        raise ConfigurationError("fold plan does not partition the dataset")
    t0 = time.perf_counter()
    per_fold, failures = [], []
    for i, held_out in enumerate(folds.folds):
        train = [dataset[j] for j in folds.train_indices(i)]
        try:
            fitted = model_factory(train, i)
            preds = np.concatenate([np.asarray(fitted.predict_block(dataset[j]), np.float64)
                                    for j in held_out])
            targets = np.concatenate([labeled_targets(dataset[j]) for j in held_out])
            per_fold.append(rmse(preds, targets))
            failures.append(None)
        except Exception as exc:  # noqa: BLE001 - recorded as a partial report
            log.warning("fold %d failed: %s", i, exc)
            per_fold.append(None)
            failures.append(f"{type(exc).__name__}: {exc}")
    return MetricReport(model, task, per_fold, failures, time.perf_counter() - t0)


@dataclass
class AblationPoint:
    fraction: float
    mean: float
    std: float
    n_train: list[int]
    skipped: bool = False


def fraction_ablation(dataset: Sequence[LabeledPatch], model_factory: Callable, folds: FoldPlan,
                      fractions: Sequence[float] = FRACTION_GRID, seed: int = 0
                      ) -> list[AblationPoint]:
    """Repeat cross-validation on the same folds with subsampled training folds."""
    curve = []
    for frac in fractions:
        if not any(math.isclose(frac, f) for f in FRACTION_GRID):
            raise ConfigurationError(f"fraction {frac} not in {FRACTION_GRID}")
        sizes = []

        def factory(train, i, frac=frac):
            sub = subset_fraction(train, frac, [seed, i])
            sizes.append(len(sub))
            if len(sub) < 2:
                raise InsufficientDataError(f"{len(sub)} training samples at fraction {frac}")
            return model_factory(sub, i)

        rep = run_cv(dataset, factory, folds)
        skipped = not rep.complete
        curve.append(AblationPoint(frac, rep.mean, rep.std, sizes, skipped))
    return curve


def format_table(reports: Sequence[MetricReport]) -> str:
    """Plain-text summary: one row per model, one column per task, mean +/- std."""
    tasks = list(dict.fromkeys(r.task for r in reports))
    models = list(dict.fromkeys(r.model for r in reports))
    cell = {(r.model, r.task): f"{r.mean:.3f} +/- {r.std:.3f}" for r in reports}
    width = max([len(m) for m in models] + [5])
    lines = ["Model".ljust(width) + "".join(f" | {t:>16}" for t in tasks)]
    lines.append("-" * len(lines[0]))
    for m in models:
        lines.append(m.ljust(width) + "".join(f" | {cell.get((m, t), ''):>16}" for t in tasks))
    return "\n".join(lines) + "\n"


def report_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    buf.write("model,task,fold,rmse,failure\n")
    for r in reports:
        for i, (v, f) in enumerate(zip(r.per_fold, r.failures)):
            buf.write(f"{r.model},{r.task},{i},{'' if v is None else repr(v)},{f or ''}\n")
        buf.write(f"{r.model},{r.task},mean,{r.mean!r},\n")
        buf.write(f"{r.model},{r.task},std,{r.std!r},\n")
    return buf.getvalue()


def band_histograms(planes: np.ndarray, bins: int = HIST_BINS) -> list[tuple[np.ndarray, np.ndarray]]:
    """Fixed-bin histogram (over each band's own data range) of valid pixels."""
    out = []
    for band in np.asarray(planes, np.float64):
        v = band[np.isfinite(band)]
        if v.size == 0:
            out.append((np.zeros(bins + 1), np.zeros(bins, np.int64)))
            continue
        counts, edges = np.histogram(v, bins=bins, range=(v.min(), v.max()))
        out.append((edges, counts))
    return out


def histogram_csv(planes: np.ndarray, band_names: Sequence[str], bins: int = HIST_BINS) -> str:
    buf = io.StringIO()
    buf.write("band,bin,lo,hi,count\n")
    for name, (edges, counts) in zip(band_names, band_histograms(planes, bins)):
        for i, c in enumerate(counts):
            buf.write(f"{name},{i},{edges[i]!r},{edges[i + 1]!r},{int(c)}\n")
    return buf.getvalue()
