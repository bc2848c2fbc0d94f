"""Per-pixel extremely randomized trees regressor.

Splitting follows the extra-trees recipe: at every node draw up to
``max_features`` candidate features, one uniform threshold per feature
inside the node's range, and keep the split with the lowest summed child
sum-of-squares. Nodes stop splitting below ``2 * min_leaf`` samples or when
the target (or every feature) is constant.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data_model import LabeledPatch, atomic_write
from .errors import DimensionError, FormatError, InsufficientDataError

ETR_MAGIC = b"ETR1"
ETR_VERSION = 1


class SkipSample(Exception):
    """Patch has no valid band value at any labeled pixel."""


@dataclass
class Tree:
    feature: np.ndarray  # int32, -1 at leaves
    threshold: np.ndarray  # float64; go left when x[feature] <= threshold
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    value: np.ndarray  # float64 leaf mean (internal nodes too)

    def apply(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(len(x), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            n = node[active]
            go_left = x[active, self.feature[n]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return node

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.value[self.apply(x)]


@dataclass(eq=False)
class TreeEnsemble:
    n_features: int
    trees: list[Tree]
    fill: np.ndarray | None = None  # per-feature imputation values for NaN inputs

    def __eq__(self, other):
        return isinstance(other, TreeEnsemble) and encode_ensemble(self) == encode_ensemble(other)


def _grow(x: np.ndarray, y: np.ndarray, max_features: int, min_leaf: int,
          rng: np.random.Generator) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        return len(value) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)))]
    while stack:
        node, idx = stack.pop()
        yi = y[idx]
        if len(idx) < 2 * min_leaf or np.ptp(yi) == 0:
            continue
        xi = x[idx]
        lo, hi = xi.min(axis=0), xi.max(axis=0)
        candidates = np.flatnonzero(hi > lo)
        rng.shuffle(candidates)
        best = None
        tried = 0
        for f in candidates:
            if tried == max_features:
                break
            t = rng.uniform(lo[f], hi[f])
            mask = xi[:, f] <= t
            nl = int(mask.sum())
            if nl < min_leaf or len(idx) - nl < min_leaf:
                continue
            tried += 1
            yl, yr = yi[mask], yi[~mask]
            score = ((yl - yl.mean()) ** 2).sum() + ((yr - yr.mean()) ** 2).sum()
            if best is None or score < best[0]:
                best = (score, int(f), float(t), mask)
        if best is None:
            continue
        _, f, t, mask = best
        feature[node], threshold[node] = f, t
        li, ri = idx[mask], idx[~mask]
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((left[node], li))
        stack.append((right[node], ri))
    return Tree(np.asarray(feature, np.int32), np.asarray(threshold, np.float64),
                np.asarray(left, np.int32), np.asarray(right, np.int32),
                np.asarray(value, np.float64))


def fit_trees(x, y, n_trees: int = 100, seed: int = 0, max_features: int | None = None,
              min_leaf: int = 2) -> TreeEnsemble:
    """Fit an extremely randomized trees ensemble; each tree gets a derived seed."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64).ravel()
    if x.ndim != 2 or len(x) != len(y):
        raise DimensionError(f"features {x.shape} do not match {len(y)} targets")
    if len(y) < 2:
        raise InsufficientDataError("need at least 2 rows to fit trees")
    k = max_features or max(1, math.ceil(math.sqrt(x.shape[1])))
    seeds = np.random.SeedSequence(seed).spawn(n_trees)
    trees = [_grow(x, y, k, min_leaf, np.random.default_rng(s)) for s in seeds]
    return TreeEnsemble(x.shape[1], trees)


def predict_trees(ens: TreeEnsemble, features) -> np.ndarray | float:
    """Mean of per-tree leaf values; accepts one feature vector or a matrix."""
    x = np.asarray(features, np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != ens.n_features:
        raise DimensionError(f"expected {ens.n_features} features, got {x.shape[1]}")
    pred = np.mean([t.predict(x) for t in ens.trees], axis=0)
    return float(pred[0]) if single else pred


def extract_pixel_features(patch: LabeledPatch, band_means: np.ndarray | None = None,
                           band_index: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One row per labeled pixel: the band vector at that pixel and the target.

    NaN features are replaced by ``band_means`` when given.
    """
    mask = patch.labeled_mask
    planes = patch.tile.planes if band_index is None else patch.tile.planes[list(band_index)]
    rows = planes[:, mask].T.astype(np.float64)
    if not np.isfinite(rows).any():
        raise SkipSample(f"patch {patch.source_id!r}: labeled block invalid in every band")
    if band_means is not None:
        rows = np.where(np.isfinite(rows), rows, np.asarray(band_means, np.float64)[None, :])
    return rows, patch.label[mask].astype(np.float64)


def build_rows(patches: Sequence[LabeledPatch], band_index: Sequence[int] | None = None):
    """Stack training rows, impute NaN with per-band training means.

    Returns ``(x, y, band_means, skipped_source_ids)``.
    """
    raw, skipped = [], []
    for p in patches:
        try:
            raw.append(extract_pixel_features(p, band_index=band_index))
        except SkipSample:
            skipped.append(p.source_id)
    if not raw:
        raise InsufficientDataError("no usable training patches")
    x = np.concatenate([r[0] for r in raw])
    y = np.concatenate([r[1] for r in raw])
    means = np.nanmean(x, axis=0)
    means = np.where(np.isfinite(means), means, 0.0)
    x = np.where(np.isfinite(x), x, means[None, :])
    return x, y, means, skipped


@dataclass
class TreeBaseline:
    """Fitted ensemble (carrying its imputation means), usable on patches and planes."""
    ensemble: TreeEnsemble
    band_index: list[int] | None = None

    @property
    def band_means(self) -> np.ndarray:
        return self.ensemble.fill

    def predict_block(self, patch: LabeledPatch) -> np.ndarray:
        rows, _ = extract_pixel_features(patch, self.band_means, self.band_index)
        return predict_trees(self.ensemble, rows)

    def predict(self, planes: np.ndarray) -> np.ndarray:
        """Per-pixel prediction over a ``C x H x W`` array; all-NaN pixels stay NaN."""
        x = planes if self.band_index is None else planes[self.band_index]
        c, h, w = x.shape
        rows = x.reshape(c, -1).T.astype(np.float64)
        empty = ~np.isfinite(rows).any(axis=1)
        rows = np.where(np.isfinite(rows), rows, self.band_means[None, :])
        out = predict_trees(self.ensemble, rows)
        out[empty] = np.nan
        return out.reshape(h, w).astype(np.float32)


def fit_baseline(patches: Sequence[LabeledPatch], n_trees: int = 100, seed: int = 0,
                 band_index: Sequence[int] | None = None) -> TreeBaseline:
    x, y, means, _ = build_rows(patches, band_index)
    ens = fit_trees(x, y, n_trees, seed)
    ens.fill = means
    return TreeBaseline(ens, None if band_index is None else list(band_index))


def encode_ensemble(ens: TreeEnsemble) -> bytes:
    """ETR1: magic, u16 version, u32 n_features, u32 n_trees, n_features f64
    imputation values, then per tree u32 n_nodes and the node arrays
    (i32 feature, f64 threshold, i32 left, i32 right, f64 value)."""
    fill = np.zeros(ens.n_features) if ens.fill is None else ens.fill
    parts = [ETR_MAGIC, struct.pack("<HII", ETR_VERSION, ens.n_features, len(ens.trees)),
             np.asarray(fill, "<f8").tobytes()]
    for t in ens.trees:
        parts.append(struct.pack("<I", len(t.value)))
        parts += [t.feature.astype("<i4").tobytes(), t.threshold.astype("<f8").tobytes(),
                  t.left.astype("<i4").tobytes(), t.right.astype("<i4").tobytes(),
                  t.value.astype("<f8").tobytes()]
    return b"".join(parts)


def decode_ensemble(buf: bytes) -> TreeEnsemble:
    if buf[:4] != ETR_MAGIC:
        raise FormatError("bad magic", 0)
    if len(buf) < 14:
        raise FormatError("truncated header", len(buf))
    version, n_features, n_trees = struct.unpack_from("<HII", buf, 4)
    if version != ETR_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    off = 14
    if off + 8 * n_features > len(buf):
        raise FormatError("truncated imputation table", off)
    fill = np.frombuffer(buf, dtype="<f8", count=n_features, offset=off).astype(np.float64)
    off += 8 * n_features
    trees = []
    for _ in range(n_trees):
        if off + 4 > len(buf):
            raise FormatError("truncated tree table", off)
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        need = n * (4 + 8 + 4 + 4 + 8)
        if off + need > len(buf):
            raise FormatError("truncated tree", off)
        arrays = []
        for dt in ("<i4", "<f8", "<i4", "<i4", "<f8"):
            a = np.frombuffer(buf, dtype=dt, count=n, offset=off)
            arrays.append(a.astype(np.dtype(dt[1:])))
            off += a.nbytes
        trees.append(Tree(*arrays))
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", off)
    return TreeEnsemble(n_features, trees, fill)


def write_ensemble(ens: TreeEnsemble, path) -> int:
    return atomic_write(path, encode_ensemble(ens))


def read_ensemble(path) -> TreeEnsemble:
    with open(path, "rb") as fh:
        return decode_ensemble(fh.read())
