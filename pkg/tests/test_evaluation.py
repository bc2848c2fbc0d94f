import itertools

import numpy as np
import pytest

from oceanfm.errors import ConfigurationError, GeometryError, InsufficientDataError
from oceanfm.evaluation import (SSIM_K1, AblationPoint, MetricReport, coverage_counts,
                                format_table, fraction_ablation, gaussian_window, histogram_csv,
                                kfold_split, report_csv, rmse, run_cv, ssim, ssim_map,
                                tiled_inference, window_positions)
from oceanfm.finetune import FRACTION_GRID
from oceanfm.synth import SynthConfig, gen_labeled_dataset


# -- folds ------------------------------------------------------------------------


@pytest.mark.parametrize("n,sizes", [(103, [21, 21, 21, 20, 20]), (188, [38, 38, 38, 37, 37]),
                                     (5, [1, 1, 1, 1, 1])])
def test_kfold_sizes(n, sizes):
    plan = kfold_split(n, 5, seed=0)
    assert [len(f) for f in plan.folds] == sizes


def test_kfold_partition_and_determinism():
    plan = kfold_split(103, 5, seed=3)
    allidx = np.sort(np.concatenate(plan.folds))
    assert np.array_equal(allidx, np.arange(103))
    for i in range(5):
        tr = plan.train_indices(i)
        assert len(tr) + len(plan.folds[i]) == 103
        assert not set(tr) & set(plan.folds[i])
    again = kfold_split(103, 5, seed=3)
    assert all(np.array_equal(a, b) for a, b in zip(plan.folds, again.folds))
    other = kfold_split(103, 5, seed=4)
    assert not all(np.array_equal(a, b) for a, b in zip(plan.folds, other.folds))


def test_kfold_too_few():
    with pytest.raises(InsufficientDataError):
        kfold_split(4, 5)


# -- rmse -------------------------------------------------------------------------


def test_rmse_examples():
    assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert rmse([0, 0], [3, 4]) == pytest.approx(np.sqrt(12.5))
    rng = np.random.default_rng(0)
    p, t = rng.normal(size=50), rng.normal(size=50)
    ref = (sum((a - b) ** 2 for a, b in zip(p, t)) / 50) ** 0.5
    assert rmse(p, t) == pytest.approx(ref, rel=1e-12)
    with pytest.raises(InsufficientDataError):
        rmse([], [])


# -- ssim -------------------------------------------------------------------------


def test_window_is_normalized_gaussian():
    g = gaussian_window()
    assert g.shape == (11, 11) and g.sum() == pytest.approx(1.0)
    assert g[5, 5] == g.max() and np.array_equal(g, g.T)


def test_ssim_identity_is_exactly_one():
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.uniform(-1, 2, size=(40, 37))
        assert ssim(x, x, 3.0) == 1.0
    x[3:9, 4:6] = np.nan
    assert ssim(x, x, 3.0) == 1.0


def test_ssim_symmetric():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 30, 30))
    assert abs(ssim(a, b, 5.0) - ssim(b, a, 5.0)) < 1e-9


@pytest.mark.parametrize("c,d", [(0.3, 0.1), (1.0, -0.5), (2.0, 0.01)])
def test_ssim_constant_offset_luminance(c, d):
    a = np.full((32, 32), c)
    rng_ = 2.0
    c1 = (SSIM_K1 * rng_) ** 2
    expected = (2 * c * (c + d) + c1) / (c * c + (c + d) ** 2 + c1)
    assert abs(ssim(a, a + d, rng_) - expected) < 1e-6


def test_ssim_interior_matches_skimage():
    metrics = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(2)
    a = rng.uniform(0, 1, size=(48, 52))
    b = a + 0.2 * rng.normal(size=a.shape)
    _, ref = metrics.structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                                           use_sample_covariance=False, data_range=1.0, full=True)
    ours = ssim_map(a, b, 1.0)
    np.testing.assert_allclose(ours[5:-5, 5:-5], ref[5:-5, 5:-5], atol=1e-9)


def test_ssim_nan_pixels_excluded():
    rng = np.random.default_rng(3)
    a = rng.uniform(0, 1, size=(30, 30))
    b = a.copy()
    b[10:12, 10:12] = np.nan
    m = ssim_map(a, b, 1.0)
    assert np.isnan(m[10:12, 10:12]).all() and np.isfinite(m).sum() == 900 - 4
    assert ssim(a, b, 1.0) == 1.0
    with pytest.raises(InsufficientDataError):
        ssim(np.full((4, 4), np.nan), a[:4, :4], 1.0)


# -- tiled inference --------------------------------------------------------------


def _brute_coverage(h, w, win, stride):
    starts = lambda n: sorted({*range(0, n - win + 1, stride), n - win})
    cov = np.zeros((h, w), int)
    for r, c in itertools.product(starts(h), starts(w)):
        cov[r:r + win, c:c + win] += 1
    return cov, len(starts(h)) * len(starts(w))


def test_coverage_84_scene():
    assert window_positions(84, 42, 21) == [0, 21, 42]
    cov = coverage_counts(84, 84)
    ref, n = _brute_coverage(84, 84, 42, 21)
    assert n == 9 and np.array_equal(cov, ref)
    assert cov[21:63, 21:63].min() == 4 and cov.min() >= 1


def test_edge_aligned_last_window():
    assert window_positions(100, 42, 21) == [0, 21, 42, 58]
    assert window_positions(42, 42, 21) == [0]
    with pytest.raises(GeometryError):
        window_positions(41, 42, 21)


def test_tiled_constant_and_identity():
    scene = np.random.default_rng(0).normal(size=(3, 84, 90)).astype(np.float32)
    const = tiled_inference(lambda x: np.full(x.shape[1:], 0.5), scene)
    assert np.all(const == np.float32(0.5))
    ident = tiled_inference(lambda x: x[0], scene)
    np.testing.assert_allclose(ident, scene[0], atol=1e-6)
    single = tiled_inference(lambda x: x[1] * 2, scene[:, :42, :42])
    assert np.array_equal(single, scene[1, :42, :42] * 2)


def test_tiled_nan_outputs_do_not_vote():
    scene = np.zeros((1, 84, 84), np.float32)
    calls = []

    def fn(x):
        calls.append(1)
        return np.full(x.shape[1:], np.nan if len(calls) == 1 else 1.0)

    out = tiled_inference(fn, scene)
    assert np.isnan(out[:21, :21]).all()  # only the first window covers the corner
    assert np.all(out[21:, 21:] == 1.0)


# -- cross-validation ---------------------------------------------------------------


@pytest.fixture(scope="module")
def data():
    return gen_labeled_dataset(SynthConfig(seed=31), 25)


class _Oracle:
    def predict_block(self, p):
        return np.full(9, p.value)


class _Const:
    def __init__(self, v):
        self.v = v

    def predict_block(self, p):
        return np.full(9, self.v)


def test_run_cv_perfect_and_mean(data):
    folds = kfold_split(len(data), 5, 0)
    rep = run_cv(data, lambda tr, i: _Oracle(), folds, "oracle", "chl")
    assert rep.per_fold == [0.0] * 5 and rep.mean == 0.0 and rep.complete
    vals = np.array([p.value for p in data], np.float32).astype(np.float64)
    rep = run_cv(data, lambda tr, i: _Const(float(vals.mean())), kfold_split(25, 25, 0))
    assert np.sqrt(np.mean(np.square(rep.per_fold))) == pytest.approx(vals.std(), rel=1e-6)


def test_run_cv_records_failures(data):
    folds = kfold_split(len(data), 5, 0)

    def factory(tr, i):
        if i == 2:
            raise InsufficientDataError("boom")
        return _Oracle()

    rep = run_cv(data, factory, folds)
    assert rep.per_fold[2] is None and "boom" in rep.failures[2]
    assert not rep.complete and rep.ok_folds == [0.0] * 4 and rep.mean == 0.0
    with pytest.raises(ConfigurationError):
        run_cv(data[:-1], factory, folds)


def test_ablation_full_fraction_equals_cv(data):
    folds = kfold_split(len(data), 5, 0)
    seen = []

    def factory(tr, i):
        seen.append(len(tr))
        return _Const(float(np.mean([p.value for p in tr])))

    curve = fraction_ablation(data, factory, folds, seed=1)
    assert [p.fraction for p in curve] == list(FRACTION_GRID) and len(curve) == 8
    rep = run_cv(data, factory, folds)
    assert curve[-1].mean == rep.mean and curve[-1].std == rep.std
    assert curve[-1].n_train == [20] * 5
    assert curve[0].n_train == [2] * 5  # floor(20 / 8)
    assert not any(p.skipped for p in curve)


def test_ablation_skips_tiny_subsets(data):
    small = data[:10]
    curve = fraction_ablation(small, lambda tr, i: _Oracle(), kfold_split(10, 5, 0), [0.125, 1.0])
    assert curve[0].skipped and curve[0].n_train == [1] * 5
    assert not curve[1].skipped
    with pytest.raises(ConfigurationError):
        fraction_ablation(small, lambda tr, i: _Oracle(), kfold_split(10, 5, 0), [0.3])


# -- reports ----------------------------------------------------------------------


def test_format_table_and_csv():
    reps = [MetricReport("ExtraTrees", "chl", [0.1, 0.2], [None, None]),
            MetricReport("Scratch", "chl", [0.3, None], [None, "Err: x"])]
    table = format_table(reps)
    assert "0.150 +/- 0.050" in table and "0.300 +/- 0.000" in table
    assert table.splitlines()[0].startswith("Model")
    csv = report_csv(reps)
    assert "Scratch,chl,1,,Err: x" in csv and csv.startswith("model,task,fold,rmse,failure")


def test_histogram_counts_valid_pixels():
    planes = np.arange(100, dtype=np.float32).reshape(1, 10, 10)
    planes[0, 0, :5] = np.nan
    rows = histogram_csv(planes, ["chl"]).splitlines()[1:]
    assert len(rows) == 64
    assert sum(int(r.split(",")[-1]) for r in rows) == 95


def test_ablation_point_fields():
    p = AblationPoint(0.5, 0.1, 0.01, [4, 4])
    assert not p.skipped
