"""Donut ROI construction, correlation scoring, MAD-threshold rejection."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtmoco import selection as sel
from dtmoco import stack as stk
from dtmoco.stack import Annotations

from conftest import make_small_stack


def annulus_annotations(n=61, center=30.0, r_in=10.0, r_out=20.0) -> Annotations:
    xs = np.arange(n)[:, None]
    ys = np.arange(n)[None, :]
    r = np.hypot(xs - center, ys - center)
    mask = ((r >= r_in) & (r <= r_out)).astype(np.uint8)
    return Annotations(mask, (center, center))


# ---------------------------------------------------------------------------
# ROI geometry

def test_donut_radii_from_boundary_distances():
    # nearest boundary distance 10, farthest 20 -> band [9.5, 21.0]
    roi = sel.donut_roi(annulus_annotations())
    assert roi.inner_radius == pytest.approx(0.95 * 10.0, rel=1e-12)
    assert roi.outer_radius == pytest.approx(1.05 * 20.0, rel=1e-12)
    assert roi.center == (30.0, 30.0)


def test_donut_single_pixel_ring():
    n, c, r0 = 41, 20.0, 8.0
    xs = np.arange(n)[:, None]
    ys = np.arange(n)[None, :]
    r = np.hypot(xs - c, ys - c)
    ring = (np.abs(r - r0) <= 0.5).astype(np.uint8)
    roi = sel.donut_roi(Annotations(ring, (c, c)))
    dmin = r[ring == 1].min()
    dmax = r[ring == 1].max()
    assert roi.inner_radius == pytest.approx(0.95 * dmin, rel=1e-12)
    assert roi.outer_radius == pytest.approx(1.05 * dmax, rel=1e-12)


def test_donut_covers_phantom_myocardium(still_phantom, still_roi):
    _, _, ann, _ = still_phantom
    myo = ann.myo_mask.astype(bool)
    covered = (still_roi.mask.astype(bool) & myo).sum() / myo.sum()
    assert covered >= 0.99


def test_roi_sample_order_and_shape_check():
    roi = sel.donut_roi(annulus_annotations())
    img = np.arange(61 * 61, dtype=np.float64).reshape(61, 61)
    vals = roi.sample(img)
    pix = np.argwhere(roi.mask != 0)
    assert np.array_equal(vals, img[pix[:, 0], pix[:, 1]])
    with pytest.raises(ValueError):
        roi.sample(img[:30, :])


def test_donut_roi_rejects_degenerate_inputs():
    with pytest.raises(stk.DatasetError):
        Annotations(np.zeros((8, 8), np.uint8), (4.0, 4.0))
    mask = np.zeros((8, 8), np.uint8)
    mask[4, 4] = 1
    with pytest.raises(stk.DatasetError):
        Annotations(mask, (4.0, 4.0))       # center on the mask


# ---------------------------------------------------------------------------
# Correlation scoring

def uniform_stack(n_frames=5, seed=0, shape=(61, 61)):
    """Single-configuration stack of identical frames plus the annulus ROI."""
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.2, 1.0, shape)
    data = np.repeat(base[:, :, None], n_frames, axis=2)[:, :, :, None]
    protocol = stk.Protocol((stk.ProtocolEntry(0.0, None),))
    return stk.ImageStack(data, 1.0, protocol), base


def test_identical_frames_score_exactly_one():
    stack, _ = uniform_stack()
    roi = sel.donut_roi(annulus_annotations())
    scores = sel.frame_correlations(stack, roi)
    assert (scores == 1.0).all()


def test_disturbed_frame_is_strict_minimum():
    stack, base = uniform_stack(seed=1)
    data = stack.data.copy()
    rng = np.random.default_rng(2)
    data[:, :, 3, 0] += rng.normal(0, 0.2, base.shape)
    stack = stack.with_data(np.clip(data, 0, None))
    roi = sel.donut_roi(annulus_annotations())
    scores = sel.frame_correlations(stack, roi)
    assert scores[3] < scores.min(initial=np.inf, where=np.arange(5) != 3)
    assert scores[3] < 1.0


def test_scores_invariant_to_global_intensity_scale():
    stack = make_small_stack(nx=61, ny=61, n_ave=4, seed=3)
    roi = sel.donut_roi(annulus_annotations())
    s1 = sel.frame_correlations(stack, roi)
    s2 = sel.frame_correlations(stack.with_data(2.0 * stack.data), roi)
    assert np.allclose(s1, s2, atol=1e-12)


def test_constant_roi_frame_scores_minus_one():
    stack, _ = uniform_stack(seed=4)
    data = stack.data.copy()
    data[:, :, 2, 0] = 0.7
    stack = stack.with_data(data)
    roi = sel.donut_roi(annulus_annotations())
    scores = sel.frame_correlations(stack, roi)
    assert scores[2] == -1.0


def test_per_config_equals_global_for_single_config():
    stack, _ = uniform_stack(seed=5)
    data = stack.data + np.random.default_rng(6).normal(0, 0.05, stack.data.shape)
    stack = stack.with_data(np.clip(data, 0, None))
    roi = sel.donut_roi(annulus_annotations())
    assert np.array_equal(
        sel.frame_correlations(stack, roi, "per_config"),
        sel.frame_correlations(stack, roi, "global"),
    )
    with pytest.raises(ValueError):
        sel.frame_correlations(stack, roi, "per_slice")


# ---------------------------------------------------------------------------
# MAD threshold

def test_threshold_hand_case():
    # median 0.95, |dev| sorted (0,0,0,.01,.01,.01,.02,.02,.33) -> MAD 0.01
    scores = np.array([0.93, 0.94, 0.95, 0.95, 0.95, 0.96, 0.96, 0.97, 0.62])
    thr = sel.rejection_threshold(scores)
    assert thr == pytest.approx(0.95 - 3.0 * 1.4826 * 0.01, abs=1e-12)
    assert thr == pytest.approx(0.905522, abs=1e-6)
    v = sel.reject_outliers(scores)
    assert v.kept_indices().tolist() == [0, 1, 2, 3, 4, 5, 6, 7]
    assert not v.keep[8]


def test_zero_mad_keeps_ties_rejects_below_median():
    v = sel.reject_outliers(np.array([1.0, 1.0, 1.0, 1.0, 0.9]))
    assert v.threshold == 1.0
    assert v.keep.tolist() == [True, True, True, True, False]


def test_rejection_is_one_sided():
    # an upward outlier widens nothing and is itself kept
    v = sel.reject_outliers(np.array([0.5, 0.5, 0.5, 0.99]))
    assert v.keep.all()


def test_reject_outliers_input_guards():
    with pytest.raises(ValueError):
        sel.reject_outliers(np.array([1.0, 0.9]))
    with pytest.raises(ValueError):
        sel.reject_outliers(np.array([np.nan, np.nan, np.nan]))


@settings(max_examples=50)
@given(
    scores=st.lists(st.floats(-1.0, 1.0, allow_nan=False), min_size=3, max_size=40),
    a=st.floats(0.01, 10.0),
    b=st.floats(-5.0, 5.0),
)
def test_keep_set_invariant_under_affine_score_map(scores, a, b):
    s = np.asarray(scores)
    v1 = sel.reject_outliers(s)
    v2 = sel.reject_outliers(a * s + b)
    assert np.array_equal(v1.keep, v2.keep)


def test_corrupted_frame_rejected_on_noiseless_stack():
    stack, _ = uniform_stack(n_frames=6, seed=7)
    ann = annulus_annotations()
    data = stack.data.copy()
    data[:, :, 4, 0] *= np.where(ann.myo_mask.astype(bool), 0.5, 1.0)
    stack = stack.with_data(data)
    v = sel.select_frames(stack, sel.donut_roi(ann))
    assert v.kept_indices().tolist() == [0, 1, 2, 3, 5]


# ---------------------------------------------------------------------------
# Manual verdicts and CSV

def test_manual_verdicts(small_stack):
    v = sel.manual_verdicts(small_stack, [0, 2, 5])
    assert v.kept_indices().tolist() == [0, 2, 5]
    assert np.isnan(v.scores).all()
    with pytest.raises(ValueError):
        sel.manual_verdicts(small_stack, [small_stack.n_frames])
    with pytest.raises(ValueError):
        sel.manual_verdicts(small_stack, [])


def test_keep_all(small_stack):
    v = sel.keep_all(small_stack)
    assert v.n_kept == small_stack.n_frames


def test_verdicts_csv_round_trip(tmp_path, small_stack):
    rng = np.random.default_rng(8)
    scores = rng.uniform(0.8, 1.0, small_stack.n_frames)
    v = sel.reject_outliers(scores)
    path = tmp_path / "verdicts.csv"
    sel.write_verdicts_csv(path, small_stack, v)
    back = sel.read_verdicts_csv(path)
    assert np.array_equal(back.scores, v.scores)
    assert back.threshold == v.threshold
    assert np.array_equal(back.keep, v.keep)


def test_verdicts_csv_round_trip_nan_scores(tmp_path, small_stack):
    v = sel.manual_verdicts(small_stack, [1, 3])
    path = tmp_path / "manual.csv"
    sel.write_verdicts_csv(path, small_stack, v)
    back = sel.read_verdicts_csv(path)
    assert np.isnan(back.scores).all()
    assert np.isnan(back.threshold)
    assert np.array_equal(back.keep, v.keep)
    assert sel.read_keep_list(path) == [1, 3]


def test_read_verdicts_csv_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("frame,r\n0,1.0\n")
    with pytest.raises(ValueError):
        sel.read_verdicts_csv(p)
