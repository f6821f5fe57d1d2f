"""Config averaging, log-linear tensor fit, 3x3 eigensystem, helix angles."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtmoco import dti
from dtmoco import selection as sel
from dtmoco import stack as stk
from dtmoco.stack import Protocol, ProtocolEntry

from conftest import make_small_stack

H = 1.0 / np.sqrt(2.0)

SIX_DIRECTIONS = (
    (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0),
    (H, H, 0.0), (H, 0.0, H), (0.0, H, H),
)


def seven_config_entries(b=600.0):
    return (ProtocolEntry(0.0, None),) + tuple(ProtocolEntry(b, g) for g in SIX_DIRECTIONS)


# ---------------------------------------------------------------------------
# Oracle: eigenvalues of a symmetric 3x3 from the characteristic polynomial
# (trigonometric closed form), sharing nothing with np.linalg.eigh.

def eig3_trig_oracle(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    p1 = d[0, 1] ** 2 + d[0, 2] ** 2 + d[1, 2] ** 2
    if p1 == 0.0:
        return np.sort(np.diag(d))[::-1]
    q = np.trace(d) / 3.0
    p2 = (d[0, 0] - q) ** 2 + (d[1, 1] - q) ** 2 + (d[2, 2] - q) ** 2 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    b = (d - q * np.eye(3)) / p
    r = np.clip(np.linalg.det(b) / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    lo = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    hi = q + 2.0 * p * np.cos(phi)
    return np.array([hi, 3.0 * q - hi - lo, lo])


def random_symmetric(rng, scale=1.0):
    a = rng.standard_normal((3, 3)) * scale
    return (a + a.T) / 2.0


def test_trig_oracle_self_check():
    assert eig3_trig_oracle(np.diag([3.0, -1.0, 2.0])).tolist() == [3.0, 2.0, -1.0]
    assert np.allclose(eig3_trig_oracle(np.eye(3)), 1.0, atol=1e-15)


# ---------------------------------------------------------------------------
# eig3_sym

def test_eig3_identity():
    vals, vecs = dti.eig3_sym(np.eye(3))
    assert vals == pytest.approx([1.0, 1.0, 1.0], abs=1e-14)
    assert np.allclose(vecs, np.eye(3), atol=1e-12)


def test_eig3_diagonal_sorted_descending():
    vals, vecs = dti.eig3_sym(np.diag([3.0, -1.0, 2.0]))
    assert vals == pytest.approx([3.0, 2.0, -1.0], abs=1e-14)
    assert np.allclose(np.abs(vecs), np.eye(3)[:, [0, 2, 1]], atol=1e-12)
    assert (vecs[np.argmax(np.abs(vecs), axis=0), [0, 1, 2]] > 0).all()


def test_eig3_matches_characteristic_polynomial_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        d = random_symmetric(rng, scale=rng.uniform(1e-3, 10.0))
        vals, vecs = dti.eig3_sym(d)
        scale = max(1.0, float(np.abs(d).max()))
        assert np.abs(vals - eig3_trig_oracle(d)).max() < 1e-9 * scale
        # residual and orthonormality
        assert np.abs(d @ vecs - vecs * vals[None, :]).max() < 1e-9 * scale
        assert np.allclose(vecs.T @ vecs, np.eye(3), atol=1e-9)


@settings(max_examples=60)
@given(coeffs=st.lists(st.floats(-5.0, 5.0, allow_nan=False), min_size=6, max_size=6))
def test_eig3_trace_and_determinant(coeffs):
    xx, yy, zz, xy, xz, yz = coeffs
    d = np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])
    vals, _ = dti.eig3_sym(d)
    scale = max(1.0, float(np.abs(d).max()))
    assert vals.sum() == pytest.approx(np.trace(d), abs=1e-9 * scale)
    assert vals.prod() == pytest.approx(np.linalg.det(d), abs=1e-8 * scale**3)


def test_eig3_degenerate_pair_takes_axis_basis():
    # double eigenvalue on span{x, y}: basis maximizing |x| then |y| is x, y
    vals, vecs = dti.eig3_sym(np.diag([5.0, 5.0, 2.0]))
    assert vals == pytest.approx([5.0, 5.0, 2.0], abs=1e-12)
    assert np.allclose(vecs, np.eye(3), atol=1e-9)


def test_eig3_rejects_bad_input():
    with pytest.raises(ValueError):
        dti.eig3_sym(np.eye(2))
    with pytest.raises(ValueError):
        dti.eig3_sym(np.array([[1.0, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))


# ---------------------------------------------------------------------------
# Averaging

def test_average_by_config_means_and_counts():
    s = make_small_stack(n_ave=3, seed=1)
    data = np.empty_like(s.data)
    for a in range(3):
        for d in range(3):
            data[:, :, a, d] = 10 * d + a   # frame value encodes its slot
    s = s.with_data(data)
    keep = np.ones(9, dtype=bool)
    keep[s.frame_index(2, 0)] = False       # config 0 keeps values 0, 1
    means = dti.average_by_config(s, sel.FrameVerdicts(np.ones(9), 0.0, keep))
    assert means.counts == (2, 3, 3)
    assert np.allclose(means.images[0], 0.5)
    assert np.allclose(means.images[1], 11.0)
    assert means.entries[0].is_b0


def test_average_by_config_zero_kept_raises_with_config_name():
    s = make_small_stack(n_ave=2, seed=2)
    keep = np.ones(6, dtype=bool)
    keep[s.frame_index(0, 1)] = keep[s.frame_index(1, 1)] = False
    with pytest.raises(ValueError, match="b=150"):
        dti.average_by_config(s, sel.FrameVerdicts(np.ones(6), 0.0, keep))


def test_average_by_config_length_mismatch():
    s = make_small_stack()
    with pytest.raises(ValueError):
        dti.average_by_config(s, sel.FrameVerdicts(np.ones(4), 0.0, np.ones(4, bool)))


# ---------------------------------------------------------------------------
# Design matrix

def test_design_matrix_hand_rows():
    rows = dti.design_matrix((
        ProtocolEntry(0.0, None),
        ProtocolEntry(600.0, (1.0, 0.0, 0.0)),
        ProtocolEntry(600.0, (H, H, 0.0)),
    ))
    assert rows[0].tolist() == [1, 0, 0, 0, 0, 0, 0]
    assert np.allclose(rows[1], [1, -600, 0, 0, 0, 0, 0])
    assert np.allclose(rows[2], [1, -300, -300, 0, -600, 0, 0])


# ---------------------------------------------------------------------------
# Tensor fit

def simulate_means(d, s0, entries, shape=(4, 3)):
    """Closed-form S = s0 exp(-b g^T D g) per configuration, constant field."""
    images = np.empty((len(entries),) + shape)
    for i, e in enumerate(entries):
        if e.direction is None:
            images[i] = s0
        else:
            g = np.asarray(e.direction)
            images[i] = s0 * np.exp(-e.b * g @ d @ g)
    return dti.ConfigMeans(entries, images, (1,) * len(entries))


def test_fit_tensor_isotropic_exact():
    d = 1e-3 * np.eye(3)
    means = simulate_means(d, 1.0, seven_config_entries())
    field = dti.fit_tensor(means, np.ones((4, 3), bool))
    assert np.abs(field.s0 - 1.0).max() < 1e-12
    assert np.abs(field.d6[..., :3] - 1e-3).max() < 1e-12
    assert np.abs(field.d6[..., 3:]).max() < 1e-12
    assert not field.clamped.any()
    assert field.evals[0, 0] == pytest.approx([1e-3, 1e-3, 1e-3], rel=1e-9)


def test_fit_tensor_rotated_diagonal():
    c, s = np.cos(np.radians(30.0)), np.sin(np.radians(30.0))
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    d = rot @ np.diag([1.5e-3, 0.8e-3, 0.4e-3]) @ rot.T
    means = simulate_means(d, 0.9, seven_config_entries())
    field = dti.fit_tensor(means, np.ones((4, 3), bool))
    assert np.abs(field.tensor_at(1, 2) - d).max() < 1e-10
    assert field.evals[1, 2] == pytest.approx([1.5e-3, 0.8e-3, 0.4e-3], rel=1e-6)
    e1 = field.evecs[1, 2][:, 0]
    assert abs(abs(e1 @ rot[:, 0]) - 1.0) < 1e-6


def test_fit_tensor_needs_seven_independent_configs():
    entries = (ProtocolEntry(0.0, None), ProtocolEntry(600.0, (1.0, 0.0, 0.0)))
    means = dti.ConfigMeans(entries, np.ones((2, 4, 3)), (1, 1))
    with pytest.raises(ValueError):
        dti.fit_tensor(means, np.ones((4, 3), bool))
    # 7 configs but a rank-deficient design (duplicated direction)
    entries = (ProtocolEntry(0.0, None),) + tuple(
        ProtocolEntry(b, (1.0, 0.0, 0.0)) for b in (100.0, 200.0, 300.0, 400.0, 500.0, 600.0)
    )
    means = dti.ConfigMeans(entries, np.ones((7, 4, 3)), (1,) * 7)
    with pytest.raises(ValueError):
        dti.fit_tensor(means, np.ones((4, 3), bool))


def test_fit_tensor_mask_validation():
    means = simulate_means(1e-3 * np.eye(3), 1.0, seven_config_entries())
    with pytest.raises(ValueError):
        dti.fit_tensor(means, np.zeros((4, 3), bool))
    with pytest.raises(ValueError):
        dti.fit_tensor(means, np.ones((5, 3), bool))


def test_fit_forward_round_trip():
    rng = np.random.default_rng(3)
    entries = seven_config_entries()
    shape = (5, 4)
    base = 1e-3 * np.eye(3)
    d6 = np.empty(shape + (6,))
    for x in range(shape[0]):
        for y in range(shape[1]):
            d = base + 2e-4 * random_symmetric(rng)
            d6[x, y] = (d[0, 0], d[1, 1], d[2, 2], d[0, 1], d[0, 2], d[1, 2])
    s0 = rng.uniform(0.5, 1.5, shape)
    signals = dti.forward_signals(s0, d6, entries)
    means = dti.ConfigMeans(entries, signals, (1,) * len(entries))
    field = dti.fit_tensor(means, np.ones(shape, bool))
    assert np.abs(field.d6 - d6).max() < 1e-9
    assert np.abs(field.s0 - s0).max() < 1e-9


def test_fit_tensor_clamp_flag():
    means = simulate_means(1e-3 * np.eye(3), 1.0, seven_config_entries())
    images = means.images.copy()
    images[3, 2, 1] = 0.0
    means = dti.ConfigMeans(means.entries, images, means.counts)
    field = dti.fit_tensor(means, np.ones((4, 3), bool))
    assert field.clamped[2, 1]
    assert field.clamped.sum() == 1
    assert np.isfinite(field.d6).all()


# ---------------------------------------------------------------------------
# Cardiac frame and helix angle

def test_cardiac_frame_axes():
    frame = dti.cardiac_frame((21, 21), (10.0, 10.0))
    assert np.allclose(frame.radial[15, 10], [1.0, 0.0])
    assert np.allclose(frame.circum[15, 10], [0.0, 1.0])   # z-hat x r-hat
    assert np.allclose(frame.radial[10, 3], [0.0, -1.0])
    assert np.allclose(frame.circum[10, 3], [1.0, 0.0])
    assert not frame.defined[10, 10]
    assert frame.defined.sum() == 21 * 21 - 1


def test_helix_angle_reference_cases():
    frame = dti.cardiac_frame((21, 21), (10.0, 10.0))
    px = (15, 10)                       # +x axis: circum (0, 1, 0) in 3-D
    assert dti.helix_angle(np.array([0.0, 1.0, 0.0]), px, frame) == pytest.approx(0.0, abs=1e-12)
    assert dti.helix_angle(np.array([0.0, 0.0, 1.0]), px, frame) == pytest.approx(90.0, abs=1e-12)
    assert dti.helix_angle(np.array([0.0, H, H]), px, frame) == pytest.approx(45.0, abs=1e-12)
    assert dti.helix_angle(np.array([0.0, H, -H]), px, frame) == pytest.approx(-45.0, abs=1e-12)


def test_helix_angle_sign_and_scale_invariance():
    frame = dti.cardiac_frame((21, 21), (10.0, 10.0))
    rng = np.random.default_rng(4)
    for _ in range(20):
        e1 = rng.standard_normal(3)
        ha = dti.helix_angle(e1, (15, 10), frame)
        assert dti.helix_angle(-e1, (15, 10), frame) == pytest.approx(ha, abs=1e-12)
        assert dti.helix_angle(2.5 * e1, (15, 10), frame) == pytest.approx(ha, abs=1e-12)


def test_helix_angle_radial_vector_is_nan():
    frame = dti.cardiac_frame((21, 21), (10.0, 10.0))
    assert np.isnan(dti.helix_angle(np.array([1.0, 0.0, 0.0]), (15, 10), frame))
    with pytest.raises(ValueError):
        dti.helix_angle(np.array([0.0, 1.0, 0.0]), (10, 10), frame)


def test_helix_angle_map_matches_scalar():
    rng = np.random.default_rng(5)
    shape = (9, 8)
    frame = dti.cardiac_frame(shape, (4.0, 4.0))
    d6 = np.empty(shape + (6,))
    for x in range(shape[0]):
        for y in range(shape[1]):
            d = 1e-3 * np.eye(3) + 4e-4 * random_symmetric(rng)
            d6[x, y] = (d[0, 0], d[1, 1], d[2, 2], d[0, 1], d[0, 2], d[1, 2])
    entries = seven_config_entries()
    signals = dti.forward_signals(np.ones(shape), d6, entries)
    valid = np.ones(shape, bool)
    valid[4, 4] = False                  # LV center has no local frame
    field = dti.fit_tensor(
        dti.ConfigMeans(entries, signals, (1,) * len(entries)), valid)
    ha, ok = dti.helix_angle_map(field, frame)
    assert ha.shape == shape
    assert not ok[4, 4]
    for x, y in np.argwhere(ok):
        scalar = dti.helix_angle(field.evecs[x, y][:, 0], (x, y), frame)
        assert ha[x, y] == pytest.approx(scalar, abs=1e-12)
    assert np.isnan(ha[~ok]).all()


def test_tensor_planes_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    shape = (6, 5)
    d6 = 1e-3 * rng.uniform(0.5, 1.5, shape + (6,))
    entries = seven_config_entries()
    signals = dti.forward_signals(np.ones(shape), d6, entries)
    valid = rng.uniform(size=shape) > 0.2
    field = dti.fit_tensor(
        dti.ConfigMeans(entries, signals, (1,) * len(entries)), valid)
    frame = dti.cardiac_frame(shape, (2.0, 2.0))
    ha, _ = dti.helix_angle_map(field, frame)
    path = tmp_path / "tensor.f32"
    dti.write_tensor_planes(path, field, ha)
    back, ha_back = dti.read_tensor_planes(path, shape)
    assert np.array_equal(back.valid, field.valid)
    assert np.allclose(back.d6, field.d6, rtol=1e-6, atol=1e-12)
    assert np.allclose(back.s0, field.s0, rtol=1e-6)
    both = np.isfinite(ha) & np.isfinite(ha_back)
    assert np.array_equal(np.isfinite(ha), np.isfinite(ha_back))
    assert np.allclose(ha[both], ha_back[both], atol=1e-3)
    assert np.allclose(back.evals[back.valid], field.evals[field.valid],
                       rtol=1e-5, atol=1e-12)
