import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jsms import flow as F
from jsms import netgraph as ng
from jsms.errors import DimensionError, FormatError

from oracles import block_mean


def test_magnitude_examples():
    f = np.zeros((2, 3, 2), np.float32)
    f[0, 1] = (3, 4)
    m = F.flow_magnitude(f)
    assert m[0, 1] == 5.0
    assert not m[1].any()


def test_magnitude_vs_hypot():
    f = np.random.default_rng(0).normal(scale=4, size=(17, 13, 2)).astype(np.float32)
    ref = np.array([[math.hypot(float(u), float(v)) for u, v in row] for row in f])
    assert np.max(np.abs(F.flow_magnitude(f) - ref)) <= 1e-5


def test_normalize_quantize_endpoints_and_midpoint():
    out = F.normalize_quantize(np.arange(11, dtype=np.float32))
    assert out[0] == 1.0 and out[10] == 2.0
    assert out[5] == np.float32(1 + 127 / 255)
    assert round(float(out[5]), 3) == 1.498


def test_normalize_quantize_constant():
    np.testing.assert_array_equal(F.normalize_quantize(np.full((4, 4), 3.3)), np.ones((4, 4), np.float32))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (6, 7), elements=st.floats(0, 100, width=32)))
def test_normalize_quantize_levels(m):
    out = F.normalize_quantize(m)
    assert out.min() >= 1 and out.max() <= 2
    k = np.rint((out.astype(np.float64) - 1) * 255)
    np.testing.assert_array_equal(out, (1 + k / 255).astype(np.float32))


def test_sign_flip_and_mirror_commute():
    f = np.random.default_rng(1).normal(size=(9, 11, 2)).astype(np.float32)
    a = F.normalize_quantize(F.flow_magnitude(-f[:, ::-1]))
    b = F.normalize_quantize(F.flow_magnitude(f))[:, ::-1]
    np.testing.assert_array_equal(a, b)


def test_resize_constant_and_quadrants():
    np.testing.assert_array_equal(F.resize_to_feature_grid(np.full((8, 12), 1.5), 2, 3), np.full((2, 3), 1.5))
    q = np.block([[np.full((2, 2), 1.0), np.full((2, 2), 1.25)], [np.full((2, 2), 1.5), np.full((2, 2), 2.0)]])
    np.testing.assert_array_equal(F.resize_to_feature_grid(q, 2, 2), [[1.0, 1.25], [1.5, 2.0]])


def test_resize_block_mean_oracle():
    m = np.random.default_rng(2).uniform(1, 2, size=(64, 64)).astype(np.float32)
    out = F.resize_to_feature_grid(m, 16, 16)
    assert np.max(np.abs(out - block_mean(m, 4, 4))) <= 1e-6


def test_resize_non_integer_factor_stays_in_range():
    m = np.random.default_rng(3).uniform(1, 2, size=(10, 7)).astype(np.float32)
    out = F.resize_to_feature_grid(m, 3, 3)
    assert out.shape == (3, 3)
    assert out.min() >= m.min() and out.max() <= m.max()
    # total mass is preserved by area weighting
    assert abs(out.mean() - m.astype(np.float64).mean()) < 1e-6


def test_resize_upsizing_logs(caplog):
    with caplog.at_level("WARNING"):
        out = F.resize_to_feature_grid(np.ones((2, 2)), 4, 4)
    assert out.shape == (4, 4) and "upsized" in caplog.text


def test_amplify_examples():
    feats = np.random.default_rng(4).normal(size=(2, 5, 4, 6)).astype(np.float32)
    np.testing.assert_array_equal(F.amplify(feats, np.ones((4, 6))), feats)
    np.testing.assert_array_equal(F.amplify(feats, np.full((4, 6), 2.0)), 2 * feats)
    amp = np.random.default_rng(5).uniform(1, 2, size=(4, 6)).astype(np.float32)
    np.testing.assert_array_equal(F.amplify(feats, amp), feats * np.tile(amp, (2, 5, 1, 1)))
    with pytest.raises(DimensionError):
        F.amplify(feats, np.ones((6, 4)))


def test_amplify_monotone_nonnegative():
    rng = np.random.default_rng(6)
    feats = np.abs(rng.normal(size=(1, 3, 5, 5))).astype(np.float32)
    a1 = rng.uniform(1, 2, size=(5, 5)).astype(np.float32)
    a2 = np.minimum(a1 + rng.uniform(0, 0.5, size=(5, 5)).astype(np.float32), 2)
    assert np.all(np.abs(F.amplify(feats, a1)) <= np.abs(F.amplify(feats, a2)))


def test_fast_region_reaches_top_level():
    f = np.zeros((64, 64, 2), np.float32)
    f[..., 0] = -1  # ego-motion
    f[20:36, 8:28] = (4, 3)
    amp = F.amplifier_map(f, 16, 16)
    assert amp.max() == 2.0
    ys, xs = np.nonzero(amp == 2.0)
    assert ys.min() >= 5 and ys.max() <= 8 and xs.min() >= 2 and xs.max() <= 6


def test_freeze_feature_convs():
    spec = F.freeze_feature_convs(ng.build_front_end("toy", 6))
    frozen = [l.name for l in spec.convs if l.freeze]
    assert frozen == ["conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2"]
    assert [l.name for l in spec.convs if not l.freeze] == ["fc1", "fc2", "head"]
    assert F.freeze_feature_convs(spec) == spec


def test_flo_roundtrip_and_layout(tmp_path):
    f = np.random.default_rng(7).normal(size=(5, 7, 2)).astype(np.float32)
    p = tmp_path / "a.flo"
    F.write_flo(p, f)
    raw = p.read_bytes()
    assert np.frombuffer(raw[:4], "<f4")[0] == 202021.25
    assert raw[:4] == b"PIEH"
    assert np.frombuffer(raw[4:12], "<i4").tolist() == [7, 5]
    back = F.read_flo(p)
    assert back.tobytes() == f.tobytes()


def test_flo_rejects_bad_magic_and_truncation(tmp_path):
    f = np.zeros((3, 4, 2), np.float32)
    p = tmp_path / "a.flo"
    F.write_flo(p, f)
    raw = p.read_bytes()
    (tmp_path / "bad.flo").write_bytes(b"ABCD" + raw[4:])
    with pytest.raises(FormatError) as e:
        F.read_flo(tmp_path / "bad.flo")
    assert e.value.offset == 0
    (tmp_path / "short.flo").write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        F.read_flo(tmp_path / "short.flo")
