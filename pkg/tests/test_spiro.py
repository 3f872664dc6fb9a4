import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import exhale
from oracles import dense_features, forward_difference
from spiroembed.exceptions import BlowRejected, ValidationError
from spiroembed.spiro import (
    CURVE_LENGTH,
    BlowCriteria,
    FlowVolumeCurve,
    VolumeTimeSeries,
    blows_to_rows,
    check_blow_validity,
    curves_to_rows,
    derive_features,
    make_flow_volume,
    ml_to_liters,
    read_blows_csv,
    read_curves_csv,
    select_first_valid,
    volume_to_flow,
)


class TestMlToLiters:
    @pytest.mark.parametrize(
        "raw, expected",
        [([0], [0.0]), ([1000, 2500], [1.0, 2.5]), ([3414], [3.414])],
    )
    def test_examples(self, raw, expected):
        np.testing.assert_array_equal(ml_to_liters(raw), expected)

    @pytest.mark.parametrize("bad", [[-1.0], [np.nan], [np.inf]])
    def test_rejects(self, bad):
        with pytest.raises(ValidationError):
            ml_to_liters(bad)


class TestVolumeToFlow:
    def test_constant(self):
        np.testing.assert_array_equal(volume_to_flow(VolumeTimeSeries("a", [1.0, 1.0, 1.0])), [0, 0, 0])

    def test_ramp(self):
        flow = volume_to_flow(VolumeTimeSeries("a", [0.0, 0.01, 0.02]))
        np.testing.assert_allclose(flow, [1.0, 1.0, 1.0], rtol=1e-12)

    def test_matches_loop_oracle(self):
        v = np.cumsum(np.random.default_rng(0).uniform(0, 0.05, 50))
        np.testing.assert_allclose(volume_to_flow(VolumeTimeSeries("a", v)), forward_difference(v, 0.01), rtol=1e-12)

    def test_needs_two_samples(self):
        with pytest.raises(ValidationError):
            volume_to_flow(VolumeTimeSeries("a", [1.0]))

    @given(
        a=st.floats(-3, 3, allow_nan=False),
        b=st.floats(-3, 3, allow_nan=False),
        seed=st.integers(0, 2**16),
    )
    def test_linear(self, a, b, seed):
        rng = np.random.default_rng(seed)
        v1, v2 = rng.normal(size=(2, 30))
        lhs = volume_to_flow(VolumeTimeSeries("a", a * v1 + b * v2))
        rhs = a * volume_to_flow(VolumeTimeSeries("a", v1)) + b * volume_to_flow(VolumeTimeSeries("a", v2))
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestBlowValidity:
    def test_accepts_normal_blow(self):
        assert check_blow_validity(exhale(n=600, fvc=3.0))

    def test_too_small(self):
        check = check_blow_validity(exhale(fvc=0.1))
        assert not check and check.reason == "too_small"

    def test_non_monotone(self):
        v = exhale().samples.copy()
        v[300:] -= 0.2
        check = check_blow_validity(VolumeTimeSeries("a", v))
        assert not check and check.reason == "non_monotone"

    def test_too_short(self):
        check = check_blow_validity(exhale(n=40, tau=0.05))
        assert not check and check.reason == "too_short"

    def test_tolerates_jitter_within_tolerance(self):
        v = exhale().samples.copy()
        v[100] -= 5e-7
        assert check_blow_validity(VolumeTimeSeries("a", v))

    def test_thresholds_configurable(self):
        assert check_blow_validity(exhale(fvc=0.3), BlowCriteria(min_volume_l=0.2))


class TestMakeFlowVolume:
    def test_padding(self):
        c = make_flow_volume(exhale(n=600))
        assert c.valid_len == 600
        assert c.volume.shape == c.flow.shape == (CURVE_LENGTH,)
        assert np.all(c.volume[600:] == 0) and np.all(c.flow[600:] == 0)

    def test_exact_length(self):
        c = make_flow_volume(exhale(n=1000))
        assert c.valid_len == 1000

    def test_truncates_long_blows(self):
        c = make_flow_volume(exhale(n=1400))
        assert c.valid_len == 1000
        np.testing.assert_array_equal(c.volume, exhale(n=1400).samples[:1000])

    def test_composes_with_flow(self, blow):
        c = make_flow_volume(blow)
        n = c.valid_len
        np.testing.assert_array_equal(c.volume[:n], blow.samples)
        np.testing.assert_array_equal(c.flow[:n], volume_to_flow(blow))

    def test_rejection_carries_reason(self):
        with pytest.raises(BlowRejected) as err:
            make_flow_volume(exhale(fvc=0.1, subject_id="x1"))
        assert err.value.reason == "too_small" and err.value.subject_id == "x1"

    def test_deterministic(self, blow):
        a, b = make_flow_volume(blow), make_flow_volume(blow)
        assert a.volume.tobytes() == b.volume.tobytes() and a.flow.tobytes() == b.flow.tobytes()

    def test_curve_is_immutable(self, curve):
        with pytest.raises(ValueError):
            curve.flow[0] = 1.0

    def test_rejects_nonzero_padding(self):
        vol = np.zeros(CURVE_LENGTH)
        vol[:10] = np.linspace(0, 1, 10)
        vol[500] = 1.0
        with pytest.raises(ValidationError):
            FlowVolumeCurve(vol, np.zeros(CURVE_LENGTH), 10)


class TestFeatures:
    def test_triangular_pef(self):
        flow = np.zeros(CURVE_LENGTH)
        flow[:21] = np.concatenate([np.linspace(0, 8, 11), np.linspace(8, 0, 11)[1:]])
        vol = np.zeros(CURVE_LENGTH)
        vol[:21] = np.cumsum(flow[:21]) * 0.01
        assert derive_features(FlowVolumeCurve(vol, flow, 21)).pef == 8.0

    def test_constant_flow(self):
        n = 401
        vol = np.zeros(CURVE_LENGTH)
        vol[:n] = np.linspace(0, 4.0, n)
        flow = np.zeros(CURVE_LENGTH)
        flow[:n] = 1.0
        f = derive_features(FlowVolumeCurve(vol, flow, n))
        assert f.fef25 == f.fef50 == f.fef75 == 1.0
        assert f.fvc == 4.0

    def test_matches_dense_oracle(self, curve):
        f = derive_features(curve)
        ref = dense_features(curve.volume, curve.flow, curve.valid_len)
        for name in ("fvc", "fev1", "pef", "fef25", "fef50", "fef75"):
            assert getattr(f, name) == pytest.approx(ref[name], abs=1e-6)

    def test_ordering(self, curve):
        f = derive_features(curve)
        assert f.fvc >= f.fev1 >= 0
        assert f.pef >= max(f.fef25, f.fef50, f.fef75)

    def test_short_blow_fev1_is_fvc(self):
        f = derive_features(make_flow_volume(exhale(n=80, tau=0.1)))
        assert f.fev1 == f.fvc

    def test_zero_fvc(self):
        vol = np.zeros(CURVE_LENGTH)
        with pytest.raises(ValidationError):
            derive_features(FlowVolumeCurve(vol, np.zeros(CURVE_LENGTH), 5))


class TestSelection:
    def test_first_valid_wins(self):
        blows = [exhale(fvc=0.1, subject_id="a"), exhale(fvc=3.0, subject_id="a"), exhale(fvc=2.0, subject_id="a")]
        curves, rejected = select_first_valid(blows)
        assert len(curves) == 1 and curves[0].volume[curves[0].valid_len - 1] == pytest.approx(3.0, rel=1e-3)
        assert rejected == {}

    def test_reports_rejects(self):
        curves, rejected = select_first_valid([exhale(fvc=0.1, subject_id="b")])
        assert curves == [] and rejected == {"b": "too_small"}


class TestCsv:
    def _write(self, path, header, rows):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)

    def test_blows_round_trip(self, tmp_path):
        blows = [exhale(n=120, subject_id="a"), exhale(n=90, subject_id="b")]
        self._write(tmp_path / "b.csv", *blows_to_rows(blows))
        back = read_blows_csv(tmp_path / "b.csv")
        assert [b.subject_id for b in back] == ["a", "b"]
        for x, y in zip(blows, back):
            np.testing.assert_allclose(x.samples, y.samples, rtol=1e-15)
            assert y.sample_period_s == 0.01

    def test_blow_input_in_milliliters(self, tmp_path):
        (tmp_path / "b.csv").write_text("subject_id,period_ms,v0,v1,v2\nq,10,0,1000,2500\n")
        (b,) = read_blows_csv(tmp_path / "b.csv")
        np.testing.assert_array_equal(b.samples, [0.0, 1.0, 2.5])

    def test_curves_round_trip_exact(self, tmp_path, curve):
        self._write(tmp_path / "c.csv", *curves_to_rows([curve]))
        (back,) = read_curves_csv(tmp_path / "c.csv")
        assert back.volume.tobytes() == curve.volume.tobytes()
        assert back.flow.tobytes() == curve.flow.tobytes()
        assert back.valid_len == curve.valid_len

    def test_curve_header(self, curve):
        header, _ = curves_to_rows([curve])
        assert header[:3] == ["subject_id", "valid_len", "volume_0"]
        assert header[-1] == "flow_999" and len(header) == 2002
