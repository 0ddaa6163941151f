import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lamp import families as F


def inst(fid, params):
    return F.ShapeInstance(F.get_family(fid), np.asarray(params, dtype=np.float64))


class TestAnalyticSdf:
    def test_sphere_center(self):
        assert F.analytic_sdf(inst("ellipsoid", [0.5, 0.5, 0.5]), (0, 0, 0)) == pytest.approx(-0.5)

    def test_sphere_on_axis_exterior(self):
        assert F.analytic_sdf(inst("ellipsoid", [0.5, 0.5, 0.5]), (1, 0, 0)) == pytest.approx(0.5)

    def test_car_surface_point_on_length_axis(self):
        s = F.analytic_sdf(inst("rounded_box_car", [0.6, 0.4, 0.3, 0.08]), (0.6, 0, 0))
        assert abs(s) < 1e-12

    def test_unknown_family_rejected(self):
        with pytest.raises(F.ConfigurationError):
            F.get_family("torus")

    def test_vectorized_matches_scalar(self):
        i = inst("tapered_wing", [0.7, 0.35, 1.0, 0.1])
        pts = np.random.default_rng(0).uniform(-1, 1, (50, 3))
        batch = F.analytic_sdf(i, pts)
        singles = np.array([F.analytic_sdf(i, p) for p in pts])
        np.testing.assert_allclose(batch, singles, atol=0)

    def test_surface_zero_all_families(self):
        cases = {
            "rounded_box_car": ([0.6, 0.4, 0.3, 0.08], [(0, 0.4, 0), (0, 0, 0.3)]),
            "ellipsoid": ([0.4, 0.5, 0.6], [(0.4, 0, 0), (0, 0, 0.6)]),
            "tapered_wing": ([0.7, 0.35, 1.0, 0.1], [(0.35, 0, 0), (0, 0.5, 0)]),
            "twisted_box": ([0.4, 0.4, 0.5, 0.5], [(0, 0, 0.5)]),
        }
        for fid, (params, pts) in cases.items():
            for p in pts:
                assert abs(F.analytic_sdf(inst(fid, params), p)) < 1e-12, fid

    def test_continuous_in_point(self):
        # no jumps across the surface along a ray
        i = inst("twisted_box", [0.4, 0.45, 0.5, 0.6])
        ts = np.linspace(0, 1, 2001)
        pts = np.outer(ts, [0.9, 0.7, 0.8])
        vals = F.analytic_sdf(i, pts)
        assert np.abs(np.diff(vals)).max() < 2.5 * np.linalg.norm([0.9, 0.7, 0.8]) / 2000

    def test_inside_negative_outside_positive(self):
        for fid in F.FAMILIES:
            fam = F.get_family(fid)
            i = F.mean_design(fam)
            assert F.analytic_sdf(i, (0, 0, 0)) < 0
            assert F.analytic_sdf(i, (0.95, 0.95, 0.95)) > 0

    def test_fits_decode_box_at_bounds_max(self):
        for fid, fam in F.FAMILIES.items():
            hi = np.asarray(fam.bounds, dtype=np.float64)[:, 1]
            i = F.ShapeInstance(fam, hi)
            shell = np.array(
                [[0.85, 0, 0], [0, 0.85, 0], [0, 0, 0.85],
                 [-0.85, 0, 0], [0, -0.85, 0], [0, 0, -0.85],
                 [0.85, 0.85, 0.85]]
            )
            assert (F.analytic_sdf(i, shell) > 0).all(), fid


class TestSampleDesign:
    def test_same_seed_identical(self):
        fam = F.get_family("rounded_box_car")
        a = F.sample_design(fam, 7)
        b = F.sample_design(fam, 7)
        np.testing.assert_array_equal(a.params, b.params)

    def test_centered_fraction_interval(self):
        fam = F.get_family("ellipsoid")
        for seed in range(200):
            p = F.sample_design(fam, seed, mode="centered_fraction", fraction=0.5).params
            lo = 0.30 + 0.075
            hi = 0.60 - 0.075
            assert (p >= lo - 1e-12).all() and (p <= hi + 1e-12).all()

    def test_full_range_covers_bounds(self):
        fam = F.get_family("tapered_wing")
        b = np.asarray(fam.bounds, dtype=np.float64)
        ps = np.array([F.sample_design(fam, s).params for s in range(10000)])
        span = b[:, 1] - b[:, 0]
        assert (ps.min(axis=0) <= b[:, 0] + 0.01 * span).all()
        assert (ps.max(axis=0) >= b[:, 1] - 0.01 * span).all()

    def test_bad_fraction_rejected(self):
        with pytest.raises(F.ConfigurationError):
            F.sample_design(F.get_family("ellipsoid"), 0, mode="centered_fraction", fraction=0.0)

    def test_unknown_mode_rejected(self):
        with pytest.raises(F.ConfigurationError):
            F.sample_design(F.get_family("ellipsoid"), 0, mode="stratified")


class TestLinearControlPoints:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_affine_mix_commutes_for_linear_families(self, seed):
        # mixing parameters then taking control points equals mixing control
        # points, for every linear family and affine alpha
        rng = np.random.default_rng(seed)
        for fid, fam in F.FAMILIES.items():
            if not fam.linear_flag:
                continue
            designs = [F.sample_design(fam, int(rng.integers(1 << 31))) for _ in range(4)]
            alpha = rng.normal(size=4)
            alpha /= alpha.sum() if abs(alpha.sum()) > 0.3 else 1.0
            alpha = alpha / alpha.sum()
            mixed_params = sum(a * d.params for a, d in zip(alpha, designs))
            cp_of_mix = F.control_points(F.ShapeInstance(fam, mixed_params))
            mix_of_cp = sum(a * F.control_points(d) for a, d in zip(alpha, designs))
            np.testing.assert_allclose(cp_of_mix, mix_of_cp, atol=1e-9)

    def test_twisted_box_mix_does_not_commute(self):
        fam = F.get_family("twisted_box")
        a = F.ShapeInstance(fam, np.array([0.4, 0.4, 0.5, -0.6]))
        b = F.ShapeInstance(fam, np.array([0.4, 0.4, 0.5, 0.6]))
        mixed = F.ShapeInstance(fam, (a.params + b.params) / 2)
        cp_mix = (F.control_points(a) + F.control_points(b)) / 2
        assert np.abs(F.control_points(mixed) - cp_mix).max() > 1e-3


class TestPerformanceProxy:
    def test_car_product_before_normalization(self):
        i = inst("rounded_box_car", [0.6, 0.5, 0.5, 0.08])
        assert F.performance_proxy_raw(i) == pytest.approx(0.25)

    def test_zero_at_bounds_minimum(self):
        for fid, fam in F.FAMILIES.items():
            lo = np.asarray(fam.bounds, dtype=np.float64)[:, 0]
            assert F.performance_proxy(F.ShapeInstance(fam, lo)) == pytest.approx(0.0)

    def test_one_at_bounds_maximum(self):
        for fid, fam in F.FAMILIES.items():
            hi = np.asarray(fam.bounds, dtype=np.float64)[:, 1]
            assert F.performance_proxy(F.ShapeInstance(fam, hi)) == pytest.approx(1.0)

    def test_in_bounds_proxy_in_unit_interval(self):
        for fid, fam in F.FAMILIES.items():
            for seed in range(250):
                v = F.performance_proxy(F.sample_design(fam, seed))
                assert -1e-12 <= v <= 1 + 1e-12

    def test_invariant_to_unreferenced_params(self):
        fam = F.get_family("rounded_box_car")
        base = F.mean_design(fam).params
        other = base.copy()
        other[0] += 0.1  # half_length is not a proxy factor
        other[3] += 0.02
        assert F.performance_proxy(F.ShapeInstance(fam, base)) == F.performance_proxy(
            F.ShapeInstance(fam, other)
        )

    def test_proxy_target_round_trip(self):
        fam = F.get_family("tapered_wing")
        i = F.sample_design(fam, 3)
        v = F.performance_proxy(i)
        prod = F.proxy_target_params(fam, v)
        assert prod == pytest.approx(F.performance_proxy_raw(i), abs=1e-12)


class TestMeasureParam:
    def test_unsupported_probe_rejected(self):
        class M:
            vertices = np.zeros((3, 3))

        with pytest.raises(F.UnsupportedMeasurementError):
            F.measure_param(M(), F.get_family("rounded_box_car"), 3)

    def test_empty_mesh_rejected(self):
        class M:
            vertices = np.zeros((0, 3))

        with pytest.raises(F.MeasurementError):
            F.measure_param(M(), F.get_family("ellipsoid"), 0)

    def test_out_of_range_index_rejected(self):
        class M:
            vertices = np.zeros((3, 3))

        with pytest.raises(F.UnsupportedMeasurementError):
            F.measure_param(M(), F.get_family("ellipsoid"), 5)


def test_families_markdown_lists_every_family():
    doc = F.families_markdown()
    for fid in F.FAMILIES:
        assert f"## {fid}" in doc
    assert "unsupported" in doc
