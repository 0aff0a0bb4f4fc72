import numpy as np
import pytest

from octmoco.core import (
    Boundaries,
    VesselMap,
    Volume,
    XDisplacementVec,
    ZDisplacementMap,
    apply_x_displacement,
    apply_z_displacement,
    binarize,
    normalize_boundaries,
)


def rand_volume(rng, h, w, n):
    return Volume(rng.random((h, w, n), dtype=np.float32))


def apply_z_oracle(vol, d, z_norm, fill=0.0):
    h, w, n = vol.shape
    out = np.empty_like(vol)
    for z in range(h):
        for x in range(w):
            for y in range(n):
                src = z - int(z_norm * float(d[x, y]))
                out[z, x, y] = vol[src, x, y] if 0 <= src < h else fill
    return out


def apply_x_oracle(vol, d, x_norm, fill=0.0):
    h, w, n = vol.shape
    out = np.empty_like(vol)
    for z in range(h):
        for x in range(w):
            for y in range(n):
                src = x - int(x_norm * float(d[y]))
                out[z, x, y] = vol[z, src, y] if 0 <= src < w else fill
    return out


class TestApplyZ:
    def test_zero_displacement_is_identity(self):
        rng = np.random.default_rng(0)
        v = rand_volume(rng, 6, 5, 4)
        d = ZDisplacementMap(np.zeros((5, 4), dtype=np.float32))
        out = apply_z_displacement(v, d, z_norm=10.0)
        np.testing.assert_array_equal(out.data, v.data)

    def test_uniform_one_pixel_shift(self):
        rng = np.random.default_rng(1)
        v = rand_volume(rng, 4, 3, 3)
        d = ZDisplacementMap(np.full((3, 3), 0.1, dtype=np.float32))
        out = apply_z_displacement(v, d, z_norm=10.0, fill=0.25)
        np.testing.assert_array_equal(out.data[1:], v.data[:-1])
        np.testing.assert_array_equal(out.data[0], np.full((3, 3), 0.25, dtype=np.float32))

    def test_matches_loop_oracle_on_random_integer_shifts(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            v = rand_volume(rng, 5, 4, 3)
            shifts = rng.integers(-4, 5, size=(4, 3))
            d = ZDisplacementMap(shifts.astype(np.float32))
            out = apply_z_displacement(v, d, z_norm=1.0, fill=0.5)
            np.testing.assert_array_equal(out.data, apply_z_oracle(v.data, d.values, 1.0, 0.5))

    def test_inverse_shift_recovers_interior(self):
        rng = np.random.default_rng(3)
        v = rand_volume(rng, 12, 4, 4)
        shifts = rng.integers(-3, 4, size=(4, 4)).astype(np.float32)
        fwd = apply_z_displacement(v, ZDisplacementMap(shifts), z_norm=1.0)
        back = apply_z_displacement(fwd, ZDisplacementMap(-shifts), z_norm=1.0)
        np.testing.assert_array_equal(back.data[3:-3], v.data[3:-3])

    def test_dimension_mismatch_rejected(self):
        v = rand_volume(np.random.default_rng(0), 4, 4, 4)
        with pytest.raises(ValueError):
            apply_z_displacement(v, ZDisplacementMap(np.zeros((3, 4), np.float32)), 10.0)
        with pytest.raises(ValueError):
            apply_z_displacement(v, ZDisplacementMap(np.zeros((4, 4), np.float32)), 0.0)

    def test_non_finite_displacement_rejected(self):
        with pytest.raises(ValueError):
            ZDisplacementMap(np.array([[np.nan, 0.0]], dtype=np.float32))


class TestApplyX:
    def test_zero_displacement_is_identity(self):
        rng = np.random.default_rng(4)
        v = rand_volume(rng, 4, 6, 3)
        out = apply_x_displacement(v, XDisplacementVec(np.zeros(3, np.float32)), x_norm=2.0)
        np.testing.assert_array_equal(out.data, v.data)

    def test_negative_displacement_shifts_left(self):
        rng = np.random.default_rng(5)
        v = rand_volume(rng, 3, 6, 2)
        d = XDisplacementVec(np.full(2, -0.5, dtype=np.float32))
        out = apply_x_displacement(v, d, x_norm=2.0)
        # content moves one column toward x=0; the rightmost column is vacated
        np.testing.assert_array_equal(out.data[:, :-1, :], v.data[:, 1:, :])
        np.testing.assert_array_equal(out.data[:, -1, :], np.zeros((3, 2), np.float32))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            v = rand_volume(rng, 4, 7, 5)
            shifts = rng.integers(-5, 6, size=5).astype(np.float32)
            out = apply_x_displacement(v, XDisplacementVec(shifts), x_norm=1.0, fill=0.125)
            np.testing.assert_array_equal(out.data, apply_x_oracle(v.data, shifts, 1.0, 0.125))

    def test_columns_permuted_not_altered(self):
        rng = np.random.default_rng(7)
        v = rand_volume(rng, 4, 8, 3)
        shifts = np.array([2, -1, 0], dtype=np.float32)
        out = apply_x_displacement(v, XDisplacementVec(shifts), x_norm=1.0)
        for y, s in enumerate([2, -1, 0]):
            for x in range(8):
                if 0 <= x - s < 8:
                    np.testing.assert_array_equal(out.data[:, x, y], v.data[:, x - s, y])


class TestNormalizeBoundaries:
    def test_constant_along_y_gives_zero(self):
        rng = np.random.default_rng(8)
        base = rng.integers(5, 20, size=(2, 6)).astype(np.float32)
        b = Boundaries(np.sort(np.repeat(base[:, :, None], 4, axis=2), axis=0))
        np.testing.assert_array_equal(normalize_boundaries(b, 10.0), np.zeros((2, 6, 4)))

    def test_affine_in_y_gives_zero(self):
        # integer-valued affine data is exact in float32
        w, n = 5, 6
        a = np.arange(w, dtype=np.float64)[None, :, None] + 10.0
        c = np.array([1.0, 2.0])[:, None, None]
        y = np.arange(n, dtype=np.float64)[None, None, :]
        b = Boundaries((a + c * y + np.array([0.0, 15.0])[:, None, None]).astype(np.float32))
        np.testing.assert_allclose(normalize_boundaries(b, 10.0), 0.0, atol=1e-6)

    def test_matches_hand_formula_at_midpoint(self):
        rng = np.random.default_rng(9)
        z = np.sort(rng.integers(0, 30, size=(2, 4, 3)), axis=0).astype(np.float32)
        b = Boundaries(z)
        out = normalize_boundaries(b, 4.0)
        for s in range(2):
            for x in range(4):
                tilt = z[s, x, 0] + (z[s, x, 2] - z[s, x, 0]) * 1 / 2
                assert out[s, x, 1] == pytest.approx((tilt - z[s, x, 1]) / 4.0, abs=1e-6)

    def test_invariant_to_constant_offset_in_y(self):
        rng = np.random.default_rng(10)
        ilm = rng.integers(0, 10, size=(5, 4)).astype(np.float32)
        z = np.stack([ilm, ilm + 15.0])  # wide gap so offsets below keep ILM above RPE
        offset = rng.integers(0, 5, size=(2, 5)).astype(np.float32)
        b1 = Boundaries(z)
        b2 = Boundaries(z + offset[:, :, None])
        np.testing.assert_allclose(
            normalize_boundaries(b1, 10.0), normalize_boundaries(b2, 10.0), atol=1e-6
        )


class TestBinarize:
    def test_above_threshold_all_ones(self):
        m = VesselMap(np.full((3, 3), 0.7, dtype=np.float32))
        np.testing.assert_array_equal(binarize(m, 0.5).values, np.ones((3, 3)))

    def test_boundary_value_counts_as_one(self):
        m = VesselMap(np.full((2, 2), 0.5, dtype=np.float32))
        np.testing.assert_array_equal(binarize(m, 0.5).values, np.ones((2, 2)))

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(11)
        vals = rng.random((6, 5)).astype(np.float32)
        out = binarize(VesselMap(vals), 0.4).values
        for x in range(6):
            for y in range(5):
                assert out[x, y] == (1.0 if vals[x, y] >= 0.4 else 0.0)

    def test_idempotent_on_binary(self):
        m = binarize(VesselMap(np.eye(4, dtype=np.float32)), 0.5)
        again = binarize(VesselMap(m.values), 0.5)
        np.testing.assert_array_equal(m.values, again.values)

    def test_threshold_range_checked(self):
        m = VesselMap(np.zeros((2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            binarize(m, 1.5)


class TestValidation:
    def test_volume_range_and_dims(self):
        with pytest.raises(ValueError):
            Volume(np.full((1, 4, 4), 0.5, dtype=np.float32))
        with pytest.raises(ValueError):
            Volume(np.full((4, 4, 4), 1.5, dtype=np.float32))
        with pytest.raises(ValueError):
            Volume(np.full((4, 4, 4), np.nan, dtype=np.float32))

    def test_boundary_ordering(self):
        z = np.ones((2, 3, 3), dtype=np.float32)
        z[0] = 5.0  # ILM below RPE
        with pytest.raises(ValueError):
            Boundaries(z)

    def test_vessel_map_kinds(self):
        with pytest.raises(ValueError):
            VesselMap(np.full((2, 2), 0.5, dtype=np.float32), kind="binary")
        with pytest.raises(ValueError):
            VesselMap(np.full((2, 2), 1.5, dtype=np.float32))
