import math

import numpy as np
import pytest

from tddhad.errors import ArgumentError
from tddhad.hsi import HsiCube
from tddhad.simulate import (
    AffineParams,
    AffineRanges,
    RectRegion,
    SimulatorConfig,
    _source_coords,
    affine_matrix,
    implant_anomaly,
    inverse_params,
    read_dataset,
    select_anomaly_region,
    simulate_dataset,
    spectral_shuffle,
    warp_sample,
    write_dataset,
)
from tddhad.synthetic import synthetic_cube

from helpers import affine_by_substitution


class TestRegion:
    def test_area_bound(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            r = select_anomaly_region(10, 0.2, rng)
            assert r.h * r.w <= 20 and r.contains(10) and r.h >= 1 and r.w >= 1

    def test_tiny_fraction_gives_single_pixel(self):
        r = select_anomaly_region(5, 0.04, np.random.default_rng(1))
        assert (r.h, r.w) == (1, 1)

    def test_fraction_too_small(self):
        with pytest.raises(ArgumentError):
            select_anomaly_region(5, 0.01, np.random.default_rng(0))

    def test_mask(self):
        m = RectRegion(1, 2, 2, 3).mask(5)
        assert m.sum() == 6 and m[1, 2] == 1 and m[2, 4] == 1 and m[3, 2] == 0


class TestShuffleImplant:
    def test_shuffle_keeps_each_spectrum(self):
        patch = np.random.default_rng(0).random((4, 4, 9))
        out = spectral_shuffle(patch, np.random.default_rng(1))
        np.testing.assert_array_equal(np.sort(out, axis=-1), np.sort(patch, axis=-1))
        assert not np.array_equal(out, patch)

    def test_implant(self):
        x1 = np.zeros((4, 4, 2))
        x2 = np.ones((4, 4, 2))
        x3, y3 = implant_anomaly(x1, x2, RectRegion(0, 1, 2, 2))
        np.testing.assert_array_equal(y3, RectRegion(0, 1, 2, 2).mask(4))
        np.testing.assert_array_equal(x3[:, :, 0], y3)

    def test_implant_region_outside(self):
        with pytest.raises(ArgumentError):
            implant_anomaly(np.zeros((4, 4, 1)), np.zeros((4, 4, 1)), RectRegion(3, 3, 2, 2))


class TestAffine:
    @pytest.mark.parametrize("theta", np.linspace(0, 2 * math.pi, 7))
    @pytest.mark.parametrize("s", [0.5, 1.0, 1.7])
    @pytest.mark.parametrize("center", [(0.0, 0.0), (4.5, 4.5), (2.0, 7.0)])
    def test_closed_form(self, theta, s, center):
        got = affine_matrix(AffineParams(theta, s, (0, 0), center))
        np.testing.assert_allclose(got, affine_by_substitution(theta, s, *center), atol=1e-12)

    def test_centre_is_fixed(self):
        t = affine_matrix(AffineParams(1.1, 0.8, (0, 0), (3.0, 5.0)))
        np.testing.assert_allclose(t @ [3.0, 5.0, 1.0], [3.0, 5.0], atol=1e-12)

    def test_identity_warp_is_exact(self):
        rng = np.random.default_rng(0)
        x = rng.random((7, 7, 3))
        y = (rng.random((7, 7)) > 0.5).astype(np.uint8)
        out = warp_sample(x, y, AffineParams.for_patch(7))
        np.testing.assert_array_equal(out.x, x)
        np.testing.assert_array_equal(out.y, y)

    def test_quarter_turn_of_3x3(self):
        # anticlockwise on screen: x right, y down
        y = np.array([[1, 1, 0], [0, 0, 0], [0, 0, 0]], dtype=np.uint8)
        out = warp_sample(np.zeros((3, 3, 1)), y, AffineParams.for_patch(3, theta=math.pi / 2))
        np.testing.assert_array_equal(out.y, [[0, 0, 0], [1, 0, 0], [1, 0, 0]])

    def test_quarter_turn_matches_rot90(self):
        y = (np.random.default_rng(3).random((5, 5)) > 0.5).astype(np.uint8)
        out = warp_sample(np.zeros((5, 5, 1)), y, AffineParams.for_patch(5, theta=math.pi / 2))
        np.testing.assert_array_equal(out.y, np.rot90(y))

    def test_integer_shift(self):
        y = np.zeros((5, 5), dtype=np.uint8)
        y[1, 1] = 1
        x = np.arange(25.0).reshape(5, 5, 1)
        out = warp_sample(x, y, AffineParams.for_patch(5, b=(2.0, 1.0)))
        assert out.y[2, 3] == 1 and out.y.sum() == 1
        # vacated columns take the clamped border
        np.testing.assert_array_equal(out.x[2, :3, 0], [5.0, 5.0, 5.0])

    def test_inverse_params_compose_to_identity(self):
        p = AffineParams(0.7, 1.2, (1.0, -0.5), (4.5, 4.5))
        q = inverse_params(p)
        tp, tq = affine_matrix(p), affine_matrix(q)
        pt = np.array([2.0, 3.0])
        fwd = tp[:, :2] @ pt + tp[:, 2] + p.b
        back = tq[:, :2] @ fwd + tq[:, 2] + q.b
        np.testing.assert_allclose(back, pt, atol=1e-12)

    def test_scale_must_be_positive(self):
        with pytest.raises(ArgumentError):
            AffineParams(0.0, 0.0)


@pytest.fixture(scope="module")
def cube():
    return synthetic_cube(16, 16, 6, seed=3)


class TestDataset:
    def test_order_independent(self, cube):
        full = simulate_dataset(cube, 8, 6, seed=11)
        alone = simulate_dataset(cube, 8, 6, seed=11)[4]
        np.testing.assert_array_equal(full[4].x, alone.x)
        other_seed = simulate_dataset(cube, 8, 6, seed=12)
        assert not np.array_equal(other_seed[0].x, full[0].x)

    def test_labels_nonempty_and_binary(self, cube):
        for s in simulate_dataset(cube, 8, 30, seed=0):
            assert s.y.any() and set(np.unique(s.y)) <= {0, 1}
            assert s.x.shape == (8, 8, 6)

    def test_multiple_regions(self, cube):
        samples, prewarp = simulate_dataset(cube, 8, 10, regions=3, seed=0, return_prewarp=True)
        assert all(len(s.params["regions"]) == 3 for s in samples)
        for s, y3 in zip(samples, prewarp):
            union = np.zeros((8, 8), np.uint8)
            for r in s.params["regions"]:
                union |= RectRegion(**r).mask(8)
            np.testing.assert_array_equal(union, y3)

    def test_write_read_round_trip(self, tmp_path, cube):
        samples = simulate_dataset(cube, 8, 3, seed=5)
        manifest = write_dataset(samples, tmp_path, seed=5)
        back = read_dataset(manifest)
        for a, b in zip(samples, back):
            np.testing.assert_array_equal(a.x.astype(np.float32), b.x)
            np.testing.assert_array_equal(a.y, b.y)
            assert b.params["affine"] == a.params["affine"]

    def test_patch_bigger_than_cube(self, cube):
        with pytest.raises(ArgumentError):
            simulate_dataset(cube, 17, 1)

    def test_config_round_trip(self):
        cfg = SimulatorConfig(0.1, AffineRanges(scale=(0.9, 1.1)), 2)
        assert SimulatorConfig.from_dict(cfg.to_dict()) == cfg


def test_source_coords_identity():
    rows, cols = _source_coords(4, AffineParams.for_patch(4))
    np.testing.assert_array_equal(rows, np.arange(4)[:, None].repeat(4, 1))
    np.testing.assert_array_equal(cols, np.arange(4)[None].repeat(4, 0))


def test_hsicube_accepted():
    assert simulate_dataset(HsiCube(np.random.default_rng(0).random((6, 6, 2))), 4, 1)[0].x.shape == (4, 4, 2)


class TestSpecExamples:
    def test_two_pixel_patch_quarter_fraction(self):
        for seed in range(20):
            r = select_anomaly_region(2, 0.25, np.random.default_rng(seed))
            assert (r.h, r.w) == (1, 1)

    def test_ten_thousand_draws(self):
        rng = np.random.default_rng(7)
        for _ in range(10_000):
            r = select_anomaly_region(10, 0.2, rng)
            assert r.h * r.w <= 20 and r.contains(10)

    def test_region_deterministic(self):
        a = select_anomaly_region(10, 0.2, np.random.default_rng(3))
        assert a == select_anomaly_region(10, 0.2, np.random.default_rng(3))

    def test_single_band_shuffle_is_identity(self):
        patch = np.random.default_rng(0).random((3, 3, 1))
        np.testing.assert_array_equal(spectral_shuffle(patch, np.random.default_rng(1)), patch)

    def test_three_band_permutation_membership(self):
        import itertools

        perms = {p for p in itertools.permutations((1.0, 2.0, 3.0))}
        patch = np.array([1.0, 2.0, 3.0]).reshape(1, 1, 3)
        out = spectral_shuffle(patch, np.random.default_rng(42))
        assert tuple(out.ravel()) in perms
        np.testing.assert_array_equal(spectral_shuffle(patch, np.random.default_rng(42)), out)
        seen = {tuple(spectral_shuffle(patch, np.random.default_rng(s)).ravel()) for s in range(200)}
        assert seen == perms

    def test_single_pixel_paste(self):
        rng = np.random.default_rng(0)
        src = rng.random((4, 4, 3))
        x2 = spectral_shuffle(src, rng)
        x3, y3 = implant_anomaly(src, x2, RectRegion(0, 0, 1, 1))
        changed = np.any(x3 != src, axis=-1)
        assert not changed[1:].any() and not changed[0, 1:].any()
        np.testing.assert_array_equal(x3[0, 0], x2[0, 0])
        assert y3.sum() == 1

    def test_pixelwise_scan(self):
        rng = np.random.default_rng(1)
        src = rng.random((6, 6, 4))
        x2 = spectral_shuffle(src, rng)
        region = RectRegion(1, 2, 3, 2)
        x3, y3 = implant_anomaly(src, x2, region)
        assert y3.sum() == region.h * region.w
        for r in range(6):
            for c in range(6):
                inside = 1 <= r < 4 and 2 <= c < 4
                np.testing.assert_array_equal(x3[r, c], x2[r, c] if inside else src[r, c])

    @pytest.mark.parametrize(
        "params,expected",
        [
            (AffineParams(0.0, 1.0, (0, 0), (2.0, 2.0)), [[1, 0, 0], [0, 1, 0]]),
            (AffineParams(math.pi / 2, 1.0, (0, 0), (2.0, 2.0)), [[0, 1, 0], [-1, 0, 4]]),
            (AffineParams(0.0, 2.0, (0, 0), (2.0, 2.0)), [[2, 0, -2], [0, 2, -2]]),
        ],
    )
    def test_affine_examples(self, params, expected):
        np.testing.assert_allclose(affine_matrix(params), expected, atol=1e-12)

    def test_round_trip_interior_mask(self):
        y = np.zeros((9, 9), dtype=np.uint8)
        y[3:6, 3:5] = 1
        x = np.zeros((9, 9, 1))
        for theta in (math.pi / 2, math.pi, 3 * math.pi / 2):
            p = AffineParams.for_patch(9, theta=theta, b=(1.0, -1.0))
            back = warp_sample(*(lambda s: (s.x, s.y))(warp_sample(x, y, p)), inverse_params(p))
            np.testing.assert_array_equal(back.y, y)

    def test_empty_request(self):
        assert simulate_dataset(synthetic_cube(12, 12, 3), 8, 0) == []
