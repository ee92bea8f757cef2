import numpy as np
import pytest

from conftest import make_grid, random_blob_mask
from strokeseg.volume import BinaryMask
from strokeseg.voxelmaps import accumulate_maps, fwhm_to_sigma, voxelwise_maps


def mask_of(grid, coords):
    data = np.zeros(grid.shape, dtype=np.uint8)
    for c in coords:
        data[c] = 1
    return BinaryMask(grid, data)


class TestSigma:
    def test_fwhm_4mm(self):
        # FWHM = 2 sqrt(2 ln 2) sigma
        assert fwhm_to_sigma(4.0) == pytest.approx(4.0 / (2.0 * np.sqrt(2.0 * np.log(2.0))), abs=1e-12)
        assert fwhm_to_sigma(4.0) == pytest.approx(1.6986436006, abs=1e-6)


class TestPerfectPrediction:
    def test_all_maps_zero(self):
        rng = np.random.default_rng(0)
        grid = make_grid(shape=(10, 10, 6))
        pairs = []
        for _ in range(4):
            m = random_blob_mask(rng, grid, 0.2)
            pairs.append((m, m))
        maps = voxelwise_maps(pairs)
        for _, vol in maps.items():
            assert np.all(vol.data == 0.0)


class TestSingleVoxelArithmetic:
    def test_fp_distance_before_smoothing(self):
        grid = make_grid(shape=(10, 10, 6))
        gt = mask_of(grid, [(2, 2, 2)])
        pred = mask_of(grid, [(2, 2, 2), (5, 2, 2)])  # one FP at distance 3 mm
        fp_prop, fn_prop, fp_hd, fn_hd = accumulate_maps([(pred, gt)])
        assert fp_hd[5, 2, 2] == pytest.approx(3.0)
        fp_hd[5, 2, 2] = 0.0
        assert np.all(fp_hd == 0.0)
        assert np.all(fn_hd == 0.0)
        assert fp_prop[5, 2, 2] == 1.0

    def test_fn_distance_symmetric(self):
        grid = make_grid(shape=(10, 10, 6))
        gt = mask_of(grid, [(2, 2, 2), (6, 2, 2)])
        pred = mask_of(grid, [(2, 2, 2)])  # FN at (6,2,2), distance 4 to pred
        _, _, _, fn_hd = accumulate_maps([(pred, gt)])
        assert fn_hd[6, 2, 2] == pytest.approx(4.0)

    def test_proportions_average_over_cases(self):
        grid = make_grid(shape=(8, 8, 4))
        gt = mask_of(grid, [])
        fp_case = mask_of(grid, [(1, 1, 1)])
        clean = mask_of(grid, [])
        fp_prop, _, _, _ = accumulate_maps([(fp_case, gt), (clean, gt)])
        assert fp_prop[1, 1, 1] == pytest.approx(0.5)


class TestMapLinearity:
    def test_mean_of_single_case_maps(self):
        rng = np.random.default_rng(3)
        grid = make_grid(shape=(8, 8, 4))
        pairs = [
            (random_blob_mask(rng, grid, 0.2), random_blob_mask(rng, grid, 0.2))
            for _ in range(3)
        ]
        combined = accumulate_maps(pairs)
        singles = [accumulate_maps([pair]) for pair in pairs]
        for k in range(4):
            stacked = np.mean([s[k] for s in singles], axis=0)
            assert np.allclose(combined[k], stacked, atol=1e-12)


class TestThresholding:
    def test_small_values_zeroed(self):
        grid = make_grid(shape=(12, 12, 4))
        gt = mask_of(grid, [])
        # single FP in one of 100 cases -> proportion 0.01 spread thin by smoothing
        pairs = [(mask_of(grid, [(6, 6, 2)]), gt)] + [(mask_of(grid, []), gt)] * 99
        maps = voxelwise_maps(pairs)
        assert maps.fp_proportion.data.max() == 0.0  # everything below 1%

    def test_distances_below_0_2_mm_zeroed(self):
        grid = make_grid(shape=(16, 16, 4))
        gt = mask_of(grid, [(1, 1, 0)])
        pred_data = np.zeros(grid.shape, dtype=np.uint8)
        pred_data[1, 1, 0] = 1
        pred_data[10:14, 10:14, 1:3] = 1  # distant FP blob keeps signal above threshold
        maps = voxelwise_maps([(BinaryMask(grid, pred_data), gt)] * 2, fwhm_mm=4.0)
        assert maps.fp_mean_hd.data.max() > 0
        assert np.all((maps.fp_mean_hd.data == 0) | (maps.fp_mean_hd.data >= 0.2))
