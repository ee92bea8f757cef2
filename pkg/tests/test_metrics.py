import numpy as np
import pytest

from conftest import make_grid, random_blob_mask
from oracles import (
    brute_ald,
    brute_avd_ml,
    brute_components,
    brute_dice,
    brute_hd95,
    brute_lesion_f1,
    brute_precision_recall,
)
from strokeseg.metrics import (
    ald,
    avd,
    connected_components,
    dice,
    evaluate_pair,
    hd95,
    lesion_f1,
    lesion_size_stratum,
    precision_recall,
)
from strokeseg.volume import BinaryMask, VolumeError


def mask_of(grid, coords):
    data = np.zeros(grid.shape, dtype=np.uint8)
    for c in coords:
        data[c] = 1
    return BinaryMask(grid, data)


class TestDice:
    def test_identical_masks(self, unit_grid):
        m = mask_of(unit_grid, [(1, 1, 1), (2, 2, 2)])
        assert dice(m, m) == 1.0

    def test_half_overlap(self, unit_grid):
        # |P| = 8, |G| = 8, overlap 4 -> 0.5
        p = np.zeros(unit_grid.shape, dtype=np.uint8)
        g = np.zeros(unit_grid.shape, dtype=np.uint8)
        p[0:2, 0:2, 0:2] = 1
        g[0:2, 0:2, 1:3] = 1
        assert dice(BinaryMask(unit_grid, p), BinaryMask(unit_grid, g)) == 0.5

    def test_disjoint(self, unit_grid):
        p = mask_of(unit_grid, [(0, 0, 0)])
        g = mask_of(unit_grid, [(5, 5, 5)])
        assert dice(p, g) == 0.0

    def test_both_empty_convention(self, unit_grid):
        e = mask_of(unit_grid, [])
        assert dice(e, e) == 1.0

    def test_grid_mismatch_rejected(self, unit_grid):
        other = make_grid(spacing=(2, 2, 2))
        with pytest.raises(VolumeError):
            dice(mask_of(unit_grid, []), mask_of(other, []))


class TestAvd:
    def test_equal_volumes(self, unit_grid):
        p = mask_of(unit_grid, [(0, 0, 0)])
        g = mask_of(unit_grid, [(5, 5, 5)])
        assert avd(p, g) == 0.0

    def test_counts_at_unit_spacing(self):
        grid = make_grid(shape=(16, 16, 16))
        p = np.zeros(grid.shape, dtype=np.uint8)
        g = np.zeros(grid.shape, dtype=np.uint8)
        p.flat[:1500] = 1
        g.flat[:1000] = 1
        # 500 voxels * 0.001 ml
        assert avd(BinaryMask(grid, p), BinaryMask(grid, g)) == pytest.approx(0.5)

    def test_empty_versus_2000(self):
        grid = make_grid(shape=(16, 16, 16))
        g = np.zeros(grid.shape, dtype=np.uint8)
        g.flat[:2000] = 1
        assert avd(BinaryMask(grid, np.zeros(grid.shape, dtype=np.uint8)), BinaryMask(grid, g)) == pytest.approx(2.0)


class TestComponents:
    def test_two_disjoint_blobs(self, unit_grid):
        m = np.zeros(unit_grid.shape, dtype=np.uint8)
        m[0:2, 0:2, 0] = 1
        m[6:8, 6:8, 0] = 1
        assert connected_components(BinaryMask(unit_grid, m)).count == 2

    def test_single_voxel(self, unit_grid):
        comps = connected_components(mask_of(unit_grid, [(3, 3, 3)]))
        assert comps.count == 1
        assert comps.voxel_counts == (1,)

    def test_diagonal_touch_is_one_component(self, unit_grid):
        comps = connected_components(mask_of(unit_grid, [(2, 2, 2), (3, 3, 3)]))
        assert comps.count == 1


class TestAld:
    def test_five_versus_two(self, unit_grid):
        p = mask_of(unit_grid, [(0, 0, 0), (4, 0, 0), (8, 0, 0), (0, 4, 0), (0, 8, 0)])
        g = mask_of(unit_grid, [(0, 0, 4), (8, 8, 8)])
        assert ald(p, g) == 3

    def test_equal_counts(self, unit_grid):
        p = mask_of(unit_grid, [(0, 0, 0)])
        g = mask_of(unit_grid, [(8, 8, 8)])
        assert ald(p, g) == 0

    def test_empty_prediction(self, unit_grid):
        g = mask_of(unit_grid, [(0, 0, 0), (8, 8, 8)])
        assert ald(mask_of(unit_grid, []), g) == 2


class TestLesionF1:
    def test_partial_detection(self, unit_grid):
        # 3 GT lesions, 2 hit; 1 spurious prediction -> TP=2, FN=1, FP=1 -> 2/3
        g = mask_of(unit_grid, [(0, 0, 0), (5, 5, 5), (10, 10, 10)])
        p = mask_of(unit_grid, [(0, 0, 0), (5, 5, 5), (10, 0, 0)])
        assert lesion_f1(p, g) == pytest.approx(2 / 3)

    def test_perfect(self, unit_grid):
        m = mask_of(unit_grid, [(0, 0, 0), (6, 6, 6)])
        assert lesion_f1(m, m) == 1.0

    def test_empty_prediction_nonempty_gt(self, unit_grid):
        assert lesion_f1(mask_of(unit_grid, []), mask_of(unit_grid, [(1, 1, 1)])) == 0.0

    def test_both_empty(self, unit_grid):
        e = mask_of(unit_grid, [])
        assert lesion_f1(e, e) == 1.0


class TestHd95:
    def test_identical(self, unit_grid):
        m = mask_of(unit_grid, [(3, 3, 3), (4, 4, 4)])
        assert hd95(m, m) == 0.0

    def test_single_pair_distance(self, unit_grid):
        p = mask_of(unit_grid, [(0, 0, 0)])
        g = mask_of(unit_grid, [(3, 0, 0)])
        assert hd95(p, g) == pytest.approx(3.0)

    def test_anisotropic_spacing(self):
        grid = make_grid(shape=(8, 8, 8), spacing=(1.0, 1.0, 6.0))
        p = mask_of(grid, [(0, 0, 0)])
        g = mask_of(grid, [(0, 0, 2)])
        assert hd95(p, g) == pytest.approx(12.0)

    def test_one_empty_gets_diagonal_penalty(self, unit_grid):
        p = mask_of(unit_grid, [])
        g = mask_of(unit_grid, [(0, 0, 0)])
        expected = float(np.linalg.norm(np.array(unit_grid.shape) * np.array(unit_grid.spacing)))
        assert hd95(p, g) == pytest.approx(expected)
        assert hd95(g, p) == pytest.approx(expected)

    def test_both_empty(self, unit_grid):
        e = mask_of(unit_grid, [])
        assert hd95(e, e) == 0.0

    def test_matches_bruteforce_on_random_masks(self):
        rng = np.random.default_rng(11)
        grid = make_grid(shape=(12, 12, 12))
        for _ in range(25):
            p = random_blob_mask(rng, grid, density=rng.uniform(0.05, 0.4))
            g = random_blob_mask(rng, grid, density=rng.uniform(0.05, 0.4))
            expected = brute_hd95(p.data, g.data, grid.spacing)
            assert hd95(p, g) == pytest.approx(expected, abs=1e-6)

    def test_translation_invariance(self, unit_grid):
        p = mask_of(unit_grid, [(2, 2, 2), (3, 3, 3)])
        g = mask_of(unit_grid, [(4, 2, 2)])
        shifted_p = mask_of(unit_grid, [(5, 5, 5), (6, 6, 6)])
        shifted_g = mask_of(unit_grid, [(7, 5, 5)])
        assert hd95(p, g) == pytest.approx(hd95(shifted_p, shifted_g), abs=1e-9)


class TestPrecisionRecall:
    def test_subset_prediction(self, unit_grid):
        g = mask_of(unit_grid, [(0, 0, 0), (1, 0, 0), (2, 0, 0)])
        p = mask_of(unit_grid, [(0, 0, 0), (1, 0, 0)])
        prec, rec = precision_recall(p, g)
        assert prec == 1.0
        assert rec == pytest.approx(2 / 3)

    def test_counts(self):
        grid = make_grid(shape=(8, 8, 8))
        p = np.zeros(grid.shape, dtype=np.uint8)
        g = np.zeros(grid.shape, dtype=np.uint8)
        p[0, 0, :8] = 1  # |P| = 8
        g[0, :2, :8] = 1  # |G| = 16, overlap 8... adjust to spec numbers
        p[1, 1, :4] = 0
        prec, rec = precision_recall(BinaryMask(grid, p), BinaryMask(grid, g))
        assert prec == pytest.approx(1.0)
        assert rec == pytest.approx(0.5)

    def test_overlap_half_quarter(self):
        grid = make_grid(shape=(8, 8, 8))
        p = np.zeros(grid.shape, dtype=np.uint8)
        g = np.zeros(grid.shape, dtype=np.uint8)
        p[0, 0, :4] = 1
        p[7, 7, :4] = 1          # |P| = 8
        g[0, :2, :8] = 1         # |G| = 16
        # overlap = 4
        prec, rec = precision_recall(BinaryMask(grid, p), BinaryMask(grid, g))
        assert prec == pytest.approx(0.5)
        assert rec == pytest.approx(0.25)

    def test_equal_masks(self, unit_grid):
        m = mask_of(unit_grid, [(0, 0, 0)])
        assert precision_recall(m, m) == (1.0, 1.0)


class TestSymmetry:
    def test_dice_hd95_avd_symmetric(self):
        rng = np.random.default_rng(5)
        grid = make_grid(shape=(10, 10, 10))
        for _ in range(10):
            p = random_blob_mask(rng, grid, 0.2)
            g = random_blob_mask(rng, grid, 0.2)
            assert dice(p, g) == dice(g, p)
            assert avd(p, g) == avd(g, p)
            assert hd95(p, g) == pytest.approx(hd95(g, p), abs=1e-9)


class TestOracleAgreement:
    """Cross-check every metric against the naive references on random masks."""

    def test_all_metrics_match(self):
        rng = np.random.default_rng(42)
        grid = make_grid(shape=(12, 12, 12))
        for i in range(30):
            density = rng.uniform(0.0, 0.35)
            p = random_blob_mask(rng, grid, density)
            g = random_blob_mask(rng, grid, rng.uniform(0.0, 0.35))
            assert dice(p, g) == pytest.approx(brute_dice(p.data, g.data), abs=0)
            assert avd(p, g) == pytest.approx(brute_avd_ml(p.data, g.data, grid.spacing))
            assert ald(p, g) == brute_ald(p.data, g.data)
            assert lesion_f1(p, g) == pytest.approx(brute_lesion_f1(p.data, g.data), abs=0)
            assert hd95(p, g) == pytest.approx(brute_hd95(p.data, g.data, grid.spacing), abs=1e-6)
            assert precision_recall(p, g) == pytest.approx(brute_precision_recall(p.data, g.data))

    def test_component_counts_match(self):
        rng = np.random.default_rng(9)
        grid = make_grid(shape=(10, 10, 10))
        for _ in range(20):
            m = random_blob_mask(rng, grid, rng.uniform(0.05, 0.5))
            assert connected_components(m).count == len(brute_components(m.data))


class TestStratification:
    def _mask_with_ml(self, ml: float) -> BinaryMask:
        grid = make_grid(shape=(40, 40, 40))  # 1 mm voxels; 1000 vox = 1 ml
        n = round(ml * 1000)
        data = np.zeros(grid.shape, dtype=np.uint8)
        data.flat[:n] = 1
        return BinaryMask(grid, data)

    def test_boundaries(self):
        assert lesion_size_stratum(self._mask_with_ml(4.99)) == "small"
        assert lesion_size_stratum(self._mask_with_ml(5.0)) == "medium"
        assert lesion_size_stratum(self._mask_with_ml(19.99)) == "medium"
        assert lesion_size_stratum(self._mask_with_ml(20.0)) == "large"


def test_evaluate_pair_record(unit_grid):
    p = mask_of(unit_grid, [(1, 1, 1)])
    record = evaluate_pair(p, p, "case-1", "model-a")
    assert record.dsc == 1.0
    assert record.avd == 0.0
    assert record.hd95 == 0.0
    assert record.stratum == "small"
    assert np.isfinite([record.dsc, record.avd, record.ald, record.f1, record.hd95]).all()
