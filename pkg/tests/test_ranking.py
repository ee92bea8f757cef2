import numpy as np
import pytest

from strokeseg.metrics import MetricRecord
from strokeseg.ranking import RankingError, case_level_ranking, render_report


def record(case, model, dsc=0.5, avd=1.0, ald=1, f1=0.5, hd95=5.0):
    return MetricRecord(
        case_id=case, model_id=model, dsc=dsc, avd=avd, ald=ald, f1=f1,
        hd95=hd95, precision=0.5, recall=0.5,
    )


class TestRankingBasics:
    def test_total_dominance_two_models(self):
        # model A better on all five metrics for the single case
        records = [
            record("c1", "A", dsc=0.9, avd=0.1, ald=0, f1=0.9, hd95=1.0),
            record("c1", "B", dsc=0.5, avd=2.0, ald=2, f1=0.5, hd95=9.0),
        ]
        table = case_level_ranking(records)
        assert table.overall["A"] == pytest.approx(1.0)
        assert table.overall["B"] == pytest.approx(2.0)

    def test_full_ties_give_mid_rank(self):
        records = [record(c, m) for c in ("c1", "c2") for m in ("A", "B", "C")]
        table = case_level_ranking(records)
        for model in ("A", "B", "C"):
            assert table.overall[model] == pytest.approx((3 + 1) / 2)

    def test_incomplete_grid_rejected(self):
        records = [record("c1", "A"), record("c1", "B"), record("c2", "A")]
        with pytest.raises(RankingError):
            case_level_ranking(records)


class TestHandComputedInstance:
    """3 models x 2 cases, ranked slice by slice by hand."""

    def make_records(self):
        # dsc (higher better):      c1: A=.8 B=.6 C=.7 -> ranks 1,3,2 ; c2: A=.5 B=.9 C=.5 -> 2.5,1,2.5
        # avd (lower better):       c1: A=1  B=2  C=3  -> 1,2,3       ; c2: A=2  B=2  C=1  -> 2.5,2.5,1
        # ald (lower better):       c1: A=0  B=1  C=1  -> 1,2.5,2.5   ; c2: all 1 -> 2,2,2
        # f1 (higher better):       c1: A=1  B=0  C=.5 -> 1,3,2       ; c2: A=.5 B=.5 C=1 -> 2.5,2.5,1
        # hd95 (lower better):      c1: A=2  B=4  C=6  -> 1,2,3       ; c2: A=9 B=3 C=6 -> 3,1,2
        rows = {
            ("c1", "A"): dict(dsc=0.8, avd=1, ald=0, f1=1.0, hd95=2),
            ("c1", "B"): dict(dsc=0.6, avd=2, ald=1, f1=0.0, hd95=4),
            ("c1", "C"): dict(dsc=0.7, avd=3, ald=1, f1=0.5, hd95=6),
            ("c2", "A"): dict(dsc=0.5, avd=2, ald=1, f1=0.5, hd95=9),
            ("c2", "B"): dict(dsc=0.9, avd=2, ald=1, f1=0.5, hd95=3),
            ("c2", "C"): dict(dsc=0.5, avd=1, ald=1, f1=1.0, hd95=6),
        }
        return [record(c, m, **vals) for (c, m), vals in rows.items()]

    def test_per_metric_mean_ranks(self):
        table = case_level_ranking(self.make_records())
        assert table.mean_ranks["dsc"] == pytest.approx({"A": 1.75, "B": 2.0, "C": 2.25})
        assert table.mean_ranks["avd"] == pytest.approx({"A": 1.75, "B": 2.25, "C": 2.0})
        assert table.mean_ranks["ald"] == pytest.approx({"A": 1.5, "B": 2.25, "C": 2.25})
        assert table.mean_ranks["f1"] == pytest.approx({"A": 1.75, "B": 2.75, "C": 1.5})
        assert table.mean_ranks["hd95"] == pytest.approx({"A": 2.0, "B": 1.5, "C": 2.5})

    def test_overall_is_mean_of_metric_means(self):
        table = case_level_ranking(self.make_records())
        assert table.overall["A"] == pytest.approx((1.75 + 1.75 + 1.5 + 1.75 + 2.0) / 5)
        assert table.overall["B"] == pytest.approx((2.0 + 2.25 + 2.25 + 2.75 + 1.5) / 5)
        assert table.overall["C"] == pytest.approx((2.25 + 2.0 + 2.25 + 1.5 + 2.5) / 5)

    def test_case_ranks_are_tie_adjusted_permutations(self):
        table = case_level_ranking(self.make_records())
        for metric in table.metrics:
            for cid in table.case_ids:
                ranks = sorted(table.case_ranks[metric][cid].values())
                assert sum(ranks) == pytest.approx(6.0)  # 1+2+3 preserved under ties


class TestMonotoneInvariance:
    def test_monotone_transform_keeps_ranks(self):
        rng = np.random.default_rng(0)
        records = []
        for c in range(4):
            for m in ("A", "B", "C"):
                records.append(
                    record(f"c{c}", m, dsc=float(rng.random()), avd=float(rng.random()),
                           ald=int(rng.integers(0, 4)), f1=float(rng.random()),
                           hd95=float(rng.random() * 10))
                )
        base = case_level_ranking(records)
        transformed = [
            MetricRecord(r.case_id, r.model_id, dsc=float(np.exp(3 * r.dsc)), avd=r.avd,
                         ald=r.ald, f1=r.f1, hd95=r.hd95, precision=0.5, recall=0.5)
            for r in records
        ]
        after = case_level_ranking(transformed)
        assert after.case_ranks["dsc"] == base.case_ranks["dsc"]


class TestReport:
    def test_median_and_mean_rank_cells(self):
        records = [
            record("c1", "A", dsc=0.9, avd=0.1, ald=0, f1=0.9, hd95=1.0),
            record("c1", "B", dsc=0.5, avd=2.0, ald=2, f1=0.5, hd95=9.0),
        ]
        table = case_level_ranking(records)
        report = render_report(table)
        lines = report.strip().splitlines()
        assert lines[0].split()[:2] == ["model", "mean_rank"]
        # best model first, each metric cell formatted as median (mean rank)
        assert lines[2].startswith("A")
        assert "0.900 (1.00)" in lines[2]
        assert "0 (1.00)" in lines[2]  # integer ALD median
        assert lines[3].startswith("B")
        assert "0.500 (2.00)" in lines[3]
