import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fishforge import uncert
from fishforge.uncert import (
    AnnotationSet,
    PredictionRecord,
    UncertError,
    agreement_entropy,
    certainty,
    certainty_by_signal_count,
    condition_on_certainty,
    ece,
    entropy,
    min_entropy,
    normalized_entropy,
)

LOG3 = math.log(3)


def rec(id_, true, probs, cert=None):
    probs = np.asarray(probs, dtype=np.float64)
    if cert is None:
        cert = certainty(probs, 0.01, len(probs))
    return PredictionRecord(id=id_, true_label=true, probs=probs, certainty=cert)


class TestEntropy:
    def test_one_hot(self):
        assert entropy(np.array([1.0, 0.0, 0.0])) == 0.0

    def test_uniform(self):
        assert entropy(np.full(3, 1 / 3)) == pytest.approx(LOG3, abs=1e-12)

    def test_half_half(self):
        assert entropy(np.array([0.5, 0.5, 0.0])) == pytest.approx(math.log(2), abs=1e-12)

    def test_unnormalized_rejected(self):
        with pytest.raises(UncertError):
            entropy(np.array([0.5, 0.4]))


class TestMinEntropy:
    def test_zero_alpha(self):
        assert min_entropy(0.0, 3) == 0.0

    def test_default_alpha_floor(self):
        assert min_entropy(0.01, 3) == pytest.approx(0.0629, abs=1e-4)

    def test_uniform_limit(self):
        c = 4
        alpha = (c - 1) / c
        assert min_entropy(alpha, c) == pytest.approx(math.log(c), abs=1e-12)


class TestNormalizedEntropy:
    def test_uniform(self):
        expected = (LOG3 - min_entropy(0.01, 3)) / LOG3
        got = normalized_entropy(np.full(3, 1 / 3), 0.01, 3)
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.9427, abs=1e-4)

    def test_smoothed_target_exactly_zero(self):
        p = np.array([0.99, 0.005, 0.005])
        assert normalized_entropy(p, 0.01, 3) == pytest.approx(0.0, abs=1e-15)

    def test_one_hot_raw_negative_clamped(self):
        p = np.array([1.0, 0.0, 0.0])
        raw = normalized_entropy(p, 0.01, 3)
        assert raw == pytest.approx(-min_entropy(0.01, 3) / LOG3, abs=1e-12)
        assert raw == pytest.approx(-0.0573, abs=1e-4)
        assert certainty(p, 0.01, 3) == 1.0

    @pytest.mark.parametrize("seed", range(20))
    def test_monotone_in_entropy(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(3))
        q = rng.dirichlet(np.ones(3))
        if entropy(p) > entropy(q):
            p, q = q, p
        assert normalized_entropy(p, 0.01, 3) <= normalized_entropy(q, 0.01, 3)


class TestEce:
    def test_all_correct_full_certainty(self):
        records = [rec(f"r{i}", 0, [1, 0, 0], cert=1.0) for i in range(5)]
        report = ece(records)
        assert report.ece == 0.0

    def test_single_bin_hand_example(self):
        # 4 records, certainty 0.8 each, 2 correct: ECE = posECE = 0.3
        records = [
            rec("a", 0, [0.9, 0.05, 0.05], cert=0.8),
            rec("b", 0, [0.9, 0.05, 0.05], cert=0.8),
            rec("c", 1, [0.9, 0.05, 0.05], cert=0.8),
            rec("d", 2, [0.9, 0.05, 0.05], cert=0.8),
        ]
        report = ece(records, n_bins=1)
        assert report.ece == pytest.approx(0.3, abs=1e-12)
        assert report.pos_ece == pytest.approx(0.3, abs=1e-12)
        assert report.neg_ece == 0.0

    @pytest.mark.parametrize("seed", range(25))
    def test_decomposition_identity(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 200))
        records = [
            rec(
                f"r{i}",
                int(rng.integers(0, 3)),
                rng.dirichlet(np.ones(3)),
                cert=float(rng.random()),
            )
            for i in range(n)
        ]
        report = ece(records, n_bins=int(rng.integers(1, 20)))
        assert report.ece == pytest.approx(report.pos_ece + report.neg_ece, abs=1e-12)

    def test_bin_counts_sum(self):
        rng = np.random.default_rng(3)
        records = [
            rec(f"r{i}", 0, rng.dirichlet(np.ones(3))) for i in range(57)
        ]
        report = ece(records, n_bins=7)
        assert sum(report.bin_counts) == 57

    def test_empty_rejected(self):
        with pytest.raises(UncertError):
            ece([])


class TestConditioning:
    def test_full_retain_equals_accuracy(self):
        records = [rec(f"r{i}", i % 3, np.roll([0.9, 0.05, 0.05], i % 3)) for i in range(9)]
        rows = condition_on_certainty(records, [1.0])
        expected = sum(r.correct for r in records) / len(records)
        assert rows[0]["accuracy"] == pytest.approx(expected)

    def test_hand_sorted_example(self):
        records = [
            rec("a", 0, [0.9, 0.05, 0.05], cert=0.9),   # correct
            rec("b", 1, [0.9, 0.05, 0.05], cert=0.8),   # wrong
            rec("c", 2, [0.05, 0.05, 0.9], cert=0.7),   # correct
            rec("d", 1, [0.05, 0.05, 0.9], cert=0.1),   # wrong
        ]
        rows = condition_on_certainty(records, [0.5])
        assert rows[0]["accuracy"] == pytest.approx(0.5)
        assert rows[0]["n_retained"] == 2

    def test_nested_retained_sets(self):
        rng = np.random.default_rng(11)
        records = [
            rec(f"r{i}", int(rng.integers(0, 3)), rng.dirichlet(np.ones(3)))
            for i in range(40)
        ]
        fractions = [1.0, 0.75, 0.5, 0.25, 0.05]
        rows = condition_on_certainty(records, fractions)
        for bigger, smaller in zip(rows, rows[1:]):
            assert set(smaller["retained_ids"]) <= set(bigger["retained_ids"])

    def test_class_share_sums_to_one(self):
        records = [rec(f"r{i}", i % 3, np.full(3, 1 / 3)) for i in range(12)]
        rows = condition_on_certainty(records, [1.0, 0.5])
        for r in rows:
            assert sum(r["class_share"]) == pytest.approx(1.0)


class TestAgreement:
    def make_sets(self, labels_by_annotator, ids):
        return [
            AnnotationSet(annotator_id=a, labels=dict(zip(ids, labels)))
            for a, labels in labels_by_annotator.items()
        ]

    def test_unanimous(self):
        ids = ["i0", "i1"]
        sets = self.make_sets({f"a{k}": [1, 2] for k in range(10)}, ids)
        truth = {"i0": 1, "i1": 2}
        out = agreement_entropy(sets, truth)
        for img in ids:
            assert out["per_image"][img]["human_certainty"] == pytest.approx(1.0)
        assert out["accuracy_mean"] == pytest.approx(1.0)

    def test_five_five_split(self):
        ids = ["i0"]
        labels = {f"a{k}": [0 if k < 5 else 1] for k in range(10)}
        out = agreement_entropy(self.make_sets(labels, ids), {"i0": 0})
        expected = math.log(2) / LOG3
        assert out["per_image"]["i0"]["human_uncertainty"] == pytest.approx(expected, abs=1e-12)
        assert out["per_image"]["i0"]["human_certainty"] == pytest.approx(1 - expected, abs=1e-12)

    def test_annotator_permutation_invariance(self):
        ids = ["i0", "i1", "i2"]
        rng = np.random.default_rng(5)
        sets = [
            AnnotationSet(f"a{k}", {i: int(rng.integers(0, 3)) for i in ids})
            for k in range(4)
        ]
        truth = {i: 0 for i in ids}
        out1 = agreement_entropy(sets, truth)
        out2 = agreement_entropy(sets[::-1], truth)
        for img in ids:
            assert out1["per_image"][img] == out2["per_image"][img]

    def test_coverage_gap_rejected(self):
        sets = [
            AnnotationSet("a0", {"i0": 1, "i1": 2}),
            AnnotationSet("a1", {"i0": 1}),
        ]
        with pytest.raises(UncertError):
            agreement_entropy(sets, {"i0": 1, "i1": 2})

    def test_single_annotator_rejected(self):
        with pytest.raises(UncertError):
            agreement_entropy([AnnotationSet("a0", {"i0": 1})], {"i0": 1})

    def test_accuracy_mean_std(self):
        ids = ["i0", "i1"]
        truth = {"i0": 0, "i1": 1}
        sets = [
            AnnotationSet("a0", {"i0": 0, "i1": 1}),  # 1.0
            AnnotationSet("a1", {"i0": 0, "i1": 0}),  # 0.5
        ]
        out = agreement_entropy(sets, truth)
        assert out["accuracy_mean"] == pytest.approx(0.75)
        assert out["accuracy_std"] == pytest.approx(np.std([1.0, 0.5], ddof=1))


class TestCertaintyBySignalCount:
    def test_constant_certainty(self):
        records = [rec(f"r{i}", 0, [0.8, 0.1, 0.1], cert=0.42) for i in range(10)]
        ngreen = {f"r{i}": 2 + i % 3 for i in range(10)}
        rows = certainty_by_signal_count(records, ngreen)
        for row in rows:
            assert row["certainty_mean"] == pytest.approx(0.42)

    def test_groups_follow_manifest(self):
        records = [rec(f"r{i}", 0, [0.8, 0.1, 0.1]) for i in range(6)]
        ngreen = {"r0": 2, "r1": 2, "r2": 5, "r3": 5, "r4": 5, "r5": 9}
        rows = certainty_by_signal_count(records, ngreen)
        assert [(r["n_green"], r["count"]) for r in rows] == [(2, 2), (5, 3), (9, 1)]

    def test_unmatched_id_rejected(self):
        with pytest.raises(UncertError):
            certainty_by_signal_count([rec("x", 0, [1, 0, 0])], {})


def test_predictions_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    records = [
        rec(f"r{i}", int(rng.integers(0, 3)), rng.dirichlet(np.ones(3)))
        for i in range(20)
    ]
    path = tmp_path / "preds.csv"
    uncert.write_predictions_csv(path, records)
    header = path.read_text().splitlines()[0]
    assert header == "id,true_label,p0,p1,p2,certainty"
    back = uncert.read_predictions_csv(path)
    assert len(back) == 20
    for a, b in zip(records, back):
        assert a.id == b.id
        assert a.true_label == b.true_label
        np.testing.assert_allclose(a.probs, b.probs, atol=1e-8)
        assert a.certainty == pytest.approx(b.certainty, abs=1e-8)


@given(
    st.lists(
        st.tuples(st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0.01, 10)),
        min_size=1,
        max_size=30,
    )
)
@settings(max_examples=60, deadline=None)
def test_certainty_always_in_unit_interval(raw):
    for t in raw:
        p = np.array(t) / sum(t)
        p = p / p.sum()
        c = certainty(p, 0.01, 3)
        assert 0.0 <= c <= 1.0
