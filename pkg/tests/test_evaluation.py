import csv
import itertools
import statistics

import numpy as np
import pytest

from plmlab.data import gen_synthetic, inject, symmetric_T
from plmlab.errors import ComparisonError, EvaluationError
from plmlab.evaluation import (
    MetricsRecord,
    PseudoAnchorSet,
    build_pseudo_anchors,
    matrix_error,
    posterior_error,
    report,
    summarize,
    test_accuracy as accuracy,
    timing_ratio,
)


class FixedProbs:
    """Model stand-in whose softmax returns a fixed row per instance."""

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=float)

    def logits(self, X, batch_size=1024):
        return np.log(np.broadcast_to(self.probs, (len(X), self.probs.shape[-1])))


@pytest.fixture(scope="module")
def noisy():
    return inject(gen_synthetic(3, 20, seed=0), "symmetric", 0.3, seed=0)


def test_oracle_anchors_cover_classes_with_cap(noisy):
    a = build_pseudo_anchors(noisy, per_class_cap=5)
    assert len(a) == 15
    np.testing.assert_array_equal(np.bincount(a.classes), [5, 5, 5])
    np.testing.assert_allclose(a.truth, symmetric_T(3, 0.3)[a.classes])
    np.testing.assert_array_equal(a.classes, noisy.clean_labels[a.indices])


def test_threshold_above_one_is_error(noisy):
    with pytest.raises(EvaluationError):
        build_pseudo_anchors(noisy, tau=1.01)


def test_unconfident_model_admits_no_anchor(noisy):
    model = FixedProbs([0.7, 0.15, 0.15])
    with pytest.raises(EvaluationError):
        build_pseudo_anchors(noisy, model, tau=0.99)


def test_confident_model_selects_matching_instances(noisy):
    probs = np.eye(3)[noisy.clean_labels] * 0.98 + 0.01 / 1.0 * (1 - np.eye(3)[noisy.clean_labels])

    class PerRow(FixedProbs):
        def logits(self, X, batch_size=1024):
            return np.log(self.probs[: len(X)])

    a = build_pseudo_anchors(noisy, PerRow(probs), tau=0.97, per_class_cap=100)
    assert len(a) == len(noisy)
    with pytest.raises(EvaluationError):
        build_pseudo_anchors(noisy, PerRow(probs), tau=0.99)


def test_posterior_error_examples():
    anchors = PseudoAnchorSet(np.array([0]), np.array([0]), np.array([[0.5, 0.5]]))
    assert posterior_error(np.array([[1.0, 0.0]]), anchors, None) == pytest.approx(np.sqrt(0.5), abs=1e-12)
    far = PseudoAnchorSet(np.array([0]), np.array([0]), np.array([[0.0, 1.0]]))
    assert posterior_error(np.array([[1.0, 0.0]]), far, None) == pytest.approx(np.sqrt(2), abs=1e-12)
    with pytest.raises(EvaluationError):
        posterior_error(np.zeros((1, 2)), PseudoAnchorSet(np.array([], int), np.array([], int), np.zeros((0, 2))), None)


def test_posterior_error_bounded_and_pooled():
    rng = np.random.default_rng(0)
    est = rng.dirichlet(np.ones(4), size=30)
    truth = rng.dirichlet(np.ones(4), size=10)
    idx = np.arange(0, 30, 3)
    a = PseudoAnchorSet(idx, np.zeros(10, int), truth)
    e = posterior_error(est, a, None)
    assert 0 <= e <= np.sqrt(2)
    assert e == pytest.approx(np.mean([np.linalg.norm(est[i] - t) for i, t in zip(idx, truth)]), abs=1e-12)
    model = FixedProbs(est[0])
    a1 = PseudoAnchorSet(np.array([2, 5]), np.zeros(2, int), truth[:2])
    X = np.zeros((8, 2, 2))
    assert posterior_error(model, a1, X) == pytest.approx(
        np.mean(np.linalg.norm(est[0] - truth[:2], axis=1)), abs=1e-12)


def test_accuracy():
    model = FixedProbs([0.1, 0.9])
    assert accuracy(model, np.zeros((4, 3)), [1, 1, 0, 1]) == 0.75
    assert accuracy(lambda X: np.array([0, 1]), None, [0, 0]) == 0.5


def test_matrix_error_examples():
    assert matrix_error(np.eye(3), symmetric_T(3, 0.3)) == pytest.approx(0.3, abs=1e-12)
    assert matrix_error(symmetric_T(4, 0.2), symmetric_T(4, 0.2)) == 0.0
    with pytest.raises(ComparisonError):
        matrix_error(np.eye(2), np.eye(3))


def _manifest(timings, **cfg):
    base = {"epochs_labeler": 20, "epochs_joint": 20, "epochs_classifier": 20, "batch_size": 128}
    base.update(cfg)
    return {"config": base, "timings_ms": timings}


def test_timing_ratio_example():
    plm = _manifest({"a": 20000.0, "b": 15560.0})
    fwd = _manifest({"a": 19210.0})
    assert timing_ratio(plm, fwd) == pytest.approx(35.56 / 19.21, rel=1e-12)
    assert timing_ratio(plm, fwd) == pytest.approx(1.851, abs=1e-3)
    with pytest.raises(ComparisonError):
        timing_ratio(plm, _manifest({"a": 1.0}, epochs_joint=10))
    with pytest.raises(ComparisonError):
        timing_ratio(plm, _manifest({"a": 0.0}))


def _records():
    out = []
    for variant, base in (("plm_f", 0.10), ("forward_baseline", 0.14)):
        for seed in range(3):
            out.append(MetricsRecord(variant, "symmetric", 0.5, seed, base + 0.01 * seed, 0.8 + 0.02 * seed,
                                     0.05, {"x": 100.0 * (2 if variant == "plm_f" else 1) + seed}))
    return out


def test_summary_recomputes_by_hand():
    rows = {r["variant"]: r for r in summarize(_records())}
    pe = [0.10, 0.11, 0.12]
    assert rows["plm_f"]["posterior_error_mean"] == pytest.approx(statistics.fmean(pe), abs=1e-12)
    assert rows["plm_f"]["posterior_error_std"] == pytest.approx(statistics.pstdev(pe), abs=1e-12)
    assert rows["plm_f"]["acc_std"] == pytest.approx(statistics.pstdev([0.8, 0.82, 0.84]), abs=1e-12)
    ratio = statistics.fmean([200 / 100, 201 / 101, 202 / 102])
    assert rows["plm_f"]["time_ratio"] == pytest.approx(ratio, abs=1e-12)
    assert rows["forward_baseline"]["time_ratio"] is None
    assert rows["plm_f"]["n_seeds"] == 3


def test_single_seed_std_is_zero():
    rows = summarize(_records()[:1])
    assert rows[0]["posterior_error_std"] == 0.0 and rows[0]["acc_std"] == 0.0


def test_report_csv_matches_spreadsheet_recompute(tmp_path):
    report(_records(), tmp_path)
    with open(tmp_path / "summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    for row in rows:
        recs = [r for r in _records() if r.variant == row["variant"]]
        assert float(row["posterior_error_mean"]) == pytest.approx(
            statistics.fmean(r.posterior_error for r in recs), abs=1e-9)
        assert float(row["acc_std"]) == pytest.approx(statistics.pstdev(r.test_accuracy for r in recs), abs=1e-9)


def test_report_is_byte_identical_and_order_invariant(tmp_path):
    recs = _records()
    report(recs, tmp_path / "a")
    ref = (tmp_path / "a" / "summary.csv").read_bytes()
    for i, perm in enumerate(itertools.islice(itertools.permutations(recs), 0, 720, 97)):
        report(list(perm), tmp_path / f"p{i}")
        assert (tmp_path / f"p{i}" / "summary.csv").read_bytes() == ref
        assert (tmp_path / f"p{i}" / "summary.json").read_bytes() == (tmp_path / "a" / "summary.json").read_bytes()


def test_report_errors(tmp_path):
    with pytest.raises(EvaluationError):
        report([], tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(EvaluationError):
        report(_records(), blocker)
