import json

import numpy as np
import pandas as pd
import pytest

from cevae import BundleBatch
from diffnet import NetworkParams, NetworkSpec, init_params
from error_handler import ConfigurationError, ShapeError, UndefinedMetricError
from fair_trainer import PredictorHandle
from fairness_metrics import (BASELINE_LABEL, UtilitySpec, auc_prc, auc_roc, brier, build_metrics_report,
                              cf_diff_matrix, clp_aggregate, demographic_parity_gaps, equalized_odds_gaps,
                              expected_utility, group_rates, prevalence_threshold, report_tables,
                              write_metrics_report)


def make_bundles(latent, groups, outcomes, cf_outcomes) -> BundleBatch:
    groups = np.asarray(groups, dtype=np.int64)
    n = len(groups)
    cf_outcomes = np.asarray(cf_outcomes, dtype=np.int64)
    latent = np.asarray(latent, dtype=np.float64).reshape(n, -1)
    return BundleBatch(ids=np.arange(n), groups=groups, outcomes=np.asarray(outcomes, dtype=np.int64),
                       latent=latent, latent_mean=latent.copy(),
                       cf_features=np.zeros((n, cf_outcomes.shape[1], 1), dtype=np.uint8),
                       cf_outcomes=cf_outcomes, cf_probs=np.full(cf_outcomes.shape, 0.5))


def linear_handle(weight_rows, bias=(0.0, 0.0)) -> PredictorHandle:
    """Latent-mode predictor without hidden layers; row 0 reads u, row 1 + g reads onehot(a)"""
    weight = np.asarray(weight_rows, dtype=np.float64)
    spec = NetworkSpec(input_dim=weight.shape[0], hidden_dim=1, num_hidden_layers=0, output_dim=2)
    params = NetworkParams({"layer0.weight": weight, "layer0.bias": np.asarray(bias, dtype=np.float64)})
    return PredictorHandle(spec, params, "latent", weight.shape[0] - 1)


def pair_counting_auc(scores, labels) -> float:
    positives = [s for s, y in zip(scores, labels) if y == 1]
    negatives = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in positives:
        for n in negatives:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(positives) * len(negatives))


def threshold_enumeration_ap(scores, labels) -> float:
    scores, labels = np.asarray(scores), np.asarray(labels)
    n_pos = labels.sum()
    total, previous_recall = 0.0, 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= t
        tp = labels[predicted].sum()
        recall = tp / n_pos
        total += (recall - previous_recall) * tp / predicted.sum()
        previous_recall = recall
    return total


@pytest.fixture
def random_scores():
    rng = np.random.default_rng(30)
    scores = np.round(rng.random(30), 1)
    labels = rng.integers(0, 2, 30)
    labels[:2] = [0, 1]
    return scores, labels


# AUC-ROC

def test_auc_roc_separated():
    assert auc_roc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def test_auc_roc_all_ties():
    assert auc_roc([0.4] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_roc_matches_pair_counting(random_scores):
    scores, labels = random_scores
    assert auc_roc(scores, labels) == pair_counting_auc(scores, labels)


def test_auc_roc_invariant_to_increasing_transform(random_scores):
    scores, labels = random_scores
    assert auc_roc(scores ** 3 + scores, labels) == pytest.approx(auc_roc(scores, labels), abs=1e-12)


def test_auc_roc_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        auc_roc([0.2, 0.9], [1, 1])


# AUC-PRC

def test_auc_prc_perfect_ranking():
    assert auc_prc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0


def test_auc_prc_constant_scores_is_prevalence():
    labels = [1, 0, 0, 1, 0, 0, 0, 1]
    assert auc_prc([0.5] * 8, labels) == pytest.approx(3 / 8, abs=1e-15)


def test_auc_prc_matches_threshold_enumeration(random_scores):
    scores, labels = random_scores
    assert auc_prc(scores, labels) == pytest.approx(threshold_enumeration_ap(scores, labels), abs=1e-12)


def test_auc_prc_needs_a_positive():
    with pytest.raises(UndefinedMetricError):
        auc_prc([0.3, 0.4], [0, 0])


# Brier

def test_brier_reference_values():
    assert brier([1.0, 0.0], [1, 0]) == 0.0
    assert brier([0.5] * 4, [0, 1, 1, 0]) == 0.25
    assert brier([0.8, 0.3], [1, 0]) == pytest.approx(0.065, abs=1e-15)


def test_brier_decomposes_over_subsets():
    rng = np.random.default_rng(2)
    p, y = rng.random(17), rng.integers(0, 2, 17)
    whole = brier(p, y)
    parts = (7 * brier(p[:7], y[:7]) + 10 * brier(p[7:], y[7:])) / 17
    assert whole == pytest.approx(parts, abs=1e-15)


def test_brier_rejects_out_of_range():
    with pytest.raises(ConfigurationError):
        brier([1.2], [1])
    with pytest.raises(ShapeError):
        brier([0.2, 0.4], [1])


# group fairness

def test_labels_as_probabilities_satisfy_equalized_odds():
    labels = np.array([0, 1, 1, 0, 1, 0, 0, 1])
    groups = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    for threshold in (0.1, 0.5, 0.9):
        gaps = equalized_odds_gaps(labels.astype(float), labels, groups, threshold)
        assert gaps.false_positive_rate.gap(0, 1) == 0.0
        assert gaps.false_negative_rate.gap(0, 1) == 0.0


def test_constant_predictor_has_no_gaps():
    labels = np.array([0, 1, 1, 0, 1, 0])
    groups = np.array([0, 0, 1, 1, 2, 2])
    gaps = equalized_odds_gaps(np.full(6, 0.7), labels, groups)
    assert gaps.false_positive_rate.max_gap() == 0.0
    assert gaps.false_negative_rate.max_gap() == 0.0
    assert demographic_parity_gaps(np.full(6, 0.7), groups).max_gap() == 0.0


def test_equalized_odds_hand_case():
    labels = [0, 0, 1, 1, 0, 0, 1, 1]
    groups = [0, 0, 0, 0, 1, 1, 1, 1]
    probs = [0.2, 0.7, 0.6, 0.4, 0.1, 0.3, 0.8, 0.9]
    gaps = equalized_odds_gaps(probs, labels, groups, 0.5)
    assert gaps.rates[0].false_positive_rate == 0.5
    assert gaps.rates[0].false_negative_rate == 0.5
    assert gaps.rates[1].false_positive_rate == 0.0
    assert gaps.rates[1].false_negative_rate == 0.0
    assert gaps.false_positive_rate.gap(1, 0) == gaps.false_positive_rate.gap(0, 1) == 0.5


def test_missing_class_flags_rate_undefined():
    gaps = equalized_odds_gaps([0.2, 0.8, 0.9], [0, 1, 1], [0, 0, 1])
    assert gaps.rates[1].false_positive_rate is None
    assert gaps.false_positive_rate.gap(0, 1) is None
    assert gaps.false_negative_rate.gap(0, 1) == 0.0


def test_demographic_parity_cases():
    groups = [0, 0, 0, 0, 1, 1, 1, 1]
    assert demographic_parity_gaps([0.2, 0.7, 0.6, 0.4, 0.1, 0.3, 0.2, 0.9], groups).gap(0, 1) == 0.25
    assert demographic_parity_gaps([0.9, 0.8, 0.7, 0.6, 0.1, 0.2, 0.3, 0.4], groups).gap(0, 1) == 1.0
    assert demographic_parity_gaps([0.1, 0.6, 0.3, 0.8, 0.3, 0.8, 0.1, 0.6], groups).gap(0, 1) == 0.0


def test_positive_count_non_increasing_in_threshold(random_scores):
    scores, labels = random_scores
    groups = np.zeros(30, dtype=int)
    counts = [group_rates(scores, labels, groups, t)[0].positive_rate for t in np.linspace(0.05, 0.95, 19)]
    assert all(hi >= lo for hi, lo in zip(counts, counts[1:]))


def test_prevalence_threshold_matches_rate():
    probs = np.linspace(0.0, 1.0, 101)
    labels = np.zeros(101, dtype=int)
    labels[:20] = 1
    threshold = prevalence_threshold(probs, labels)
    assert (probs >= threshold).mean() == pytest.approx(labels.mean(), abs=0.02)


# utility

def test_perfect_predictor_full_utility():
    labels = [0, 1, 0, 1]
    report = expected_utility([0.0, 1.0, 0.1, 0.9], labels, [0, 0, 1, 1])
    assert report.values == {0: {0: 1.0, 1: 1.0}, 1: {0: 1.0, 1: 1.0}}


def test_equalized_odds_predictor_has_equal_benefit():
    labels = [0, 0, 1, 1, 0, 0, 1, 1]
    groups = [0, 0, 0, 0, 1, 1, 1, 1]
    probs = [0.7, 0.2, 0.6, 0.1, 0.3, 0.9, 0.2, 0.8]
    report = expected_utility(probs, labels, groups)
    assert report.gaps[0].gap(0, 1) == 0.0
    assert report.gaps[1].gap(0, 1) == 0.0


def test_utility_formula():
    probs = [0.9] * 3 + [0.1] * 7
    report = expected_utility(probs, [0] * 10, [0] * 10, UtilitySpec(false_positive_cost=1.0))
    assert report.values[0][0] == pytest.approx(0.7)
    assert report.values[1][0] is None


@pytest.mark.parametrize("spec", [UtilitySpec(false_positive_cost=1.5), UtilitySpec(false_negative_cost=0.0),
                                  UtilitySpec(threshold=1.0)])
def test_utility_spec_bounds(spec):
    with pytest.raises(ConfigurationError):
        spec.validate()


# counterfactual measurements

def test_constant_logits_have_zero_clp():
    handle = linear_handle(np.zeros((3, 2)), bias=(0.4, -0.2))
    bundles = make_bundles([0.1, -0.5, 2.0], [0, 1, 0], [1, 0, 1], [[1, 1], [0, 0], [1, 1]])
    assert clp_aggregate(handle, bundles) == 0.0


def test_single_pair_clp_is_one():
    handle = linear_handle([[0.0, 0.0], [0.0, 0.0], [1.0, -1.0]])
    bundles = make_bundles([0.3], [0], [1], [[1, 1]])
    assert clp_aggregate(handle, bundles) == pytest.approx(1.0, abs=1e-15)


def test_clp_is_mean_over_factual_samples():
    # factual logits are (0, 0); each gated counterfactual group contributes exactly 1
    handle = linear_handle([[0.0, 0.0], [0.0, 0.0], [1.0, -1.0], [1.0, -1.0]])
    bundles = make_bundles([0.5, -0.5, 1.5], [0, 0, 0], [1, 1, 0], [[1, 0, 0], [1, 1, 0], [0, 0, 0]])
    assert clp_aggregate(handle, bundles) == pytest.approx(1.0, abs=1e-15)


def test_group_blind_model_has_zero_matrix():
    handle = linear_handle([[0.8, -0.4], [0.3, 0.1], [0.3, 0.1]])
    rng = np.random.default_rng(4)
    outcomes = rng.integers(0, 2, 20)
    bundles = make_bundles(rng.normal(size=20), rng.integers(0, 2, 20), outcomes, np.stack([outcomes] * 2, axis=1))
    matrix = cf_diff_matrix(bundles, handle)
    assert np.allclose(matrix.values, 0.0, atol=1e-15)


def test_cf_diff_hand_case():
    bundles = make_bundles([0.0, 0.0], [0, 1], [1, 1], [[1, 1], [1, 1]])
    probs = np.array([[0.3, 0.5], [0.6, 0.4]])
    matrix = cf_diff_matrix(bundles, probs, conditioning_outcome=1)
    assert matrix.values[0, 1] == pytest.approx(0.2, abs=1e-15)
    assert matrix.values[1, 0] == pytest.approx(0.2, abs=1e-15)
    assert matrix.values[0, 0] == matrix.values[1, 1] == 0.0
    assert matrix.counts.tolist() == [[0, 1], [1, 0]]


def test_cf_diff_without_qualifying_samples_is_empty():
    bundles = make_bundles([0.0, 0.0], [0, 1], [1, 1], [[1, 1], [1, 1]])
    matrix = cf_diff_matrix(bundles, np.array([[0.3, 0.5], [0.6, 0.4]]), conditioning_outcome=0)
    assert matrix.empty.tolist() == [[False, True], [True, False]]
    assert matrix.to_dict()["values"] == [[0.0, None], [None, 0.0]]


def test_cf_diff_rejects_wrong_shape():
    bundles = make_bundles([0.0, 0.0], [0, 1], [1, 1], [[1, 1], [1, 1]])
    with pytest.raises(ShapeError):
        cf_diff_matrix(bundles, np.zeros((2, 3)))


# reports

@pytest.fixture
def report_inputs():
    rng = np.random.default_rng(12)
    n = 40
    groups = rng.integers(0, 2, n)
    outcomes = rng.integers(0, 2, n)
    cf_outcomes = np.stack([outcomes, outcomes], axis=1)
    cf_outcomes[np.arange(n), 1 - groups] = rng.integers(0, 2, n)
    bundles = make_bundles(rng.normal(size=n), groups, outcomes, cf_outcomes)
    baseline = PredictorHandle(NetworkSpec(3, 1, 0, 2), init_params(NetworkSpec(3, 1, 0, 2), 1), "latent", 2)
    fair = linear_handle([[1.0, -1.0], [0.2, 0.0], [0.2, 0.0]])
    return bundles, [(BASELINE_LABEL, None, baseline), ("1.0", 1.0, fair)]


def test_report_has_one_row_per_model(report_inputs):
    bundles, models = report_inputs
    report = build_metrics_report(models, bundles)
    tables = report_tables(report)
    assert tables["performance"]["lambda_clp"].tolist() == [BASELINE_LABEL, "1.0"]
    assert len(tables["group_performance"]) == 4
    assert report.models[1].clp == pytest.approx(0.0, abs=1e-15)
    for model in report.models:
        assert set(model.cf_matrices) == {"y=0", "y=1", "all"}
        assert 0.0 <= model.overall["auc_roc"] <= 1.0


def test_write_report_files(tmp_path, report_inputs):
    bundles, models = report_inputs
    written = write_metrics_report(build_metrics_report(models, bundles), tmp_path / "reports")
    assert sorted(p.name for p in written) == ["cf_matrices.json", "fairness_gaps.csv", "group_performance.csv",
                                                "performance.csv"]
    performance = pd.read_csv(tmp_path / "reports" / "performance.csv", keep_default_na=False)
    assert list(performance.columns) == ["lambda_clp", "auc_prc", "auc_roc", "brier", "clp"]
    matrices = json.loads((tmp_path / "reports" / "cf_matrices.json").read_text())
    assert set(matrices) == {BASELINE_LABEL, "1.0"}
    assert matrices["1.0"]["all"]["groups"] == [0, 1]


def test_report_writing_is_reproducible(tmp_path, report_inputs):
    bundles, models = report_inputs
    report = build_metrics_report(models, bundles)
    write_metrics_report(report, tmp_path / "a")
    write_metrics_report(report.to_dict(), tmp_path / "b")
    for name in ("performance.csv", "group_performance.csv", "fairness_gaps.csv", "cf_matrices.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
