"""
Fairness Metrics - Performance, group-fairness, utility and counterfactual-difference measurements
Builds the per-model MetricsReport and renders it as CSV tables and plot-ready matrix JSON
"""

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from cevae import BundleBatch
from error_handler import ConfigurationError, ShapeError, UndefinedMetricError
from fair_trainer import PredictorHandle, counterfactual_probabilities, validation_clp

BASELINE_LABEL = "N/A"
DEFAULT_THRESHOLD = 0.5
FLOAT_FORMAT = "%.10g"


def _as_arrays(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores and labels differ in length ({scores.size} vs {labels.size})")
    return scores, labels


# ---------------------------------------------------------------------------
# Performance
# ---------------------------------------------------------------------------

def auc_roc(scores, labels) -> float:
    """Mann-Whitney statistic P(s+ > s-) + P(tie) / 2 from midranks"""
    scores, labels = _as_arrays(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC-ROC needs both classes present")
    ranks = rankdata(scores)
    u_stat = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def auc_prc(scores, labels) -> float:
    """Step-wise average precision; tied scores form one cut"""
    scores, labels = _as_arrays(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUC-PRC needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores, sorted_labels = scores[order], labels[order]
    # last index of each block of equal scores
    cut_ends = np.flatnonzero(np.r_[sorted_scores[1:] != sorted_scores[:-1], True])
    tp = np.cumsum(sorted_labels)[cut_ends]
    seen = cut_ends + 1
    precision = tp / seen
    recall_step = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(precision * recall_step))


def brier(probabilities, labels) -> float:
    probabilities, labels = _as_arrays(probabilities, labels)
    if probabilities.size == 0:
        raise UndefinedMetricError("Brier score of an empty set")
    if np.any((probabilities < 0) | (probabilities > 1)):
        raise ConfigurationError("Brier score needs probabilities in [0, 1]")
    return float(np.mean((probabilities - labels) ** 2))


# ---------------------------------------------------------------------------
# Group fairness
# ---------------------------------------------------------------------------

@dataclass
class GroupRates:
    group: int
    count: int
    positives: int
    negatives: int
    positive_rate: Optional[float]
    false_positive_rate: Optional[float]
    false_negative_rate: Optional[float]


@dataclass
class PairwiseGaps:
    """|rate(g1) - rate(g2)| for every unordered group pair; None where a rate is undefined"""
    values: Dict[Tuple[int, int], Optional[float]]

    def gap(self, first: int, second: int) -> Optional[float]:
        return self.values[(min(first, second), max(first, second))]

    @classmethod
    def from_rates(cls, rates: Dict[int, Optional[float]]) -> "PairwiseGaps":
        values = {}
        for first, second in itertools.combinations(sorted(rates), 2):
            a, b = rates[first], rates[second]
            values[(first, second)] = None if a is None or b is None else abs(a - b)
        return cls(values)

    def max_gap(self) -> Optional[float]:
        defined = [v for v in self.values.values() if v is not None]
        return max(defined) if defined else None


@dataclass
class EqualizedOddsGaps:
    false_positive_rate: PairwiseGaps
    false_negative_rate: PairwiseGaps
    rates: Dict[int, GroupRates]


def _group_count(groups: np.ndarray, group_count: Optional[int]) -> int:
    return int(group_count) if group_count is not None else (int(groups.max()) + 1 if groups.size else 0)


def group_rates(probabilities, labels, groups, threshold: float = DEFAULT_THRESHOLD,
                group_count: Optional[int] = None) -> Dict[int, GroupRates]:
    """Confusion rates of y_hat = 1[p >= T] per group"""
    probabilities, labels = _as_arrays(probabilities, labels)
    groups = np.asarray(groups, dtype=np.int64).reshape(-1)
    predicted = probabilities >= threshold
    rates = {}
    for group in range(_group_count(groups, group_count)):
        in_group = groups == group
        positives = in_group & (labels == 1)
        negatives = in_group & (labels == 0)
        n, n_pos, n_neg = int(in_group.sum()), int(positives.sum()), int(negatives.sum())
        rates[group] = GroupRates(
            group=group, count=n, positives=n_pos, negatives=n_neg,
            positive_rate=float(predicted[in_group].mean()) if n else None,
            false_positive_rate=float(predicted[negatives].mean()) if n_neg else None,
            false_negative_rate=float((~predicted[positives]).mean()) if n_pos else None,
        )
    return rates


def equalized_odds_gaps(probabilities, labels, groups, threshold: float = DEFAULT_THRESHOLD,
                        group_count: Optional[int] = None) -> EqualizedOddsGaps:
    rates = group_rates(probabilities, labels, groups, threshold, group_count)
    return EqualizedOddsGaps(
        false_positive_rate=PairwiseGaps.from_rates({g: r.false_positive_rate for g, r in rates.items()}),
        false_negative_rate=PairwiseGaps.from_rates({g: r.false_negative_rate for g, r in rates.items()}),
        rates=rates,
    )


def demographic_parity_gaps(probabilities, groups, threshold: float = DEFAULT_THRESHOLD,
                            group_count: Optional[int] = None) -> PairwiseGaps:
    probabilities = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    groups = np.asarray(groups, dtype=np.int64).reshape(-1)
    if probabilities.size == 0:
        raise UndefinedMetricError("Demographic parity needs at least one prediction")
    rates = group_rates(probabilities, np.zeros_like(groups), groups, threshold, group_count)
    return PairwiseGaps.from_rates({g: r.positive_rate for g, r in rates.items()})


def prevalence_threshold(probabilities, labels) -> float:
    """Threshold whose positive-prediction rate matches the label prevalence"""
    probabilities, labels = _as_arrays(probabilities, labels)
    if probabilities.size == 0:
        raise UndefinedMetricError("Prevalence threshold of an empty set")
    return float(np.quantile(probabilities, 1.0 - labels.mean()))


# ---------------------------------------------------------------------------
# Utility
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UtilitySpec:
    false_positive_cost: float = 1.0
    false_negative_cost: float = 1.0
    threshold: float = DEFAULT_THRESHOLD

    def validate(self) -> None:
        for name in ("false_positive_cost", "false_negative_cost"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ConfigurationError(f"UtilitySpec.{name} must be in (0, 1] so utilities stay in [0, 1] (got {value})")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError(f"UtilitySpec.threshold must be in (0, 1) (got {self.threshold})")


@dataclass
class UtilityReport:
    """Mean utility per outcome stratum and group, with pairwise group-benefit gaps"""
    values: Dict[int, Dict[int, Optional[float]]]
    gaps: Dict[int, PairwiseGaps]


def expected_utility(probabilities, labels, groups, spec: UtilitySpec = UtilitySpec(),
                     group_count: Optional[int] = None) -> UtilityReport:
    """Stratum y=0: V = 1 - cost_fp * FPR; stratum y=1: V = 1 - cost_fn * FNR; None for empty cells"""
    spec.validate()
    rates = group_rates(probabilities, labels, groups, spec.threshold, group_count)
    values: Dict[int, Dict[int, Optional[float]]] = {0: {}, 1: {}}
    for group, rate in rates.items():
        values[0][group] = (None if rate.false_positive_rate is None
                            else 1.0 - spec.false_positive_cost * rate.false_positive_rate)
        values[1][group] = (None if rate.false_negative_rate is None
                            else 1.0 - spec.false_negative_cost * rate.false_negative_rate)
    return UtilityReport(values=values, gaps={stratum: PairwiseGaps.from_rates(v) for stratum, v in values.items()})


# ---------------------------------------------------------------------------
# Counterfactual measurements
# ---------------------------------------------------------------------------

def clp_aggregate(handle: PredictorHandle, bundles: BundleBatch) -> float:
    """Mean over factual samples of the summed counterfactual logit-pairing terms"""
    return validation_clp(handle, bundles)


@dataclass
class CfDiffMatrix:
    """Cell (a, a'): mean of p(a') - p(a) over qualifying samples from group a; NaN where empty"""
    values: np.ndarray
    counts: np.ndarray
    conditioning_outcome: Optional[int]

    @property
    def empty(self) -> np.ndarray:
        mask = self.counts == 0
        np.fill_diagonal(mask, False)
        return mask

    def to_dict(self) -> Dict:
        k = self.values.shape[0]
        return {
            "groups": list(range(k)),
            "conditioning_outcome": self.conditioning_outcome,
            "values": [[None if self.empty[i, j] else float(self.values[i, j]) for j in range(k)] for i in range(k)],
            "counts": self.counts.astype(int).tolist(),
        }


def cf_diff_matrix(bundles: BundleBatch, model: Union[PredictorHandle, np.ndarray],
                   conditioning_outcome: Optional[int] = None) -> CfDiffMatrix:
    """Positive cells mean the counterfactual prediction is larger than the factual one"""
    probs = counterfactual_probabilities(model, bundles) if isinstance(model, PredictorHandle) else np.asarray(model)
    n, k = len(bundles), bundles.group_count
    if probs.shape != (n, k):
        raise ShapeError(f"Expected ({n}, {k}) counterfactual probabilities, got {probs.shape}")

    rows = np.arange(n)
    shift = probs - probs[rows, bundles.groups][:, None]
    values = np.zeros((k, k))
    counts = np.zeros((k, k), dtype=np.int64)
    for factual in range(k):
        for target in range(k):
            if factual == target:
                continue
            qualifying = bundles.groups == factual
            if conditioning_outcome is not None:
                qualifying &= (bundles.outcomes == conditioning_outcome)
                qualifying &= (bundles.cf_outcomes[:, target] == conditioning_outcome)
            counts[factual, target] = int(qualifying.sum())
            values[factual, target] = shift[qualifying, target].mean() if counts[factual, target] else np.nan
    return CfDiffMatrix(values=values, counts=counts, conditioning_outcome=conditioning_outcome)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class ModelMetrics:
    label: str
    clp_weight: Optional[float]
    overall: Dict[str, Optional[float]]
    per_group: Dict[int, Dict[str, Optional[float]]]
    clp: float
    thresholds: Dict[str, float]
    equalized_odds: Dict[str, EqualizedOddsGaps]
    demographic_parity: Dict[str, PairwiseGaps]
    utility: UtilityReport
    cf_matrices: Dict[str, CfDiffMatrix] = field(default_factory=dict)


@dataclass
class MetricsReport:
    group_count: int
    sample_count: int
    utility_spec: UtilitySpec
    models: List[ModelMetrics] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "group_count": self.group_count,
            "sample_count": self.sample_count,
            "utility": {"false_positive_cost": self.utility_spec.false_positive_cost,
                        "false_negative_cost": self.utility_spec.false_negative_cost,
                        "threshold": self.utility_spec.threshold},
            "models": [_model_to_dict(model) for model in self.models],
        }


def _pair_key(pair: Tuple[int, int]) -> str:
    return f"{pair[0]}-{pair[1]}"


def _gaps_to_dict(gaps: PairwiseGaps) -> Dict[str, Optional[float]]:
    return {_pair_key(pair): value for pair, value in gaps.values.items()}


def _model_to_dict(model: ModelMetrics) -> Dict:
    return {
        "label": model.label,
        "clp_weight": model.clp_weight,
        "overall": model.overall,
        "per_group": {str(g): metrics for g, metrics in model.per_group.items()},
        "clp": model.clp,
        "thresholds": model.thresholds,
        "equalized_odds": {name: {"fpr": _gaps_to_dict(gaps.false_positive_rate),
                                  "fnr": _gaps_to_dict(gaps.false_negative_rate)}
                           for name, gaps in model.equalized_odds.items()},
        "demographic_parity": {name: _gaps_to_dict(gaps) for name, gaps in model.demographic_parity.items()},
        "utility": {
            "values": {f"y={s}": {str(g): v for g, v in values.items()} for s, values in model.utility.values.items()},
            "gaps": {f"y={s}": _gaps_to_dict(gaps) for s, gaps in model.utility.gaps.items()},
        },
        "cf_matrices": {name: matrix.to_dict() for name, matrix in model.cf_matrices.items()},
    }


def _safe(metric, *args) -> Optional[float]:
    try:
        return metric(*args)
    except UndefinedMetricError:
        return None


def _performance(probabilities: np.ndarray, labels: np.ndarray) -> Dict[str, Optional[float]]:
    return {
        "auc_roc": _safe(auc_roc, probabilities, labels),
        "auc_prc": _safe(auc_prc, probabilities, labels),
        "brier": _safe(brier, probabilities, labels),
        "count": int(labels.size),
    }


def evaluate_model(label: str, clp_weight: Optional[float], handle: PredictorHandle, bundles: BundleBatch,
                   utility: UtilitySpec = UtilitySpec()) -> ModelMetrics:
    k = bundles.group_count
    probs = counterfactual_probabilities(handle, bundles)
    factual = probs[np.arange(len(bundles)), bundles.groups]
    labels, groups = bundles.outcomes, bundles.groups

    thresholds = {"fixed": utility.threshold, "prevalence": prevalence_threshold(factual, labels)}
    return ModelMetrics(
        label=label,
        clp_weight=clp_weight,
        overall=_performance(factual, labels),
        per_group={g: _performance(factual[groups == g], labels[groups == g]) for g in range(k)},
        clp=clp_aggregate(handle, bundles),
        thresholds=thresholds,
        equalized_odds={name: equalized_odds_gaps(factual, labels, groups, t, k) for name, t in thresholds.items()},
        demographic_parity={name: demographic_parity_gaps(factual, groups, t, k) for name, t in thresholds.items()},
        utility=expected_utility(factual, labels, groups, utility, k),
        cf_matrices={
            "y=0": cf_diff_matrix(bundles, probs, 0),
            "y=1": cf_diff_matrix(bundles, probs, 1),
            "all": cf_diff_matrix(bundles, probs, None),
        },
    )


def build_metrics_report(models: Sequence[Tuple[str, Optional[float], PredictorHandle]], bundles: BundleBatch,
                         utility: UtilitySpec = UtilitySpec()) -> MetricsReport:
    """models: (label, clp_weight, handle) in report order; the baseline uses label "N/A" and weight None"""
    utility.validate()
    report = MetricsReport(group_count=bundles.group_count, sample_count=len(bundles), utility_spec=utility)
    for label, clp_weight, handle in models:
        report.models.append(evaluate_model(label, clp_weight, handle, bundles, utility))
    return report


def report_tables(report: Union[MetricsReport, Dict]) -> Dict[str, pd.DataFrame]:
    """Performance table (one row per model), per-group table, and long-form fairness gaps"""
    data = report.to_dict() if isinstance(report, MetricsReport) else report
    performance, per_group, gaps = [], [], []
    for model in data["models"]:
        label = model["label"]
        overall = model["overall"]
        performance.append({"lambda_clp": label, "auc_prc": overall["auc_prc"], "auc_roc": overall["auc_roc"],
                            "brier": overall["brier"], "clp": model["clp"]})
        utility = model["utility"]["values"]
        for group, metrics in model["per_group"].items():
            per_group.append({"lambda_clp": label, "group": int(group), "count": metrics["count"],
                              "auc_prc": metrics["auc_prc"], "auc_roc": metrics["auc_roc"],
                              "brier": metrics["brier"], "utility_y0": utility["y=0"].get(group),
                              "utility_y1": utility["y=1"].get(group)})
        for name, threshold in model["thresholds"].items():
            blocks = {
                "fpr": model["equalized_odds"][name]["fpr"],
                "fnr": model["equalized_odds"][name]["fnr"],
                "positive_rate": model["demographic_parity"][name],
            }
            if name == "fixed":
                blocks["benefit_y0"] = model["utility"]["gaps"]["y=0"]
                blocks["benefit_y1"] = model["utility"]["gaps"]["y=1"]
            for metric, values in blocks.items():
                for pair, gap in values.items():
                    first, second = pair.split("-")
                    gaps.append({"lambda_clp": label, "threshold_rule": name, "threshold": threshold,
                                 "metric": metric, "group_a": int(first), "group_b": int(second), "gap": gap})
    return {
        "performance": pd.DataFrame(performance, columns=["lambda_clp", "auc_prc", "auc_roc", "brier", "clp"]),
        "group_performance": pd.DataFrame(per_group, columns=["lambda_clp", "group", "count", "auc_prc", "auc_roc",
                                                              "brier", "utility_y0", "utility_y1"]),
        "fairness_gaps": pd.DataFrame(gaps, columns=["lambda_clp", "threshold_rule", "threshold", "metric",
                                                     "group_a", "group_b", "gap"]),
    }


def write_metrics_report(report: Union[MetricsReport, Dict], out_dir: Union[str, Path]) -> List[Path]:
    """Write performance.csv, group_performance.csv, fairness_gaps.csv and cf_matrices.json"""
    data = report.to_dict() if isinstance(report, MetricsReport) else report
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, frame in report_tables(data).items():
        path = out_dir / f"{name}.csv"
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="")
        written.append(path)

    matrices = {model["label"]: model["cf_matrices"] for model in data["models"]}
    path = out_dir / "cf_matrices.json"
    path.write_text(json.dumps(matrices, indent=2, sort_keys=True) + "\n")
    written.append(path)
    return written
