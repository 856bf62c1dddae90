"""
Data Model - Labeled samples, synthetic structural equation model with ground-truth counterfactuals,
deterministic splitting and JSONL/JSON serialization
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from error_handler import ConfigurationError, DatasetFormatError

PathLike = Union[str, Path]


@dataclass(frozen=True)
class LabeledSample:
    id: int
    x: Tuple[int, ...]
    y: int
    a: int

    def validate(self, feature_dim: int, group_count: int) -> None:
        """Raise DatasetFormatError unless the sample fits an (m, K) dataset"""
        if self.y not in (0, 1):
            raise DatasetFormatError(f"outcome y must be 0 or 1 (got {self.y})", sample_id=self.id)
        if not 0 <= self.a < group_count:
            raise DatasetFormatError(f"group a={self.a} outside [0, {group_count})", sample_id=self.id)
        previous = -1
        for index in self.x:
            if index <= previous:
                raise DatasetFormatError("feature indices must be strictly increasing", sample_id=self.id)
            if index >= feature_dim:
                raise DatasetFormatError(f"feature index {index} outside [0, {feature_dim})", sample_id=self.id)
            previous = index

    def to_record(self) -> Dict:
        return {"id": self.id, "a": self.a, "y": self.y, "x": list(self.x)}


@dataclass
class Dataset:
    samples: List[LabeledSample]
    feature_dim: int
    group_count: int

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[LabeledSample]:
        return iter(self.samples)

    def validate(self) -> None:
        seen = set()
        for sample in self.samples:
            sample.validate(self.feature_dim, self.group_count)
            if sample.id in seen:
                raise DatasetFormatError("duplicate sample id", sample_id=sample.id)
            seen.add(sample.id)

    def select(self, ids: Sequence[int]) -> List[LabeledSample]:
        by_id = {sample.id: sample for sample in self.samples}
        return [by_id[i] for i in ids]


@dataclass
class SampleBatch:
    """Dense view of a list of samples"""
    features: np.ndarray
    outcomes: np.ndarray
    groups: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return int(self.outcomes.shape[0])

    def take(self, index: np.ndarray) -> "SampleBatch":
        return SampleBatch(self.features[index], self.outcomes[index], self.groups[index], self.ids[index])


def to_batch(samples: Sequence[LabeledSample], feature_dim: int) -> SampleBatch:
    features = np.zeros((len(samples), feature_dim))
    for row, sample in enumerate(samples):
        features[row, list(sample.x)] = 1.0
    return SampleBatch(
        features=features,
        outcomes=np.array([s.y for s in samples], dtype=np.int64),
        groups=np.array([s.a for s in samples], dtype=np.int64),
        ids=np.array([s.id for s in samples], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Structural equation model
# ---------------------------------------------------------------------------

@dataclass
class SemConfig:
    """u ~ N(0, I_d); a ~ Categorical(pi); x_j, y ~ Bernoulli(sigmoid(affine(u, onehot(a))))"""
    latent_dim: int
    feature_dim: int
    group_count: int
    group_marginals: np.ndarray
    latent_to_features: np.ndarray
    group_to_features: np.ndarray
    feature_bias: np.ndarray
    latent_to_outcome: np.ndarray
    group_to_outcome: np.ndarray
    outcome_bias: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("group_marginals", "latent_to_features", "group_to_features", "feature_bias",
                     "latent_to_outcome", "group_to_outcome"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    def validate(self) -> None:
        d, m, k = self.latent_dim, self.feature_dim, self.group_count
        if d < 1 or m < 1 or k < 1:
            raise ConfigurationError(f"SEM dims must be positive (d={d}, m={m}, K={k})")
        pi = self.group_marginals
        if pi.shape != (k,):
            raise ConfigurationError(f"group_marginals must have length K={k} (got shape {pi.shape})")
        if np.any(pi < 0):
            raise ConfigurationError("group_marginals entries must be nonnegative")
        if abs(pi.sum() - 1.0) > 1e-9:
            raise ConfigurationError(f"group_marginals must sum to 1 (got {pi.sum():.12g})")
        expected = {
            "latent_to_features": (d, m),
            "group_to_features": (k, m),
            "feature_bias": (m,),
            "latent_to_outcome": (d,),
            "group_to_outcome": (k,),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise ConfigurationError(f"{name} must have shape {shape} for (d, m, K)=({d}, {m}, {k}), got {actual}")

    def feature_logits(self, latent: np.ndarray, groups: np.ndarray) -> np.ndarray:
        return latent @ self.latent_to_features + self.group_to_features[groups] + self.feature_bias

    def outcome_logits(self, latent: np.ndarray, groups: np.ndarray) -> np.ndarray:
        return latent @ self.latent_to_outcome + self.group_to_outcome[groups] + self.outcome_bias

    def to_dict(self) -> Dict:
        return {
            "latent_dim": self.latent_dim,
            "feature_dim": self.feature_dim,
            "group_count": self.group_count,
            "group_marginals": self.group_marginals.tolist(),
            "latent_to_features": self.latent_to_features.tolist(),
            "group_to_features": self.group_to_features.tolist(),
            "feature_bias": self.feature_bias.tolist(),
            "latent_to_outcome": self.latent_to_outcome.tolist(),
            "group_to_outcome": self.group_to_outcome.tolist(),
            "outcome_bias": self.outcome_bias,
            "seed": self.seed,
        }


def build_sem_config(latent_dim: int = 8, feature_dim: int = 200, group_count: int = 2,
                     group_marginals: Optional[Sequence[float]] = None,
                     feature_bias: float = -2.0, latent_feature_scale: float = 1.5,
                     group_feature_scale: float = 0.5, latent_outcome_scale: float = 1.5,
                     group_outcome_effects: Optional[Sequence[float]] = None,
                     outcome_bias: float = 0.0, seed: int = 0) -> SemConfig:
    """Draw SEM coefficient blocks from a compact description"""
    rng = np.random.default_rng(seed)
    marginals = (np.full(group_count, 1.0 / group_count) if group_marginals is None
                 else np.asarray(group_marginals, dtype=np.float64))
    effects = (np.zeros(group_count) if group_outcome_effects is None
               else np.asarray(group_outcome_effects, dtype=np.float64))
    config = SemConfig(
        latent_dim=latent_dim,
        feature_dim=feature_dim,
        group_count=group_count,
        group_marginals=marginals,
        latent_to_features=rng.normal(0.0, latent_feature_scale, (latent_dim, feature_dim)) / math.sqrt(latent_dim),
        group_to_features=rng.normal(0.0, group_feature_scale, (group_count, feature_dim)),
        feature_bias=np.full(feature_dim, feature_bias),
        latent_to_outcome=rng.normal(0.0, latent_outcome_scale, latent_dim) / math.sqrt(latent_dim),
        group_to_outcome=effects,
        outcome_bias=outcome_bias,
        seed=seed,
    )
    config.validate()
    return config


@dataclass
class GroundTruth:
    """Latent codes and every counterfactual world of a generated dataset (column a' per group)"""
    ids: np.ndarray
    groups: np.ndarray
    latent: np.ndarray
    outcome_probs: np.ndarray
    counterfactual_outcomes: np.ndarray
    counterfactual_features: List[List[Tuple[int, ...]]] = field(repr=False)

    def y_cf(self, row: int, group: int) -> int:
        return int(self.counterfactual_outcomes[row, group])

    def x_cf(self, row: int, group: int) -> Tuple[int, ...]:
        return self.counterfactual_features[row][group]


def _sparse_rows(active: np.ndarray) -> List[Tuple[int, ...]]:
    return [tuple(int(j) for j in np.flatnonzero(row)) for row in active]


def generate_sem_dataset(config: SemConfig, n: int) -> Tuple[List[LabeledSample], GroundTruth]:
    """Sample n observations; counterfactuals reuse u and every uniform noise draw"""
    config.validate()
    if n < 1:
        raise ConfigurationError(f"n must be >= 1 (got {n})")

    rng = np.random.default_rng(config.seed)
    latent = rng.standard_normal((n, config.latent_dim))
    groups = rng.choice(config.group_count, size=n, p=config.group_marginals)
    feature_noise = rng.random((n, config.feature_dim))
    outcome_noise = rng.random(n)

    outcome_probs = np.empty((n, config.group_count))
    cf_outcomes = np.empty((n, config.group_count), dtype=np.int64)
    cf_features: List[List[Tuple[int, ...]]] = [[] for _ in range(n)]
    for group in range(config.group_count):
        fixed = np.full(n, group)
        active = feature_noise < expit(config.feature_logits(latent, fixed))
        outcome_probs[:, group] = expit(config.outcome_logits(latent, fixed))
        cf_outcomes[:, group] = outcome_noise < outcome_probs[:, group]
        for row, indices in enumerate(_sparse_rows(active)):
            cf_features[row].append(indices)

    samples = [
        LabeledSample(id=i, x=cf_features[i][groups[i]], y=int(cf_outcomes[i, groups[i]]), a=int(groups[i]))
        for i in range(n)
    ]
    truth = GroundTruth(
        ids=np.arange(n),
        groups=groups,
        latent=latent,
        outcome_probs=outcome_probs,
        counterfactual_outcomes=cf_outcomes,
        counterfactual_features=cf_features,
    )
    return samples, truth


def ground_truth_outcome_shift(truth: GroundTruth, group_count: int,
                               outcome: Optional[int] = None) -> np.ndarray:
    """K x K mean of P(y | u, a') - P(y | u, a) over samples with factual group a"""
    shift = np.zeros((group_count, group_count))
    for source in range(group_count):
        for target in range(group_count):
            if source == target:
                continue
            rows = truth.groups == source
            if outcome is not None:
                rows &= (truth.counterfactual_outcomes[:, source] == outcome)
                rows &= (truth.counterfactual_outcomes[:, target] == outcome)
            if rows.any():
                shift[source, target] = float(np.mean(truth.outcome_probs[rows, target]
                                                      - truth.outcome_probs[rows, source]))
    return shift


def estimate_group_marginals(samples: Sequence[LabeledSample], group_count: int) -> np.ndarray:
    counts = np.bincount([s.a for s in samples], minlength=group_count).astype(np.float64)
    return counts / max(len(samples), 1)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    train: Tuple[int, ...]
    validation: Tuple[int, ...]
    test: Tuple[int, ...]

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)

    def to_dict(self) -> Dict:
        return {"train": list(self.train), "validation": list(self.validation), "test": list(self.test)}


def _check_fractions(fractions: Sequence[float]) -> Tuple[float, float, float]:
    if len(fractions) != 3:
        raise ConfigurationError(f"split fractions need 3 entries (got {len(fractions)})")
    if any(f < 0 for f in fractions):
        raise ConfigurationError(f"split fractions must be nonnegative (got {list(fractions)})")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must sum to 1 (got {sum(fractions):.12g})")
    return float(fractions[0]), float(fractions[1]), float(fractions[2])


def split_dataset(samples: Sequence[LabeledSample], fractions: Sequence[float], seed: int) -> DatasetSplit:
    """Seeded permutation; validation and test get floor(n*f), train takes the remainder"""
    _, f_val, f_test = _check_fractions(fractions)
    ids = np.array(sorted(s.id for s in samples), dtype=np.int64)
    n = len(ids)
    n_val = int(math.floor(n * f_val + 1e-9))
    n_test = int(math.floor(n * f_test + 1e-9))
    order = np.random.default_rng(seed).permutation(ids)
    return DatasetSplit(
        train=tuple(sorted(int(i) for i in order[n_val + n_test:])),
        validation=tuple(sorted(int(i) for i in order[:n_val])),
        test=tuple(sorted(int(i) for i in order[n_val:n_val + n_test])),
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _dumps(record: Dict) -> str:
    return json.dumps(record, separators=(", ", ": "))


def write_dataset(dataset: Dataset, path: PathLike) -> None:
    with open(path, "w") as f:
        f.write(_dumps({"meta": {"m": dataset.feature_dim, "K": dataset.group_count}}) + "\n")
        for sample in dataset.samples:
            f.write(_dumps(sample.to_record()) + "\n")


def read_dataset(path: PathLike) -> Dataset:
    """Parse a dataset JSONL file; errors carry the line number"""
    samples: List[LabeledSample] = []
    feature_dim = group_count = None
    seen = set()
    with open(path, "r") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"malformed JSON: {e.msg}", line_number=line_number) from e
            if not isinstance(record, dict):
                raise DatasetFormatError("record must be a JSON object", line_number=line_number)

            if feature_dim is None:
                meta = record.get("meta")
                if not isinstance(meta, dict) or "m" not in meta or "K" not in meta:
                    raise DatasetFormatError("first record must be the {\"meta\": {\"m\", \"K\"}} header",
                                             line_number=line_number)
                feature_dim, group_count = int(meta["m"]), int(meta["K"])
                continue

            try:
                sample = LabeledSample(id=int(record["id"]), x=tuple(int(j) for j in record["x"]),
                                       y=int(record["y"]), a=int(record["a"]))
            except (KeyError, TypeError, ValueError) as e:
                raise DatasetFormatError(f"bad record fields: {e}", line_number=line_number) from e
            try:
                sample.validate(feature_dim, group_count)
            except DatasetFormatError as e:
                raise DatasetFormatError(e.detail, line_number=line_number, sample_id=sample.id) from e
            if sample.id in seen:
                raise DatasetFormatError("duplicate sample id", line_number=line_number, sample_id=sample.id)
            seen.add(sample.id)
            samples.append(sample)

    return Dataset(samples=samples, feature_dim=feature_dim or 0, group_count=group_count or 0)


def write_ground_truth(truth: GroundTruth, path: PathLike) -> None:
    with open(path, "w") as f:
        f.write(_dumps({"meta": {"d": int(truth.latent.shape[1]), "K": int(truth.outcome_probs.shape[1])}}) + "\n")
        for row, sample_id in enumerate(truth.ids):
            f.write(_dumps({
                "id": int(sample_id),
                "a": int(truth.groups[row]),
                "u": truth.latent[row].tolist(),
                "y_cf": truth.counterfactual_outcomes[row].tolist(),
                "p_y_cf": truth.outcome_probs[row].tolist(),
                "x_cf": [list(x) for x in truth.counterfactual_features[row]],
            }) + "\n")


def read_ground_truth(path: PathLike) -> GroundTruth:
    """Parse ground_truth.jsonl; errors name the file and the line"""
    ids, groups, latent, probs, outcomes, features = [], [], [], [], [], []
    with open(path, "r") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"{path}: malformed JSON: {e.msg}", line_number=line_number) from e
            if not isinstance(record, dict):
                raise DatasetFormatError(f"{path}: record must be a JSON object", line_number=line_number)
            if "meta" in record:
                continue
            try:
                ids.append(int(record["id"]))
                groups.append(int(record["a"]))
                latent.append([float(v) for v in record["u"]])
                probs.append([float(v) for v in record["p_y_cf"]])
                outcomes.append([int(v) for v in record["y_cf"]])
                features.append([tuple(int(j) for j in x) for x in record["x_cf"]])
            except KeyError as e:
                raise DatasetFormatError(f"{path}: missing ground-truth field {e}", line_number=line_number) from e
            except (TypeError, ValueError) as e:
                raise DatasetFormatError(f"{path}: bad ground-truth field: {e}", line_number=line_number) from e
    try:
        return GroundTruth(
            ids=np.array(ids, dtype=np.int64),
            groups=np.array(groups, dtype=np.int64),
            latent=np.array(latent, dtype=np.float64),
            outcome_probs=np.array(probs, dtype=np.float64),
            counterfactual_outcomes=np.array(outcomes, dtype=np.int64),
            counterfactual_features=features,
        )
    except ValueError as e:
        raise DatasetFormatError(f"{path}: ground-truth rows disagree in length: {e}") from e


def write_split(split: DatasetSplit, path: PathLike, seed: int, fractions: Sequence[float]) -> None:
    with open(path, "w") as f:
        json.dump({"seed": seed, "fractions": list(fractions), **split.to_dict()}, f)


def read_split(path: PathLike) -> DatasetSplit:
    with open(path, "r") as f:
        data = json.load(f)
    return DatasetSplit(train=tuple(data["train"]), validation=tuple(data["validation"]), test=tuple(data["test"]))
