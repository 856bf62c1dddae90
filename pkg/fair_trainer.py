"""
Fair Trainer - Baseline and counterfactual-logit-pairing predictor training
Grid search over CLP / counterfactual-loss weights on frozen CEVAE counterfactuals, with validation-CLP model selection
"""

import itertools
import math
import os
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import softmax

from cevae import BundleBatch, CevaeSpec, CounterfactualBundle, sample_bundle_batch
from data_model import LabeledSample, SampleBatch, to_batch
from diffnet import (NetworkParams, NetworkSpec, SeedLike, Tensor, adam_step, collect_gradients,
                     decode_checkpoint, encode_checkpoint, init_optimizer, init_params, make_rng,
                     network_graph, softmax_cross_entropy, stop_gradient, tensor_mean, tensor_sum)
from error_handler import ConfigurationError, DivergenceError, ShapeError, TrainingError, get_error_handler

INPUT_MODES = ("latent", "features")
LEDGER_COLUMNS = ["index", "lambda_clp", "lambda_cf", "cf_gradients", "learning_rate", "val_clp", "val_ce",
                  "val_loss", "best_epoch", "status", "checkpoint_path"]

# stream tags under the trainer seed
_POOL_STREAM, _EVAL_STREAM, _INIT_STREAM, _SHUFFLE_STREAM = 10, 11, 12, 13


@dataclass
class FairTrainConfig:
    clp_weights: Sequence[float] = (0.0, 0.01, 0.1, 1.0, 10.0)
    cf_weights: Sequence[float] = (0.0, 0.1, 1.0, 10.0)
    cf_gradients: Sequence[bool] = (False, True)
    learning_rates: Sequence[float] = (1e-4, 1e-3, 1e-2)
    epochs: int = 50
    patience: int = 10
    batch_size: int = 512
    input_mode: str = "latent"
    resample_each_epoch: bool = True
    max_workers: Optional[int] = None

    def validate(self) -> None:
        for name in ("clp_weights", "cf_weights", "cf_gradients", "learning_rates"):
            if len(getattr(self, name)) == 0:
                raise ConfigurationError(f"FairTrainConfig.{name} must be nonempty")
        for name in ("clp_weights", "cf_weights", "learning_rates"):
            if any(value < 0 for value in getattr(self, name)):
                raise ConfigurationError(f"FairTrainConfig.{name} entries must be nonnegative")
        if self.input_mode not in INPUT_MODES:
            raise ConfigurationError(f"FairTrainConfig.input_mode must be one of {INPUT_MODES} (got '{self.input_mode}')")
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ConfigurationError("FairTrainConfig needs epochs >= 0, batch_size >= 1 and patience >= 1")

    def grid(self) -> List["GridPoint"]:
        points = itertools.product(self.clp_weights, self.cf_weights, self.cf_gradients, self.learning_rates)
        return [GridPoint(index, float(clp), float(cf), bool(grads), float(lr))
                for index, (clp, cf, grads, lr) in enumerate(points)]


@dataclass(frozen=True)
class GridPoint:
    index: int
    clp_weight: float
    cf_weight: float
    cf_gradients: bool
    learning_rate: float


@dataclass
class PredictorHandle:
    """Two-logit predictor h over (u, onehot(a)) in latent mode or (x, onehot(a)) in features mode"""
    spec: NetworkSpec
    params: NetworkParams
    input_mode: str
    group_count: int

    def validate(self) -> None:
        if self.input_mode not in INPUT_MODES:
            raise ConfigurationError(f"Unknown predictor input mode '{self.input_mode}'")
        if self.spec.output_dim != 2:
            raise ConfigurationError(f"Predictors emit two logits (spec has output_dim={self.spec.output_dim})")
        self.params.check_shapes(self.spec)


def predictor_spec(input_dim: int, group_count: int, template: NetworkSpec) -> NetworkSpec:
    return NetworkSpec(input_dim=input_dim + group_count, hidden_dim=template.hidden_dim,
                       num_hidden_layers=template.num_hidden_layers, output_dim=2,
                       dropout_prob=template.dropout_prob, layer_norm=template.layer_norm)


def fair_predictor_spec(cevae_spec: CevaeSpec, input_mode: str = "latent") -> NetworkSpec:
    """Same hidden layout as the outcome decoder p(y | u, a)"""
    width = cevae_spec.latent_dim if input_mode == "latent" else cevae_spec.feature_dim
    return predictor_spec(width, cevae_spec.group_count, cevae_spec.decoder_y)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def predictor_inputs(handle: PredictorHandle, values, groups) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    values = values[None, :] if values.ndim == 1 else values
    groups = np.broadcast_to(np.asarray(groups, dtype=np.int64), (values.shape[0],))
    return np.hstack([values, np.eye(handle.group_count)[groups]])


def bundle_inputs(handle: PredictorHandle, bundles: BundleBatch, group: int, use_latent_mean: bool) -> np.ndarray:
    """Inputs for setting a := group on every row of a bundle batch"""
    if handle.input_mode == "latent":
        values = bundles.latent_mean if use_latent_mean else bundles.latent
    else:
        values = bundles.cf_features[:, group]
    return predictor_inputs(handle, values, np.full(len(bundles), group))


def predict_logits(handle: PredictorHandle, values, groups) -> np.ndarray:
    inputs = Tensor(predictor_inputs(handle, values, groups))
    leaves = {name: Tensor(arr) for name, arr in handle.params.arrays.items()}
    logits, _ = network_graph(handle.spec, leaves, inputs, mode="eval")
    return logits.data


def predict_proba(handle: PredictorHandle, values, groups) -> np.ndarray:
    return softmax(predict_logits(handle, values, groups), axis=1)[:, 1]


def counterfactual_probabilities(handle: PredictorHandle, bundles: BundleBatch) -> np.ndarray:
    """(n, K) matrix of P(y=1) under every a'; column a holds the factual prediction"""
    columns = []
    for group in range(bundles.group_count):
        inputs = bundle_inputs(handle, bundles, group, use_latent_mean=True)
        leaves = {name: Tensor(arr) for name, arr in handle.params.arrays.items()}
        logits, _ = network_graph(handle.spec, leaves, Tensor(inputs), mode="eval")
        columns.append(softmax(logits.data, axis=1)[:, 1])
    return np.stack(columns, axis=1)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def clp_term(logits_f, logits_cf, y_f: int, y_cf: int) -> float:
    """Mean squared difference of the two pre-softmax logits; 0 when the outcomes disagree"""
    if int(y_f) != int(y_cf):
        return 0.0
    diff = np.asarray(logits_f, dtype=np.float64) - np.asarray(logits_cf, dtype=np.float64)
    return float(np.mean(diff ** 2))


def _fair_loss_graph(handle: PredictorHandle, leaves: Dict[str, Tensor], bundles: BundleBatch,
                     clp_weight: float, cf_weight: float, cf_gradients: bool, mode: str,
                     rng: Optional[np.random.Generator], use_latent_mean: bool) -> Tuple[Tensor, Dict[str, Tensor]]:
    n, k = len(bundles), bundles.group_count
    logits = []
    for group in range(k):
        out, _ = network_graph(handle.spec, leaves, Tensor(bundle_inputs(handle, bundles, group, use_latent_mean)),
                               mode=mode, rng=rng)
        logits.append(out)

    factual_mask = np.eye(k)[bundles.groups]
    factual_logits = logits[0] * factual_mask[:, :1]
    for group in range(1, k):
        factual_logits = factual_logits + logits[group] * factual_mask[:, group:group + 1]
    factual_ce = softmax_cross_entropy(factual_logits, bundles.outcomes)

    cf_ce = Tensor(np.zeros(n))
    clp = Tensor(np.zeros(n))
    for group in range(k):
        is_cf = 1.0 - factual_mask[:, group]
        cf_ce = cf_ce + softmax_cross_entropy(logits[group], bundles.cf_outcomes[:, group]) * is_cf
        gate = is_cf * (bundles.cf_outcomes[:, group] == bundles.outcomes)
        paired = logits[group] if cf_gradients else stop_gradient(logits[group])
        diff = factual_logits - paired
        clp = clp + tensor_sum(diff * diff, axis=1) * (0.5 * gate)

    total = tensor_mean(factual_ce + cf_ce * cf_weight + clp * clp_weight)
    return total, {"factual_ce": tensor_mean(factual_ce), "cf_ce": tensor_mean(cf_ce), "clp": tensor_mean(clp)}


def _as_bundle_batch(bundle: Union[CounterfactualBundle, BundleBatch], handle: PredictorHandle,
                     feature_dim: Optional[int] = None) -> BundleBatch:
    if isinstance(bundle, BundleBatch):
        return bundle
    if handle.input_mode == "features":
        width = handle.spec.input_dim - handle.group_count
        if feature_dim is not None and feature_dim != width:
            raise ShapeError(f"feature_dim={feature_dim} does not match the predictor's {width} feature inputs")
        feature_dim = width
    elif feature_dim is None:
        raise ConfigurationError("A single bundle for a latent-mode predictor needs feature_dim")
    return BundleBatch.from_bundles([bundle], feature_dim, handle.group_count)


def fair_loss(handle: PredictorHandle, bundle: Union[CounterfactualBundle, BundleBatch], cf_weight: float,
              clp_weight: float, cf_gradients: bool, use_latent_mean: bool = False,
              feature_dim: Optional[int] = None) -> Tuple[float, Dict[str, float]]:
    """factual CE + cf_weight * counterfactual CE + clp_weight * CLP, averaged over factual samples"""
    bundles = _as_bundle_batch(bundle, handle, feature_dim)
    leaves = {name: Tensor(arr) for name, arr in handle.params.arrays.items()}
    total, parts = _fair_loss_graph(handle, leaves, bundles, clp_weight, cf_weight, cf_gradients,
                                    "eval", None, use_latent_mean)
    return total.item(), {name: t.item() for name, t in parts.items()}


def fair_loss_and_gradients(handle: PredictorHandle, bundle: Union[CounterfactualBundle, BundleBatch],
                            cf_weight: float, clp_weight: float, cf_gradients: bool, mode: str = "eval",
                            seed: SeedLike = None, use_latent_mean: bool = False, feature_dim: Optional[int] = None
                            ) -> Tuple[float, Dict[str, float], Dict[str, np.ndarray]]:
    bundles = _as_bundle_batch(bundle, handle, feature_dim)
    leaves = handle.params.leaves()
    total, parts = _fair_loss_graph(handle, leaves, bundles, clp_weight, cf_weight, cf_gradients,
                                    mode, make_rng(seed) if mode == "train" else None, use_latent_mean)
    total.backward()
    return total.item(), {name: t.item() for name, t in parts.items()}, collect_gradients(leaves)


def validation_clp(handle: PredictorHandle, bundles: BundleBatch) -> float:
    """Unweighted CLP: mean over factual samples of the summed per-counterfactual terms"""
    _, parts = fair_loss(handle, bundles, 0.0, 0.0, cf_gradients=False, use_latent_mean=True)
    return parts["clp"]


# ---------------------------------------------------------------------------
# Shared fitting loop
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    params: NetworkParams
    val_loss: float
    best_epoch: int
    epochs_run: int


def _fit(params: NetworkParams, learning_rate: float, epochs: int, patience: Optional[int], n_train: int,
         batch_size: int, rng: np.random.Generator,
         step_fn: Callable[[NetworkParams, np.ndarray, int], Tuple[float, Dict[str, np.ndarray]]],
         val_fn: Callable[[NetworkParams], float], component: str) -> FitResult:
    """Minibatch Adam with best-on-validation parameter tracking and patience-based early stop"""
    error_handler = get_error_handler()
    result = FitResult(params=params.copy(), val_loss=val_fn(params), best_epoch=0, epochs_run=0)
    optimizer = init_optimizer(params, learning_rate)
    stale_epochs = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n_train)
        running = 0.0
        for start in range(0, n_train, batch_size):
            rows = order[start:start + batch_size]
            loss, grads = step_fn(params, rows, epoch)
            if not math.isfinite(loss):
                raise DivergenceError(f"{component} loss became non-finite at epoch {epoch} (lr={learning_rate})")
            adam_step(optimizer, params, grads)
            running += loss * len(rows)

        val_loss = val_fn(params)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"{component} validation loss became non-finite at epoch {epoch}")
        result.epochs_run = epoch
        error_handler.log_epoch(component, epoch, running / n_train, val_loss)
        if val_loss < result.val_loss:
            result.val_loss, result.best_epoch, result.params = val_loss, epoch, params.copy()
            stale_epochs = 0
        else:
            stale_epochs += 1
            if patience is not None and stale_epochs >= patience:
                break
    return result


def resolve_workers(requested: Optional[int] = None) -> int:
    """Thread count for grid searches, capped by CFODDS_THREADS"""
    workers = requested or os.cpu_count() or 1
    cap = os.getenv("CFODDS_THREADS")
    if cap:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError:
            raise ConfigurationError(f"CFODDS_THREADS must be an integer (got '{cap}')")
    return max(1, workers)


# ---------------------------------------------------------------------------
# Baseline
# ---------------------------------------------------------------------------

@dataclass
class BaselineSearchSpace:
    hidden_dims: Sequence[int] = (128,)
    num_hidden_layers: Sequence[int] = (2, 3)
    dropout_probs: Sequence[float] = (0.5, 0.75)
    layer_norm: Sequence[bool] = (True,)
    learning_rates: Sequence[float] = (1e-5, 1e-4)

    def configurations(self) -> List[Tuple]:
        return list(itertools.product(self.hidden_dims, self.num_hidden_layers, self.dropout_probs,
                                      self.layer_norm, self.learning_rates))


@dataclass
class BaselineTrial:
    index: int
    spec: NetworkSpec
    learning_rate: float
    val_ce: float
    failed: bool = False
    failure: str = ""


@dataclass
class BaselineResult:
    handle: PredictorHandle
    val_ce: float
    learning_rate: float
    trials: List[BaselineTrial] = field(default_factory=list)


def _mean_ce(spec: NetworkSpec, params: NetworkParams, inputs: np.ndarray, labels: np.ndarray) -> float:
    leaves = {name: Tensor(arr) for name, arr in params.arrays.items()}
    logits, _ = network_graph(spec, leaves, Tensor(inputs), mode="eval")
    return float(np.mean(softmax_cross_entropy(logits.data, labels)))


def train_baseline(space: BaselineSearchSpace, train_samples: Sequence[LabeledSample],
                   val_samples: Sequence[LabeledSample], feature_dim: int, group_count: int, seed: int,
                   iterations: int = 20, epochs: int = 50, batch_size: int = 512,
                   patience: Optional[int] = 10) -> BaselineResult:
    """Random search over h(x, a) architectures and learning rates; lowest validation cross-entropy wins"""
    if not train_samples or not val_samples:
        raise ConfigurationError("train_baseline needs nonempty train and validation sets")
    error_handler = get_error_handler()
    configurations = space.configurations()
    if len(configurations) > iterations:
        picked = np.random.default_rng([seed, _SHUFFLE_STREAM]).choice(len(configurations), size=iterations,
                                                                       replace=False)
        configurations = [configurations[i] for i in sorted(picked.tolist())]

    train_batch = to_batch(train_samples, feature_dim)
    val_batch = to_batch(val_samples, feature_dim)
    best: Optional[BaselineResult] = None
    trials: List[BaselineTrial] = []
    for index, (hidden, layers, dropout, norm, lr) in enumerate(configurations):
        spec = predictor_spec(feature_dim, group_count, NetworkSpec(
            input_dim=1, hidden_dim=hidden, num_hidden_layers=layers, output_dim=2,
            dropout_prob=dropout, layer_norm=norm))
        handle = PredictorHandle(spec=spec, params=init_params(spec, np.random.default_rng([seed, _INIT_STREAM, index])),
                                 input_mode="features", group_count=group_count)
        train_inputs = predictor_inputs(handle, train_batch.features, train_batch.groups)
        val_inputs = predictor_inputs(handle, val_batch.features, val_batch.groups)
        rng = np.random.default_rng([seed, _SHUFFLE_STREAM, index])

        def step(params: NetworkParams, rows: np.ndarray, epoch: int, spec=spec, train_inputs=train_inputs):
            leaves = params.leaves()
            logits, _ = network_graph(spec, leaves, Tensor(train_inputs[rows]), mode="train", rng=rng)
            loss = tensor_mean(softmax_cross_entropy(logits, train_batch.outcomes[rows]))
            loss.backward()
            return loss.item(), collect_gradients(leaves)

        try:
            fit = _fit(handle.params, lr, epochs, patience, len(train_batch), batch_size, rng, step,
                       lambda params, spec=spec, val_inputs=val_inputs: _mean_ce(spec, params, val_inputs,
                                                                                 val_batch.outcomes),
                       component="Baseline")
        except DivergenceError as e:
            error_handler.log_warning(f"Baseline trial {index} diverged: {e}")
            trials.append(BaselineTrial(index, spec, lr, math.nan, failed=True, failure=str(e)))
            continue

        trials.append(BaselineTrial(index, spec, lr, fit.val_loss))
        error_handler.log_info(f"Baseline trial {index}: hidden={hidden} layers={layers} dropout={dropout} "
                               f"layer_norm={norm} lr={lr} -> val_ce={fit.val_loss:.6g}")
        if best is None or fit.val_loss < best.val_ce:
            handle.params = fit.params
            best = BaselineResult(handle=handle, val_ce=fit.val_loss, learning_rate=lr)

    if best is None:
        raise TrainingError("Every baseline candidate diverged")
    best.trials = trials
    return best


# ---------------------------------------------------------------------------
# Fair predictor grid
# ---------------------------------------------------------------------------

@dataclass
class FairCandidate:
    point: GridPoint
    handle: Optional[PredictorHandle]
    val_clp: float
    val_ce: float
    val_loss: float
    best_epoch: int = 0
    failed: bool = False
    failure: str = ""
    checkpoint_path: str = ""


class CounterfactualPool:
    """Per-epoch training bundles shared by every grid point, kept in a small LRU

    Each epoch's draw comes from its own seed stream, so an evicted epoch is rebuilt bit for bit
    """

    def __init__(self, cevae_spec: CevaeSpec, cevae_params: NetworkParams, batch: SampleBatch,
                 seed: int, resample_each_epoch: bool = True, capacity: int = 4):
        if capacity < 1:
            raise ConfigurationError(f"CounterfactualPool capacity must be >= 1 (got {capacity})")
        self.cevae_spec = cevae_spec
        self.cevae_params = cevae_params
        self.batch = batch
        self.seed = seed
        self.resample_each_epoch = resample_each_epoch
        self.capacity = capacity
        self.draws = 0
        self._cache: "OrderedDict[int, BundleBatch]" = OrderedDict()
        self._lock = threading.Lock()

    @property
    def cached_epochs(self) -> List[int]:
        with self._lock:
            return list(self._cache)

    def for_epoch(self, epoch: int) -> BundleBatch:
        key = epoch if self.resample_each_epoch else 1
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
            bundles = sample_bundle_batch(self.cevae_spec, self.cevae_params, self.batch,
                                          np.random.default_rng([self.seed, _POOL_STREAM, key]))
            self.draws += 1
            self._cache[key] = bundles
            while len(self._cache) > self.capacity:
                self._cache.popitem(last=False)
            return bundles


def evaluation_bundles(cevae_spec: CevaeSpec, cevae_params: NetworkParams,
                       samples: Union[Sequence[LabeledSample], SampleBatch], seed: int) -> BundleBatch:
    """Bundles drawn once under a fixed stream, reused by every evaluation"""
    return sample_bundle_batch(cevae_spec, cevae_params, samples, np.random.default_rng([seed, _EVAL_STREAM]))


def _train_candidate(point: GridPoint, config: FairTrainConfig, spec: NetworkSpec, group_count: int,
                     pool: CounterfactualPool, val_bundles: BundleBatch, seed: int) -> FairCandidate:
    handle = PredictorHandle(spec=spec, params=init_params(spec, np.random.default_rng([seed, _INIT_STREAM, point.index])),
                             input_mode=config.input_mode, group_count=group_count)
    rng = np.random.default_rng([seed, _SHUFFLE_STREAM, point.index])

    def step(params: NetworkParams, rows: np.ndarray, epoch: int):
        bundles = pool.for_epoch(epoch).take(rows)
        leaves = params.leaves()
        total, _ = _fair_loss_graph(handle, leaves, bundles, point.clp_weight, point.cf_weight,
                                    point.cf_gradients, "train", rng, use_latent_mean=False)
        total.backward()
        return total.item(), collect_gradients(leaves)

    def val_fn(params: NetworkParams) -> float:
        current = PredictorHandle(spec, params, config.input_mode, group_count)
        total, _ = fair_loss(current, val_bundles, point.cf_weight, point.clp_weight, point.cf_gradients,
                             use_latent_mean=True)
        return total

    try:
        fit = _fit(handle.params, point.learning_rate, config.epochs, config.patience, len(pool.batch),
                   config.batch_size, rng, step, val_fn, component=f"Fair[{point.index}]")
    except DivergenceError as e:
        return FairCandidate(point=point, handle=None, val_clp=math.nan, val_ce=math.nan, val_loss=math.nan,
                             failed=True, failure=str(e))

    handle.params = fit.params
    _, parts = fair_loss(handle, val_bundles, 0.0, 0.0, cf_gradients=False, use_latent_mean=True)
    return FairCandidate(point=point, handle=handle, val_clp=parts["clp"], val_ce=parts["factual_ce"],
                         val_loss=fit.val_loss, best_epoch=fit.best_epoch)


def train_fair_predictor(config: FairTrainConfig, cevae_spec: CevaeSpec, cevae_params: NetworkParams,
                         train_samples: Sequence[LabeledSample], val_samples: Sequence[LabeledSample],
                         seed: int) -> List[FairCandidate]:
    """Train one predictor per grid point; candidates come back in grid order whatever the completion order"""
    config.validate()
    if not train_samples or not val_samples:
        raise ConfigurationError("train_fair_predictor needs nonempty train and validation sets")
    error_handler = get_error_handler()

    spec = fair_predictor_spec(cevae_spec, config.input_mode)
    grid = config.grid()
    workers = min(resolve_workers(config.max_workers), len(grid))
    pool = CounterfactualPool(cevae_spec, cevae_params, to_batch(train_samples, cevae_spec.feature_dim), seed,
                              config.resample_each_epoch, capacity=workers + 1)
    val_bundles = evaluation_bundles(cevae_spec, cevae_params, val_samples, seed)
    error_handler.log_info(f"Training {len(grid)} fair candidates on {workers} thread(s)")

    def run(point: GridPoint) -> FairCandidate:
        return _train_candidate(point, config, spec, cevae_spec.group_count, pool, val_bundles, seed)

    if workers == 1:
        candidates = [run(point) for point in grid]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            candidates = list(executor.map(run, grid))

    for candidate in candidates:
        point = candidate.point
        if candidate.failed:
            error_handler.log_warning(f"Fair candidate {point.index} failed: {candidate.failure}")
        else:
            error_handler.log_debug(f"Fair candidate {point.index} (clp={point.clp_weight}, cf={point.cf_weight}, "
                                    f"grads={point.cf_gradients}, lr={point.learning_rate}): "
                                    f"val_clp={candidate.val_clp:.6g} val_ce={candidate.val_ce:.6g}")
    return candidates


def select_models(candidates: Sequence[FairCandidate]) -> List[FairCandidate]:
    """One candidate per distinct CLP weight: lowest validation CLP, earliest grid index on ties"""
    if not candidates:
        raise TrainingError("No candidates to select from")
    partitions: Dict[float, List[FairCandidate]] = {}
    for candidate in candidates:
        partitions.setdefault(candidate.point.clp_weight, []).append(candidate)

    selected = []
    for clp_weight, members in partitions.items():
        usable = [c for c in members if not c.failed and math.isfinite(c.val_clp)]
        if not usable:
            raise TrainingError(f"Every candidate with CLP weight {clp_weight} failed")
        selected.append(min(usable, key=lambda c: (c.val_clp, c.point.index)))
    return selected


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def encode_predictor_checkpoint(handle: PredictorHandle, seed: int, step: int,
                                extra: Optional[Dict] = None) -> Tuple[Dict, bytes]:
    spec_dict = {"network": handle.spec.to_dict(), "input_mode": handle.input_mode,
                 "group_count": handle.group_count}
    return encode_checkpoint(spec_dict, handle.params, seed, step, extra={"model": "predictor", **(extra or {})})


def decode_predictor_checkpoint(manifest: Dict, payload: bytes) -> PredictorHandle:
    spec_dict = manifest["spec"]
    handle = PredictorHandle(spec=NetworkSpec.from_dict(spec_dict["network"]),
                             params=decode_checkpoint(manifest, payload),
                             input_mode=spec_dict["input_mode"], group_count=int(spec_dict["group_count"]))
    handle.validate()
    return handle


def ledger_frame(candidates: Sequence[FairCandidate]) -> pd.DataFrame:
    rows = [{
        "index": c.point.index,
        "lambda_clp": c.point.clp_weight,
        "lambda_cf": c.point.cf_weight,
        "cf_gradients": c.point.cf_gradients,
        "learning_rate": c.point.learning_rate,
        "val_clp": c.val_clp,
        "val_ce": c.val_ce,
        "val_loss": c.val_loss,
        "best_epoch": c.best_epoch,
        "status": "failed" if c.failed else "ok",
        "checkpoint_path": c.checkpoint_path,
    } for c in candidates]
    return pd.DataFrame(rows, columns=LEDGER_COLUMNS)


def write_ledger(candidates: Sequence[FairCandidate], path: Union[str, Path]) -> None:
    ledger_frame(candidates).to_csv(path, index=False, float_format="%.10g")


def read_ledger(path: Union[str, Path]) -> List[FairCandidate]:
    """Candidates without handles; checkpoint_path points at the trained weights"""
    frame = pd.read_csv(path, keep_default_na=False, na_values=[""])
    missing = [column for column in LEDGER_COLUMNS if column not in frame.columns]
    if missing:
        raise ConfigurationError(f"Ledger {path} lacks columns {missing}")
    candidates = []
    for row in frame.to_dict("records"):
        point = GridPoint(int(row["index"]), float(row["lambda_clp"]), float(row["lambda_cf"]),
                          str(row["cf_gradients"]).lower() == "true", float(row["learning_rate"]))
        candidates.append(FairCandidate(
            point=point, handle=None, val_clp=float(row["val_clp"]), val_ce=float(row["val_ce"]),
            val_loss=float(row["val_loss"]), best_epoch=int(row["best_epoch"]), failed=row["status"] == "failed",
            checkpoint_path="" if pd.isna(row["checkpoint_path"]) else str(row["checkpoint_path"])))
    return candidates
