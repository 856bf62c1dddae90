"""
Causal-Effect VAE - amortized encoder q(u | x, a), decoders p(x | u, a) and p(y | u, a),
MMD-regularized weighted training loss, and abduction-action-prediction counterfactual sampling
"""

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import pdist

from data_model import LabeledSample, SampleBatch, to_batch
from diffnet import (NetworkParams, NetworkSpec, SeedLike, Tensor, adam_step, as_tensor, clip,
                     collect_gradients, columns, concat, decode_checkpoint, encode_checkpoint, exp,
                     init_optimizer, init_params, make_rng, multi_output_mean_bce, network_graph,
                     pairwise_sq_dists, sigmoid, softplus, take_rows, tensor_mean)
from error_handler import ConfigurationError, DatasetFormatError, DivergenceError, ShapeError, get_error_handler

EMBEDDING_INIT_STD = 0.01


@dataclass(frozen=True)
class CevaeSpec:
    feature_dim: int
    group_count: int
    latent_dim: int
    group_embedding_dim: int
    encoder: NetworkSpec
    decoder_x: NetworkSpec
    decoder_y: NetworkSpec
    lambda_x: float = 1000.0
    lambda_y: float = 10.0
    lambda_mmd: float = 10000.0
    lambda_mmd_group: float = 1000.0
    bandwidth: Optional[float] = None  # None: median heuristic per batch

    def validate(self) -> None:
        for name in ("feature_dim", "group_count", "latent_dim", "group_embedding_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"CevaeSpec.{name} must be positive (got {getattr(self, name)})")
        for name in ("lambda_x", "lambda_y", "lambda_mmd", "lambda_mmd_group"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"CevaeSpec.{name} must be nonnegative (got {getattr(self, name)})")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ConfigurationError(f"CevaeSpec.bandwidth must be positive (got {self.bandwidth})")
        decoder_in = self.latent_dim + self.group_embedding_dim
        expected = {
            "encoder": (self.feature_dim + self.group_count, 2 * self.latent_dim),
            "decoder_x": (decoder_in, self.feature_dim),
            "decoder_y": (decoder_in, 1),
        }
        for name, (n_in, n_out) in expected.items():
            network: NetworkSpec = getattr(self, name)
            network.validate()
            if (network.input_dim, network.output_dim) != (n_in, n_out):
                raise ConfigurationError(
                    f"CevaeSpec.{name} must map {n_in} -> {n_out} "
                    f"(got {network.input_dim} -> {network.output_dim})")

    def to_dict(self) -> Dict:
        return {
            "feature_dim": self.feature_dim,
            "group_count": self.group_count,
            "latent_dim": self.latent_dim,
            "group_embedding_dim": self.group_embedding_dim,
            "encoder": self.encoder.to_dict(),
            "decoder_x": self.decoder_x.to_dict(),
            "decoder_y": self.decoder_y.to_dict(),
            "lambda_x": self.lambda_x,
            "lambda_y": self.lambda_y,
            "lambda_mmd": self.lambda_mmd,
            "lambda_mmd_group": self.lambda_mmd_group,
            "bandwidth": self.bandwidth,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "CevaeSpec":
        data = dict(data)
        for name in ("encoder", "decoder_x", "decoder_y"):
            data[name] = NetworkSpec.from_dict(data[name])
        return cls(**data)


def build_cevae_spec(feature_dim: int, group_count: int, latent_dim: int = 128,
                     group_embedding_dim: int = 64, hidden_dim: int = 128, num_hidden_layers: int = 1,
                     dropout_prob: float = 0.0, layer_norm: bool = False, lambda_x: float = 1000.0,
                     lambda_y: float = 10.0, lambda_mmd: float = 10000.0, lambda_mmd_group: float = 1000.0,
                     bandwidth: Optional[float] = None) -> CevaeSpec:
    """Encoder and both decoders share one hidden size/depth/dropout/layer-norm setting"""
    def network(n_in: int, n_out: int) -> NetworkSpec:
        return NetworkSpec(input_dim=n_in, hidden_dim=hidden_dim, num_hidden_layers=num_hidden_layers,
                           output_dim=n_out, dropout_prob=dropout_prob, layer_norm=layer_norm)

    spec = CevaeSpec(
        feature_dim=feature_dim,
        group_count=group_count,
        latent_dim=latent_dim,
        group_embedding_dim=group_embedding_dim,
        encoder=network(feature_dim + group_count, 2 * latent_dim),
        decoder_x=network(latent_dim + group_embedding_dim, feature_dim),
        decoder_y=network(latent_dim + group_embedding_dim, 1),
        lambda_x=lambda_x,
        lambda_y=lambda_y,
        lambda_mmd=lambda_mmd,
        lambda_mmd_group=lambda_mmd_group,
        bandwidth=bandwidth,
    )
    spec.validate()
    return spec


def init_cevae_params(spec: CevaeSpec, seed: SeedLike) -> NetworkParams:
    spec.validate()
    rng = make_rng(seed)
    arrays: Dict[str, np.ndarray] = {}
    for name in ("encoder", "decoder_x", "decoder_y"):
        arrays.update(init_params(getattr(spec, name), rng, prefix=f"{name}.").arrays)
    arrays["embedding"] = rng.normal(0.0, EMBEDDING_INIT_STD, (spec.group_count, spec.group_embedding_dim))
    return NetworkParams(arrays)


@dataclass
class GaussianPosterior:
    mu: np.ndarray
    sigma: np.ndarray


# ---------------------------------------------------------------------------
# Graph pieces
# ---------------------------------------------------------------------------

def _check_groups(spec: CevaeSpec, groups: np.ndarray) -> np.ndarray:
    groups = np.asarray(groups, dtype=np.int64).reshape(-1)
    if groups.size and (groups.min() < 0 or groups.max() >= spec.group_count):
        raise DatasetFormatError(f"group index outside [0, {spec.group_count})")
    return groups


def _one_hot(groups: np.ndarray, group_count: int) -> np.ndarray:
    return np.eye(group_count)[groups]


def _posterior_graph(spec: CevaeSpec, leaves: Dict[str, Tensor], features: np.ndarray,
                     groups: np.ndarray, mode: str, rng: Optional[np.random.Generator]) -> Tuple[Tensor, Tensor]:
    if features.ndim != 2 or features.shape[1] != spec.feature_dim:
        raise ShapeError(f"Expected features with {spec.feature_dim} columns, got shape {features.shape}")
    inputs = Tensor(np.hstack([features, _one_hot(groups, spec.group_count)]))
    out, _ = network_graph(spec.encoder, leaves, inputs, mode=mode, rng=rng, prefix="encoder.")
    d = spec.latent_dim
    return columns(out, 0, d), softplus(columns(out, d, 2 * d))


def _decoder_graph(spec: CevaeSpec, leaves: Dict[str, Tensor], latent, groups: np.ndarray,
                   decoder: str, mode: str, rng: Optional[np.random.Generator]) -> Tensor:
    latent = as_tensor(latent)
    if latent.data.ndim != 2 or latent.shape[1] != spec.latent_dim:
        raise ShapeError(f"Expected latent codes of length {spec.latent_dim}, got shape {latent.shape}")
    inputs = concat([latent, take_rows(leaves["embedding"], groups)], axis=1)
    logits, _ = network_graph(getattr(spec, decoder), leaves, inputs, mode=mode, rng=rng, prefix=f"{decoder}.")
    return sigmoid(logits)


def _frozen_leaves(params: NetworkParams) -> Dict[str, Tensor]:
    return {name: Tensor(arr) for name, arr in params.arrays.items()}


# ---------------------------------------------------------------------------
# Inference API (eval mode)
# ---------------------------------------------------------------------------

def encode(spec: CevaeSpec, params: NetworkParams, x, a) -> GaussianPosterior:
    """Posterior q(u | x, a) for one dense feature vector or a batch of rows"""
    features = np.asarray(x, dtype=np.float64)
    single = features.ndim == 1
    features = features[None, :] if single else features
    groups = _check_groups(spec, np.broadcast_to(np.asarray(a), (features.shape[0],)))
    mu, sigma = _posterior_graph(spec, _frozen_leaves(params), features, groups, "eval", None)
    if single:
        return GaussianPosterior(mu=mu.data[0], sigma=sigma.data[0])
    return GaussianPosterior(mu=mu.data, sigma=sigma.data)


def sample_latent(posterior: GaussianPosterior, seed: SeedLike) -> np.ndarray:
    """Reparameterized draw u = mu + sigma * eps"""
    eps = make_rng(seed).standard_normal(np.shape(posterior.mu))
    return posterior.mu + posterior.sigma * eps


def _decode(spec: CevaeSpec, params: NetworkParams, u, a, decoder: str) -> np.ndarray:
    latent = np.asarray(u, dtype=np.float64)
    single = latent.ndim == 1
    latent = latent[None, :] if single else latent
    groups = _check_groups(spec, np.broadcast_to(np.asarray(a), (latent.shape[0],)))
    probs = _decoder_graph(spec, _frozen_leaves(params), Tensor(latent), groups, decoder, "eval", None).data
    return probs[0] if single else probs


def decode_x(spec: CevaeSpec, params: NetworkParams, u, a) -> np.ndarray:
    """Per-feature Bernoulli probabilities p(x_j = 1 | u, a)"""
    return _decode(spec, params, u, a, "decoder_x")


def decode_y(spec: CevaeSpec, params: NetworkParams, u, a):
    """Outcome probability p(y = 1 | u, a)"""
    probs = _decode(spec, params, u, a, "decoder_y")
    return float(probs[0]) if probs.ndim == 1 else probs[:, 0]


# ---------------------------------------------------------------------------
# Divergences
# ---------------------------------------------------------------------------

def median_bandwidth(pooled: np.ndarray) -> float:
    """Median pairwise euclidean distance; 1.0 when undefined or zero"""
    if pooled.shape[0] < 2:
        return 1.0
    median = float(np.median(pdist(pooled)))
    return median if median > 0 else 1.0


def mmd_sq(samples_p, samples_q, bandwidth: float):
    """Biased (V-statistic) squared MMD with k(x, y) = exp(-||x - y||^2 / (2 bw^2)), clamped at 0"""
    p, q = as_tensor(samples_p), as_tensor(samples_q)
    if p.data.ndim != 2 or q.data.ndim != 2 or p.shape[0] == 0 or q.shape[0] == 0:
        raise ShapeError("MMD needs two nonempty 2-D sample sets")
    scale = -1.0 / (2.0 * bandwidth ** 2)
    within = tensor_mean(exp(pairwise_sq_dists(p, p) * scale)) + tensor_mean(exp(pairwise_sq_dists(q, q) * scale))
    # averaging both orientations keeps mmd_sq(P, Q) == mmd_sq(Q, P) bit for bit
    cross = (tensor_mean(exp(pairwise_sq_dists(p, q) * scale))
             + tensor_mean(exp(pairwise_sq_dists(q, p) * scale))) * 0.5
    value = clip(within - cross * 2.0, 0.0, np.inf)
    if isinstance(samples_p, Tensor) or isinstance(samples_q, Tensor):
        return value
    return float(value.data)


def gaussian_kl(posterior: GaussianPosterior):
    """KL(N(mu, diag sigma^2) || N(0, I)) per sample"""
    mu, sigma = np.asarray(posterior.mu), np.asarray(posterior.sigma)
    kl = 0.5 * np.sum(sigma ** 2 + mu ** 2 - 1.0 - 2.0 * np.log(sigma), axis=-1)
    return float(kl) if np.ndim(kl) == 0 else kl


# ---------------------------------------------------------------------------
# Training loss
# ---------------------------------------------------------------------------

LOSS_COMPONENTS = ("recon_x", "recon_y", "mmd", "mmd_per_group")


def _loss_graph(spec: CevaeSpec, leaves: Dict[str, Tensor], batch: SampleBatch,
                rng: np.random.Generator, mode: str) -> Tuple[Tensor, Dict[str, Tensor]]:
    groups = _check_groups(spec, batch.groups)
    mu, sigma = _posterior_graph(spec, leaves, batch.features, groups, mode, rng)
    latent = mu + sigma * rng.standard_normal(mu.shape)

    probs_x = _decoder_graph(spec, leaves, latent, groups, "decoder_x", mode, rng)
    probs_y = _decoder_graph(spec, leaves, latent, groups, "decoder_y", mode, rng)
    recon_x = multi_output_mean_bce(probs_x, batch.features)
    recon_y = multi_output_mean_bce(probs_y, batch.outcomes[:, None].astype(np.float64))

    prior = rng.standard_normal(latent.shape)
    bandwidth = spec.bandwidth or median_bandwidth(np.vstack([latent.data, prior]))
    mmd = mmd_sq(latent, prior, bandwidth)

    per_group = Tensor(0.0)
    for group in range(spec.group_count):
        rows = np.flatnonzero(groups == group)
        if rows.size < 2:
            continue
        group_latent = take_rows(latent, rows)
        group_prior = rng.standard_normal(group_latent.shape)
        group_bandwidth = spec.bandwidth or median_bandwidth(np.vstack([group_latent.data, group_prior]))
        per_group = per_group + mmd_sq(group_latent, group_prior, group_bandwidth)

    total = (spec.lambda_x * recon_x + spec.lambda_y * recon_y
             + spec.lambda_mmd * mmd + spec.lambda_mmd_group * per_group)
    return total, {"recon_x": recon_x, "recon_y": recon_y, "mmd": mmd, "mmd_per_group": per_group}


def cevae_loss(spec: CevaeSpec, params: NetworkParams, batch: SampleBatch, seed: SeedLike,
               mode: str = "train") -> Tuple[float, Dict[str, float]]:
    """Weighted reconstruction + MMD objective on one batch (one latent draw per sample)"""
    if len(batch) == 0:
        raise ShapeError("cevae_loss needs a nonempty batch")
    total, parts = _loss_graph(spec, _frozen_leaves(params), batch, make_rng(seed), mode)
    return total.item(), {name: t.item() for name, t in parts.items()}


def cevae_loss_and_gradients(spec: CevaeSpec, params: NetworkParams, batch: SampleBatch, seed: SeedLike,
                             mode: str = "train") -> Tuple[float, Dict[str, float], Dict[str, np.ndarray]]:
    if len(batch) == 0:
        raise ShapeError("cevae_loss needs a nonempty batch")
    leaves = params.leaves()
    total, parts = _loss_graph(spec, leaves, batch, make_rng(seed), mode)
    total.backward()
    return total.item(), {name: t.item() for name, t in parts.items()}, collect_gradients(leaves)


def elbo(spec: CevaeSpec, params: NetworkParams, batch: SampleBatch, seed: SeedLike) -> float:
    """Unweighted evidence lower bound (mean per sample); diagnostic only"""
    rng = make_rng(seed)
    leaves = _frozen_leaves(params)
    groups = _check_groups(spec, batch.groups)
    mu, sigma = _posterior_graph(spec, leaves, batch.features, groups, "eval", None)
    latent = mu + sigma * rng.standard_normal(mu.shape)
    eps = 1e-7
    probs_x = np.clip(_decoder_graph(spec, leaves, latent, groups, "decoder_x", "eval", None).data, eps, 1 - eps)
    probs_y = np.clip(_decoder_graph(spec, leaves, latent, groups, "decoder_y", "eval", None).data[:, 0], eps, 1 - eps)
    x, y = batch.features, batch.outcomes
    loglik_x = np.sum(x * np.log(probs_x) + (1 - x) * np.log(1 - probs_x), axis=1)
    loglik_y = y * np.log(probs_y) + (1 - y) * np.log(1 - probs_y)
    kl = gaussian_kl(GaussianPosterior(mu.data, sigma.data))
    return float(np.mean(loglik_x + loglik_y - kl))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_components: Dict[str, float]
    val_elbo: float


@dataclass
class CevaeTrainResult:
    spec: CevaeSpec
    params: NetworkParams
    initial_val_loss: float
    best_val_loss: float
    best_epoch: int
    learning_rate: float
    trace: List[EpochRecord] = field(default_factory=list)


def validation_loss(spec: CevaeSpec, params: NetworkParams, batch: SampleBatch, seed: int,
                    batch_size: int = 512) -> Tuple[float, Dict[str, float]]:
    """Size-weighted mean of eval-mode batch losses under a fixed seed"""
    rng = np.random.default_rng(seed)
    n = len(batch)
    total = 0.0
    parts = dict.fromkeys(LOSS_COMPONENTS, 0.0)
    for start in range(0, n, batch_size):
        chunk = batch.take(np.arange(start, min(start + batch_size, n)))
        loss, components = cevae_loss(spec, params, chunk, rng, mode="eval")
        weight = len(chunk) / n
        total += weight * loss
        for name in parts:
            parts[name] += weight * components[name]
    return total, parts


def train_cevae(spec: CevaeSpec, train_samples: Sequence[LabeledSample], val_samples: Sequence[LabeledSample],
                epochs: int, learning_rate: float, seed: int, batch_size: int = 512,
                patience: Optional[int] = None) -> CevaeTrainResult:
    """Minibatch Adam on the weighted loss; keeps the parameters with the lowest validation loss"""
    if not train_samples or not val_samples:
        raise ConfigurationError("train_cevae needs nonempty train and validation sets")
    error_handler = get_error_handler()
    spec.validate()

    params = init_cevae_params(spec, np.random.default_rng([seed, 0]))
    train_batch = to_batch(train_samples, spec.feature_dim)
    val_batch = to_batch(val_samples, spec.feature_dim)
    val_seed = int(np.random.default_rng([seed, 1]).integers(2 ** 31))

    initial_val, _ = validation_loss(spec, params, val_batch, val_seed, batch_size)
    result = CevaeTrainResult(spec=spec, params=params.copy(), initial_val_loss=initial_val,
                              best_val_loss=initial_val, best_epoch=0, learning_rate=learning_rate)
    if epochs <= 0:
        return result

    optimizer = init_optimizer(params, learning_rate)
    rng = np.random.default_rng([seed, 2])
    stale_epochs = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train_batch))
        running = 0.0
        for batch_index, start in enumerate(range(0, len(order), batch_size)):
            chunk = train_batch.take(order[start:start + batch_size])
            loss, parts, grads = cevae_loss_and_gradients(spec, params, chunk, rng)
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"CEVAE loss became non-finite at epoch {epoch}, batch {batch_index} "
                    f"(lr={learning_rate}): {parts}")
            adam_step(optimizer, params, grads)
            running += loss * len(chunk)

        val_loss, val_parts = validation_loss(spec, params, val_batch, val_seed, batch_size)
        record = EpochRecord(epoch=epoch, train_loss=running / len(train_batch), val_loss=val_loss,
                             val_components=val_parts,
                             val_elbo=elbo(spec, params, val_batch.take(np.arange(min(len(val_batch), batch_size))),
                                           val_seed))
        result.trace.append(record)
        error_handler.log_epoch("CEVAE", epoch, record.train_loss, val_loss)

        if not math.isfinite(val_loss):
            raise DivergenceError(f"CEVAE validation loss became non-finite at epoch {epoch}: {val_parts}")
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            result.params = params.copy()
            stale_epochs = 0
        else:
            stale_epochs += 1
            if patience is not None and stale_epochs >= patience:
                error_handler.log_info(f"CEVAE early stop at epoch {epoch} (best epoch {result.best_epoch})")
                break

    return result


@dataclass
class CevaeSearchSpace:
    hidden_dims: Sequence[int] = (128,)
    num_hidden_layers: Sequence[int] = (1,)
    dropout_probs: Sequence[float] = (0.0,)
    layer_norm: Sequence[bool] = (False,)
    group_embedding_dims: Sequence[int] = (64,)
    learning_rates: Sequence[float] = (1e-3,)

    def configurations(self) -> List[Tuple]:
        return list(itertools.product(self.hidden_dims, self.num_hidden_layers, self.dropout_probs,
                                      self.layer_norm, self.group_embedding_dims, self.learning_rates))


def search_cevae(base_spec: CevaeSpec, space: CevaeSearchSpace, train_samples: Sequence[LabeledSample],
                 val_samples: Sequence[LabeledSample], iterations: int, epochs: int, seed: int,
                 batch_size: int = 512, patience: Optional[int] = None) -> Tuple[CevaeTrainResult, List[CevaeTrainResult]]:
    """Random search over architecture and learning rate; lowest validation loss wins (first on ties)"""
    error_handler = get_error_handler()
    configurations = space.configurations()
    rng = np.random.default_rng([seed, 3])
    if len(configurations) > iterations:
        picked = sorted(rng.choice(len(configurations), size=iterations, replace=False).tolist())
        configurations = [configurations[i] for i in picked]

    trials: List[CevaeTrainResult] = []
    for index, (hidden, layers, dropout, norm, embed, lr) in enumerate(configurations):
        spec = build_cevae_spec(
            feature_dim=base_spec.feature_dim, group_count=base_spec.group_count,
            latent_dim=base_spec.latent_dim, group_embedding_dim=embed, hidden_dim=hidden,
            num_hidden_layers=layers, dropout_prob=dropout, layer_norm=norm,
            lambda_x=base_spec.lambda_x, lambda_y=base_spec.lambda_y, lambda_mmd=base_spec.lambda_mmd,
            lambda_mmd_group=base_spec.lambda_mmd_group, bandwidth=base_spec.bandwidth)
        try:
            trial = train_cevae(spec, train_samples, val_samples, epochs, lr, seed + index,
                                batch_size=batch_size, patience=patience)
        except DivergenceError as e:
            error_handler.log_warning(f"CEVAE trial {index} diverged: {e}")
            continue
        error_handler.log_info(f"CEVAE trial {index}: hidden={hidden} layers={layers} dropout={dropout} "
                               f"layer_norm={norm} embed={embed} lr={lr} -> val={trial.best_val_loss:.6g}")
        trials.append(trial)

    if not trials:
        raise DivergenceError("Every CEVAE search trial diverged")
    best = min(trials, key=lambda t: t.best_val_loss)
    return best, trials


# ---------------------------------------------------------------------------
# Counterfactuals
# ---------------------------------------------------------------------------

@dataclass
class CounterfactualSample:
    target_group: int
    latent: np.ndarray
    features: Tuple[int, ...]
    outcome: int
    outcome_prob: float


@dataclass
class CounterfactualBundle:
    sample: LabeledSample
    latent: np.ndarray
    latent_mean: np.ndarray
    factual_prob: float
    counterfactuals: Dict[int, CounterfactualSample]


@dataclass
class BundleBatch:
    """Struct-of-arrays bundles; column a' of every (n, K, ...) array, with a' = a holding the factual values"""
    ids: np.ndarray
    groups: np.ndarray
    outcomes: np.ndarray
    latent: np.ndarray
    latent_mean: np.ndarray
    cf_features: np.ndarray
    cf_outcomes: np.ndarray
    cf_probs: np.ndarray

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def group_count(self) -> int:
        return int(self.cf_outcomes.shape[1])

    @property
    def features(self) -> np.ndarray:
        return self.cf_features[np.arange(len(self)), self.groups].astype(np.float64)

    def take(self, index: np.ndarray) -> "BundleBatch":
        return BundleBatch(self.ids[index], self.groups[index], self.outcomes[index], self.latent[index],
                           self.latent_mean[index], self.cf_features[index], self.cf_outcomes[index],
                           self.cf_probs[index])

    def bundle(self, row: int) -> CounterfactualBundle:
        group = int(self.groups[row])
        sample = LabeledSample(id=int(self.ids[row]), x=tuple(int(j) for j in np.flatnonzero(self.cf_features[row, group])),
                               y=int(self.outcomes[row]), a=group)
        counterfactuals = {
            target: CounterfactualSample(
                target_group=target,
                latent=self.latent[row],
                features=tuple(int(j) for j in np.flatnonzero(self.cf_features[row, target])),
                outcome=int(self.cf_outcomes[row, target]),
                outcome_prob=float(self.cf_probs[row, target]),
            )
            for target in range(self.group_count) if target != group
        }
        return CounterfactualBundle(sample=sample, latent=self.latent[row], latent_mean=self.latent_mean[row],
                                    factual_prob=float(self.cf_probs[row, group]), counterfactuals=counterfactuals)

    def to_bundles(self) -> List[CounterfactualBundle]:
        return [self.bundle(row) for row in range(len(self))]

    @classmethod
    def from_bundles(cls, bundles: Sequence[CounterfactualBundle], feature_dim: int, group_count: int) -> "BundleBatch":
        n = len(bundles)
        cf_features = np.zeros((n, group_count, feature_dim), dtype=np.uint8)
        cf_outcomes = np.zeros((n, group_count), dtype=np.int64)
        cf_probs = np.zeros((n, group_count))
        for row, bundle in enumerate(bundles):
            a = bundle.sample.a
            missing = set(range(group_count)) - {a} - set(bundle.counterfactuals)
            if missing:
                raise ConfigurationError(f"bundle for sample {bundle.sample.id} lacks counterfactual groups {sorted(missing)}")
            active = list(bundle.sample.x) + [j for cf in bundle.counterfactuals.values() for j in cf.features]
            if active and max(active) >= feature_dim:
                raise ShapeError(f"bundle for sample {bundle.sample.id} has feature index {max(active)} "
                                 f">= feature_dim {feature_dim}")
            cf_features[row, a, list(bundle.sample.x)] = 1
            cf_outcomes[row, a] = bundle.sample.y
            cf_probs[row, a] = bundle.factual_prob
            for target, cf in bundle.counterfactuals.items():
                cf_features[row, target, list(cf.features)] = 1
                cf_outcomes[row, target] = cf.outcome
                cf_probs[row, target] = cf.outcome_prob
        return cls(
            ids=np.array([b.sample.id for b in bundles], dtype=np.int64),
            groups=np.array([b.sample.a for b in bundles], dtype=np.int64),
            outcomes=np.array([b.sample.y for b in bundles], dtype=np.int64),
            latent=np.array([b.latent for b in bundles]).reshape(n, -1),
            latent_mean=np.array([b.latent_mean for b in bundles]).reshape(n, -1),
            cf_features=cf_features,
            cf_outcomes=cf_outcomes,
            cf_probs=cf_probs,
        )


def sample_bundle_batch(spec: CevaeSpec, params: NetworkParams,
                        samples: Union[Sequence[LabeledSample], SampleBatch], seed: SeedLike) -> BundleBatch:
    """Abduction (one u per sample), action (set a'), prediction (draw x and y) for every a'"""
    batch = samples if isinstance(samples, SampleBatch) else to_batch(samples, spec.feature_dim)
    rng = make_rng(seed)
    n, k = len(batch), spec.group_count
    posterior = encode(spec, params, batch.features, batch.groups)
    latent = sample_latent(posterior, rng)

    cf_features = np.zeros((n, k, spec.feature_dim), dtype=np.uint8)
    cf_outcomes = np.zeros((n, k), dtype=np.int64)
    cf_probs = np.zeros((n, k))
    for group in range(k):
        fixed = np.full(n, group)
        probs_x = decode_x(spec, params, latent, fixed)
        probs_y = decode_y(spec, params, latent, fixed)
        cf_features[:, group] = rng.random(probs_x.shape) < probs_x
        cf_outcomes[:, group] = rng.random(n) < probs_y
        cf_probs[:, group] = probs_y

    rows = np.arange(n)
    cf_features[rows, batch.groups] = batch.features.astype(np.uint8)
    cf_outcomes[rows, batch.groups] = batch.outcomes
    return BundleBatch(ids=batch.ids, groups=batch.groups, outcomes=batch.outcomes, latent=latent,
                       latent_mean=posterior.mu, cf_features=cf_features, cf_outcomes=cf_outcomes,
                       cf_probs=cf_probs)


def sample_counterfactual_bundle(spec: CevaeSpec, params: NetworkParams, sample: LabeledSample,
                                 seed: SeedLike) -> CounterfactualBundle:
    return sample_bundle_batch(spec, params, [sample], seed).bundle(0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def encode_cevae_checkpoint(spec: CevaeSpec, params: NetworkParams, seed: int, step: int,
                            extra: Optional[Dict] = None) -> Tuple[Dict, bytes]:
    return encode_checkpoint(spec.to_dict(), params, seed, step, extra={"model": "cevae", **(extra or {})})


def decode_cevae_checkpoint(manifest: Dict, payload: bytes) -> Tuple[CevaeSpec, NetworkParams]:
    spec = CevaeSpec.from_dict(manifest["spec"])
    params = decode_checkpoint(manifest, payload)
    for name in ("encoder", "decoder_x", "decoder_y"):
        params.check_shapes(getattr(spec, name), prefix=f"{name}.")
    if params.arrays["embedding"].shape != (spec.group_count, spec.group_embedding_dim):
        raise ShapeError("Checkpoint embedding table does not match its CevaeSpec")
    return spec, params
