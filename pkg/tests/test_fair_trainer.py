import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import logsumexp

from cevae import BundleBatch, CounterfactualBundle
from data_model import LabeledSample, to_batch
from diffnet import NetworkParams, NetworkSpec, gradient_check, init_params
from error_handler import ConfigurationError, ShapeError, TrainingError
from fair_trainer import (BaselineSearchSpace, CounterfactualPool, FairCandidate, FairTrainConfig, GridPoint,
                          PredictorHandle, clp_term, counterfactual_probabilities, decode_predictor_checkpoint,
                          encode_predictor_checkpoint, fair_loss, fair_loss_and_gradients, fair_predictor_spec,
                          predict_logits, predict_proba, read_ledger, resolve_workers, select_models, train_baseline,
                          train_fair_predictor, validation_clp, write_ledger)


def make_bundles(latent, groups, outcomes, cf_outcomes) -> BundleBatch:
    groups = np.asarray(groups, dtype=np.int64)
    n = len(groups)
    cf_outcomes = np.asarray(cf_outcomes, dtype=np.int64)
    latent = np.asarray(latent, dtype=np.float64).reshape(n, -1)
    return BundleBatch(ids=np.arange(n), groups=groups, outcomes=np.asarray(outcomes, dtype=np.int64),
                       latent=latent, latent_mean=latent.copy(),
                       cf_features=np.zeros((n, cf_outcomes.shape[1], 1), dtype=np.uint8),
                       cf_outcomes=cf_outcomes, cf_probs=np.full(cf_outcomes.shape, 0.5))


def linear_handle(group_count: int, seed: int = 0, latent_dim: int = 1) -> PredictorHandle:
    """No hidden layer: logits = [u, onehot(a)] @ W + b"""
    spec = NetworkSpec(input_dim=latent_dim + group_count, hidden_dim=1, num_hidden_layers=0, output_dim=2)
    return PredictorHandle(spec, init_params(spec, seed), "latent", group_count)


def candidate(index: int, clp_weight: float, val_clp: float, failed: bool = False) -> FairCandidate:
    return FairCandidate(point=GridPoint(index, clp_weight, 0.0, False, 1e-3), handle=None, val_clp=val_clp,
                         val_ce=0.5, val_loss=0.5, failed=failed)


@pytest.fixture
def toy_bundles():
    rng = np.random.default_rng(3)
    outcomes = rng.integers(0, 2, 12)
    cf_outcomes = np.stack([outcomes, rng.integers(0, 2, 12)], axis=1)
    return make_bundles(rng.normal(size=12), np.zeros(12), outcomes, cf_outcomes)


# clp_term

def test_clp_term_identical_logits():
    assert clp_term([0.3, -1.0], [0.3, -1.0], 1, 1) == 0.0


def test_clp_term_gated_by_outcome_agreement():
    assert clp_term([5.0, -5.0], [-3.0, 2.0], 1, 0) == 0.0


def test_clp_term_hand_computed():
    assert clp_term([1.0, 0.0], [0.0, 1.0], 0, 0) == 1.0


def test_clp_term_symmetric_and_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(20):
        f, cf = rng.normal(size=2), rng.normal(size=2)
        assert clp_term(f, cf, 1, 1) == clp_term(cf, f, 1, 1) >= 0.0


# fair_loss

def test_unweighted_loss_is_factual_ce(toy_bundles):
    total, parts = fair_loss(linear_handle(2), toy_bundles, 0.0, 0.0, cf_gradients=False)
    assert total == parts["factual_ce"]


def test_counterfactual_weight_adds_cf_ce(toy_bundles):
    total, parts = fair_loss(linear_handle(2), toy_bundles, 1.0, 0.0, cf_gradients=False)
    assert total == pytest.approx(parts["factual_ce"] + parts["cf_ce"], rel=1e-12)


@pytest.mark.parametrize("c", [0.01, 0.5, 3.0])
def test_loss_is_linear_in_clp_weight(toy_bundles, c):
    handle = linear_handle(2, seed=4)
    single, parts = fair_loss(handle, toy_bundles, 0.1, c, cf_gradients=False)
    double, _ = fair_loss(handle, toy_bundles, 0.1, 2 * c, cf_gradients=False)
    assert double - single == pytest.approx(c * parts["clp"], rel=1e-9, abs=1e-15)


def test_clp_component_matches_clp_term(toy_bundles):
    handle = linear_handle(2, seed=5)
    _, parts = fair_loss(handle, toy_bundles, 0.0, 0.0, cf_gradients=False)
    expected = []
    for row in range(len(toy_bundles)):
        factual = predict_logits(handle, toy_bundles.latent[row], 0)[0]
        paired = predict_logits(handle, toy_bundles.latent[row], 1)[0]
        expected.append(clp_term(factual, paired, toy_bundles.outcomes[row], toy_bundles.cf_outcomes[row, 1]))
    assert parts["clp"] == pytest.approx(np.mean(expected), rel=1e-12)


def test_single_bundle_object_is_accepted():
    handle = linear_handle(2)
    bundle = make_bundles([0.7], [1], [1], [[1, 1]]).bundle(0)
    total, parts = fair_loss(handle, bundle, 1.0, 1.0, cf_gradients=True, feature_dim=1)
    assert math.isfinite(total)
    assert parts["clp"] >= 0.0


def test_missing_counterfactual_is_rejected():
    bundle = make_bundles([0.7], [1], [1], [[1, 1]]).bundle(0)
    stripped = CounterfactualBundle(sample=bundle.sample, latent=bundle.latent, latent_mean=bundle.latent_mean,
                                    factual_prob=bundle.factual_prob, counterfactuals={})
    with pytest.raises(ConfigurationError):
        fair_loss(linear_handle(2), stripped, 0.0, 1.0, cf_gradients=False, feature_dim=1)


def test_single_bundle_needs_explicit_feature_dim_in_latent_mode():
    bundles = make_bundles([0.7], [1], [1], [[0, 1]])
    bundle = bundles.bundle(0)
    handle = linear_handle(2, seed=3)
    with pytest.raises(ConfigurationError, match="feature_dim"):
        fair_loss(handle, bundle, 1.0, 1.0, cf_gradients=True)
    single, _ = fair_loss(handle, bundle, 1.0, 1.0, cf_gradients=True, feature_dim=4)
    batched, _ = fair_loss(handle, bundles, 1.0, 1.0, cf_gradients=True)
    assert single == batched


def test_single_bundle_feature_dim_is_checked():
    bundle = make_bundles([0.7], [1], [1], [[0, 1]]).bundle(0)
    wide = replace(bundle, sample=replace(bundle.sample, x=(5,)))
    with pytest.raises(ShapeError, match="feature index 5"):
        fair_loss(linear_handle(2), wide, 0.0, 1.0, cf_gradients=False, feature_dim=3)

    spec = NetworkSpec(input_dim=3 + 2, hidden_dim=1, num_hidden_layers=0, output_dim=2)
    features_handle = PredictorHandle(spec, init_params(spec, 0), "features", 2)
    with pytest.raises(ShapeError, match="feature_dim=4"):
        fair_loss(features_handle, bundle, 0.0, 1.0, cf_gradients=False, feature_dim=4)
    total, _ = fair_loss(features_handle, bundle, 0.0, 1.0, cf_gradients=False)
    assert math.isfinite(total)


def test_stop_gradient_on_counterfactual_branch():
    # every factual group is 0, so weight row 2 (onehot a=1) only reaches the paired logits
    rng = np.random.default_rng(8)
    outcomes = rng.integers(0, 2, 6)
    bundles = make_bundles(rng.normal(size=6), np.zeros(6), outcomes, np.stack([outcomes, outcomes], axis=1))
    handle = linear_handle(2, seed=9)

    _, _, frozen = fair_loss_and_gradients(handle, bundles, 0.0, 1.0, cf_gradients=False)
    assert np.all(frozen["layer0.weight"][2] == 0.0)

    _, _, live = fair_loss_and_gradients(handle, bundles, 0.0, 1.0, cf_gradients=True)
    assert np.any(np.abs(live["layer0.weight"][2]) > 1e-6)

    def total(params: NetworkParams) -> float:
        return fair_loss(PredictorHandle(handle.spec, params, "latent", 2), bundles, 0.0, 1.0, cf_gradients=True)[0]

    assert gradient_check(total, handle.params, live) < 1e-4


def mixed_agreement_bundles(seed: int):
    """Random bundles where some counterfactual outcomes agree with the factual one and some do not"""
    rng = np.random.default_rng(seed)
    k, n = 2 + seed % 2, 8
    groups = rng.integers(0, k, n)
    outcomes = rng.integers(0, 2, n)
    agree = rng.random((n, k)) < 0.5
    agree[0], agree[1] = True, False
    agree[np.arange(n), groups] = True
    cf_outcomes = np.where(agree, outcomes[:, None], 1 - outcomes[:, None])
    return make_bundles(rng.normal(size=(n, 2)), groups, outcomes, cf_outcomes), k


def reference_fair_loss(handle: PredictorHandle, params: NetworkParams, bundles: BundleBatch, cf_weight: float,
                        clp_weight: float, frozen_logits=None) -> float:
    """Plain numpy version of the fair loss; frozen_logits stand in for a stop-gradient paired branch"""
    live = PredictorHandle(handle.spec, params, handle.input_mode, handle.group_count)
    n, rows = len(bundles), np.arange(len(bundles))
    logits = [predict_logits(live, bundles.latent, np.full(n, g)) for g in range(handle.group_count)]
    paired = logits if frozen_logits is None else frozen_logits
    factual = np.stack(logits, axis=1)[rows, bundles.groups]

    def ce(values, labels):
        return logsumexp(values, axis=1) - values[rows, labels]

    total = ce(factual, bundles.outcomes)
    for g in range(handle.group_count):
        is_cf = bundles.groups != g
        gate = is_cf & (bundles.cf_outcomes[:, g] == bundles.outcomes)
        total = total + cf_weight * ce(logits[g], bundles.cf_outcomes[:, g]) * is_cf
        total = total + clp_weight * 0.5 * np.sum((factual - paired[g]) ** 2, axis=1) * gate
    return float(np.mean(total))


@pytest.mark.parametrize("seed", range(20))
def test_fair_loss_gradients_match_finite_differences(seed):
    bundles, k = mixed_agreement_bundles(seed)
    handle = linear_handle(k, seed=seed, latent_dim=2)
    cf_gradients = seed % 4 < 2
    cf_weight, clp_weight = 0.5, 1.5

    total, _, analytic = fair_loss_and_gradients(handle, bundles, cf_weight, clp_weight, cf_gradients)
    frozen = None if cf_gradients else [predict_logits(handle, bundles.latent, np.full(len(bundles), g))
                                        for g in range(k)]
    assert total == pytest.approx(reference_fair_loss(handle, handle.params, bundles, cf_weight, clp_weight, frozen),
                                  rel=1e-12)

    def loss(params: NetworkParams) -> float:
        return reference_fair_loss(handle, params, bundles, cf_weight, clp_weight, frozen)

    assert gradient_check(loss, handle.params, analytic) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_disagreeing_counterfactuals_add_no_clp_gradient(seed):
    bundles, k = mixed_agreement_bundles(seed)
    handle = linear_handle(k, seed=seed, latent_dim=2)
    factual_column = bundles.cf_outcomes[np.arange(len(bundles)), bundles.groups]
    gate_off = make_bundles(bundles.latent, bundles.groups, bundles.outcomes, 1 - bundles.cf_outcomes)
    gate_off.cf_outcomes[np.arange(len(bundles)), bundles.groups] = factual_column

    _, parts, penalized = fair_loss_and_gradients(handle, gate_off, 0.5, 2.0, cf_gradients=True)
    _, _, plain = fair_loss_and_gradients(handle, gate_off, 0.5, 0.0, cf_gradients=True)
    assert parts["clp"] == 0.0
    for name in plain:
        assert np.allclose(penalized[name], plain[name], rtol=0.0, atol=1e-15)

    _, parts_on, gated = fair_loss_and_gradients(handle, bundles, 0.5, 2.0, cf_gradients=True)
    _, _, ungated = fair_loss_and_gradients(handle, bundles, 0.5, 0.0, cf_gradients=True)
    assert parts_on["clp"] > 0.0
    assert any(not np.allclose(gated[name], ungated[name]) for name in ungated)


def test_validation_clp_uses_posterior_mean(toy_bundles):
    handle = linear_handle(2, seed=1)
    shifted = make_bundles(toy_bundles.latent + 100.0, toy_bundles.groups, toy_bundles.outcomes,
                           toy_bundles.cf_outcomes)
    shifted.latent_mean = toy_bundles.latent_mean.copy()
    assert validation_clp(handle, shifted) == validation_clp(handle, toy_bundles)


# inference

def test_counterfactual_probabilities_columns(toy_bundles):
    handle = linear_handle(2, seed=2)
    probs = counterfactual_probabilities(handle, toy_bundles)
    assert probs.shape == (12, 2)
    assert np.allclose(probs[:, 0], predict_proba(handle, toy_bundles.latent_mean, 0), atol=1e-15)


def test_fair_predictor_spec_follows_outcome_decoder(tiny_cevae_spec):
    latent = fair_predictor_spec(tiny_cevae_spec, "latent")
    features = fair_predictor_spec(tiny_cevae_spec, "features")
    assert latent.input_dim == tiny_cevae_spec.latent_dim + 2
    assert features.input_dim == tiny_cevae_spec.feature_dim + 2
    assert latent.output_dim == 2
    assert latent.hidden_dim == tiny_cevae_spec.decoder_y.hidden_dim


# counterfactual pool

def test_pool_evicts_oldest_epoch(tiny_cevae_spec, tiny_cevae_params, small_sem_samples):
    samples, _ = small_sem_samples
    pool = CounterfactualPool(tiny_cevae_spec, tiny_cevae_params, to_batch(samples[:50], 5), seed=4, capacity=2)
    first = pool.for_epoch(1)
    assert pool.for_epoch(1) is first
    pool.for_epoch(2)
    pool.for_epoch(3)
    assert pool.cached_epochs == [2, 3]
    assert pool.draws == 3

    redrawn = pool.for_epoch(1)
    assert redrawn is not first
    assert np.array_equal(redrawn.cf_outcomes, first.cf_outcomes)
    assert np.array_equal(redrawn.latent, first.latent)
    assert pool.cached_epochs == [3, 1]


def test_pool_without_resampling_keeps_one_draw(tiny_cevae_spec, tiny_cevae_params, small_sem_samples):
    samples, _ = small_sem_samples
    pool = CounterfactualPool(tiny_cevae_spec, tiny_cevae_params, to_batch(samples[:50], 5), seed=4,
                              resample_each_epoch=False, capacity=1)
    assert pool.for_epoch(1) is pool.for_epoch(7)
    assert pool.draws == 1


def test_pool_rejects_zero_capacity(tiny_cevae_spec, tiny_cevae_params, small_sem_samples):
    samples, _ = small_sem_samples
    with pytest.raises(ConfigurationError, match="capacity"):
        CounterfactualPool(tiny_cevae_spec, tiny_cevae_params, to_batch(samples[:50], 5), seed=4, capacity=0)


# grid training

def small_config(**overrides) -> FairTrainConfig:
    settings = dict(clp_weights=(0.0,), cf_weights=(0.0,), cf_gradients=(False,), learning_rates=(1e-2,),
                    epochs=2, patience=5, batch_size=64, max_workers=1)
    settings.update(overrides)
    return FairTrainConfig(**settings)


def test_grid_of_one_trains_one_candidate(tiny_cevae_spec, tiny_cevae_params, small_sem_samples):
    samples, _ = small_sem_samples
    candidates = train_fair_predictor(small_config(), tiny_cevae_spec, tiny_cevae_params,
                                      samples[:200], samples[200:], seed=1)
    assert len(candidates) == 1
    assert not candidates[0].failed
    assert candidates[0].val_clp >= 0.0


def test_grid_training_is_deterministic_and_ordered(tiny_cevae_spec, tiny_cevae_params, small_sem_samples):
    samples, _ = small_sem_samples
    config = small_config(clp_weights=(0.0, 1.0), cf_weights=(0.0, 1.0), max_workers=3)
    first = train_fair_predictor(config, tiny_cevae_spec, tiny_cevae_params, samples[:200], samples[200:], seed=2)
    second = train_fair_predictor(config, tiny_cevae_spec, tiny_cevae_params, samples[:200], samples[200:], seed=2)
    assert [c.point.index for c in first] == list(range(4))
    assert [(c.val_clp, c.val_ce, c.val_loss) for c in first] == [(c.val_clp, c.val_ce, c.val_loss) for c in second]


def test_clp_weight_shrinks_validation_clp(tiny_cevae_spec, tiny_cevae_params, small_sem_samples):
    samples, _ = small_sem_samples
    config = small_config(clp_weights=(0.0, 10.0), epochs=20, patience=20)
    unfair, fair = train_fair_predictor(config, tiny_cevae_spec, tiny_cevae_params,
                                        samples[:200], samples[200:], seed=3)
    assert fair.val_clp < unfair.val_clp


def test_config_validation():
    with pytest.raises(ConfigurationError, match="clp_weights"):
        small_config(clp_weights=()).validate()
    with pytest.raises(ConfigurationError, match="nonnegative"):
        small_config(cf_weights=(-1.0,)).validate()
    with pytest.raises(ConfigurationError, match="input_mode"):
        small_config(input_mode="raw").validate()


def test_grid_enumeration_order():
    grid = small_config(clp_weights=(0.0, 1.0), learning_rates=(1e-3, 1e-2)).grid()
    assert [(p.clp_weight, p.learning_rate) for p in grid] == [(0.0, 1e-3), (0.0, 1e-2), (1.0, 1e-3), (1.0, 1e-2)]


def test_thread_cap_from_environment(monkeypatch):
    monkeypatch.setenv("CFODDS_THREADS", "1")
    assert resolve_workers(8) == 1
    monkeypatch.setenv("CFODDS_THREADS", "many")
    with pytest.raises(ConfigurationError):
        resolve_workers(8)


# selection

def test_selects_lowest_validation_clp():
    picked = select_models([candidate(0, 0.1, 0.5), candidate(1, 0.1, 0.2)])
    assert [c.point.index for c in picked] == [1]


def test_selects_one_per_clp_weight():
    picked = select_models([candidate(0, 0.0, 0.3), candidate(1, 1.0, 0.1), candidate(2, 10.0, 0.01)])
    assert sorted(c.point.clp_weight for c in picked) == [0.0, 1.0, 10.0]


def test_exact_tie_goes_to_grid_order():
    picked = select_models([candidate(3, 1.0, 0.2), candidate(1, 1.0, 0.2)])
    assert picked[0].point.index == 1


def test_selection_is_idempotent():
    candidates = [candidate(i, w, v) for i, (w, v) in enumerate([(0.0, 0.4), (0.0, 0.3), (1.0, 0.2), (1.0, 0.25)])]
    once = select_models(candidates)
    assert select_models(once) == once


def test_failed_candidates_are_excluded():
    picked = select_models([candidate(0, 1.0, math.nan, failed=True), candidate(1, 1.0, 0.9)])
    assert picked[0].point.index == 1
    with pytest.raises(TrainingError):
        select_models([candidate(0, 1.0, math.nan, failed=True)])
    with pytest.raises(TrainingError):
        select_models([])


# baseline

def separable_samples(n: int, seed: int):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        y = int(rng.integers(0, 2))
        noise = tuple(j for j in (1, 2) if rng.random() < 0.5)
        samples.append(LabeledSample(id=i, x=((0,) if y else ()) + noise, y=y, a=int(rng.integers(0, 2))))
    return samples


def test_baseline_single_configuration():
    samples = separable_samples(120, 0)
    space = BaselineSearchSpace(hidden_dims=(8,), num_hidden_layers=(1,), dropout_probs=(0.0,),
                                layer_norm=(False,), learning_rates=(1e-2,))
    result = train_baseline(space, samples[:100], samples[100:], feature_dim=3, group_count=2, seed=0,
                            iterations=20, epochs=3, batch_size=32)
    assert len(result.trials) == 1
    assert result.handle.input_mode == "features"


def test_baseline_reaches_perfect_accuracy_on_separable_data():
    samples = separable_samples(300, 1)
    space = BaselineSearchSpace(hidden_dims=(8,), num_hidden_layers=(1,), dropout_probs=(0.0,),
                                layer_norm=(False,), learning_rates=(3e-2,))
    result = train_baseline(space, samples[:250], samples[250:], feature_dim=3, group_count=2, seed=1,
                            epochs=60, batch_size=50, patience=None)
    val = samples[250:]
    features = np.zeros((len(val), 3))
    for row, sample in enumerate(val):
        features[row, list(sample.x)] = 1.0
    predicted = predict_proba(result.handle, features, [s.a for s in val]) > 0.5
    assert np.array_equal(predicted, np.array([s.y == 1 for s in val]))


def test_baseline_prefers_trained_candidate():
    samples = separable_samples(200, 2)
    space = BaselineSearchSpace(hidden_dims=(8,), num_hidden_layers=(1,), dropout_probs=(0.0,),
                                layer_norm=(False,), learning_rates=(0.0, 3e-2))
    result = train_baseline(space, samples[:160], samples[160:], feature_dim=3, group_count=2, seed=2,
                            epochs=30, batch_size=40, patience=None)
    assert result.learning_rate == 3e-2
    assert len(result.trials) == 2


# persistence

def test_ledger_round_trip(tmp_path):
    candidates = [candidate(0, 0.0, 0.125), candidate(1, 10.0, math.nan, failed=True)]
    candidates[0].checkpoint_path = "checkpoints/fair_000.json"
    path = tmp_path / "ledger.csv"
    write_ledger(candidates, path)
    loaded = read_ledger(path)
    assert [c.point for c in loaded] == [c.point for c in candidates]
    assert loaded[0].val_clp == 0.125
    assert loaded[0].checkpoint_path == "checkpoints/fair_000.json"
    assert loaded[1].failed and math.isnan(loaded[1].val_clp)
    assert loaded[1].checkpoint_path == ""


def test_predictor_checkpoint_round_trip():
    handle = linear_handle(3, seed=6, latent_dim=2)
    manifest, payload = encode_predictor_checkpoint(handle, seed=6, step=10)
    restored = decode_predictor_checkpoint(manifest, payload)
    assert restored.spec == handle.spec
    assert restored.input_mode == "latent" and restored.group_count == 3
    assert np.array_equal(restored.params.arrays["layer0.weight"], handle.params.arrays["layer0.weight"])
