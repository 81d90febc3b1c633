import math

import numpy as np
import pytest

from privlin import (
    BudgetExhaustedError,
    BudgetState,
    DpSgdConfig,
    LabeledDataset,
    MechanismSpec,
    PrivacySpec,
    PrivatePredictor,
    RngStream,
    TrainConfig,
    WrongVariantError,
    answer_queries,
    build_prediction_sensitivity,
    build_subsample_ensemble,
    ensemble_vote_counts,
    fit_predictor,
    load_predictor,
    minimize_erm,
    predict_logits,
    predict_prediction_sensitivity,
    predict_subsample_aggregate,
    save_predictor,
    softmax,
    synth_blob_pair,
    train_dpsgd,
    train_loss_perturbation,
    train_model_sensitivity,
    train_nonprivate,
    vote_distribution,
)
from privlin.data import preprocess_pair
from privlin.mechanisms import partition_indices


def blob_splits(seed=0, n_train_per_class=60, n_test_per_class=30, c=3, d=6, sep=3.5):
    raw_train, raw_test = synth_blob_pair(n_train_per_class, n_test_per_class,
                                          c, d, sep, RngStream(seed))
    train, test, _, _ = preprocess_pair(raw_train, raw_test)
    return train, test


def accuracy(predictor, test):
    answers = answer_queries(predictor, test.features)
    return float(np.mean(answers == test.label_ints()))


def spec_for(kind, eps=1.0, delta=0.0, budget=100, lam=0.1, n_models=16, dpsgd=None):
    return MechanismSpec(kind=kind, privacy=PrivacySpec(eps, delta, budget),
                         lam=lam, n_models=n_models, dpsgd=dpsgd,
                         grad_tolerance=1e-9)


class TestMechanismSpec:
    def test_dpsgd_requires_positive_delta(self):
        cfg = DpSgdConfig(clip=0.1, batch_size=10, n_steps=5, sample_rate=0.1)
        with pytest.raises(WrongVariantError):
            MechanismSpec(kind="dpsgd", privacy=PrivacySpec(1.0, 0.0), dpsgd=cfg)

    def test_dpsgd_requires_config(self):
        with pytest.raises(ValueError):
            MechanismSpec(kind="dpsgd", privacy=PrivacySpec(1.0, 1e-5))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            MechanismSpec(kind="laplace", privacy=PrivacySpec(1.0))


class TestModelSensitivity:
    def test_disabled_noise_reduces_to_nonprivate(self):
        train, test = blob_splits(1)
        spec = spec_for("model_sensitivity")
        noisy_off = train_model_sensitivity(train, spec, RngStream(5),
                                            unsafe_disable_noise=True)
        baseline = train_nonprivate(train, spec)
        np.testing.assert_array_equal(noisy_off.theta, baseline.theta)

    def test_huge_epsilon_recovers_nonprivate_predictions(self):
        train, test = blob_splits(2)
        spec = spec_for("model_sensitivity", eps=1e8)
        predictor = train_model_sensitivity(train, spec, RngStream(6))
        baseline = train_nonprivate(train, spec)
        assert np.array_equal(answer_queries(predictor, test.features),
                              answer_queries(baseline, test.features))

    def test_gaussian_variant_uses_gaussian_noise(self):
        train, _ = blob_splits(3)
        spec = spec_for("model_sensitivity", delta=1e-5)
        predictor = train_model_sensitivity(train, spec, RngStream(7))
        assert predictor.kind == "model_sensitivity"
        assert predictor.remaining_budget is None

    def test_accuracy_between_chance_and_nonprivate(self):
        train, test = blob_splits(4, n_train_per_class=67, c=3, d=6)
        spec = spec_for("model_sensitivity", eps=1.0, lam=0.1)
        baseline_acc = accuracy(train_nonprivate(train, spec), test)
        accs = [
            accuracy(train_model_sensitivity(train, spec, RngStream(100, t)), test)
            for t in range(50)
        ]
        mean_acc = float(np.mean(accs))
        assert 1.0 / 3 + 0.02 < mean_acc < baseline_acc - 0.005


class TestLossPerturbation:
    def test_disabled_noise_matches_rescaled_erm(self):
        train, _ = blob_splits(5)
        lam = 0.5
        spec = spec_for("loss_perturbation", lam=lam)
        hook = train_loss_perturbation(train, spec, RngStream(8),
                                       unsafe_disable_noise=True)
        plain = minimize_erm(train, TrainConfig(lam=lam / train.n_examples,
                                                grad_tolerance=1e-9))
        assert np.linalg.norm(hook.theta - plain) < 1e-6

    def test_accuracy_trend_in_epsilon(self):
        train, test = blob_splits(6, n_train_per_class=200, c=3, d=5)
        means = {}
        for eps in (10.0, 1.0, 0.1):
            spec = spec_for("loss_perturbation", eps=eps, lam=0.1)
            accs = [
                accuracy(train_loss_perturbation(train, spec, RngStream(200, t)), test)
                for t in range(30)
            ]
            means[eps] = float(np.mean(accs))
        assert means[10.0] >= means[1.0] - 0.02
        assert means[1.0] >= means[0.1] - 0.02
        assert means[10.0] > means[0.1]

    def test_extra_ridge_shrinks_parameters(self):
        train, _ = blob_splits(7)
        dims_shape = (train.n_features, train.n_classes)
        rng = RngStream(9).generator()
        with_ridge, without_ridge = [], []
        for _ in range(20):
            noise = rng.normal(scale=3.0, size=dims_shape)
            ridged = minimize_erm(train, TrainConfig(lam=0.1, noise_b=noise, rho=5.0,
                                                     grad_tolerance=1e-9))
            free = minimize_erm(train, TrainConfig(lam=0.1, noise_b=noise, rho=0.0,
                                                   grad_tolerance=1e-9))
            with_ridge.append(np.linalg.norm(ridged))
            without_ridge.append(np.linalg.norm(free))
        assert np.mean(with_ridge) < np.mean(without_ridge)


class TestDpSgd:
    def test_requires_positive_delta(self):
        train, _ = blob_splits(8)
        cfg = DpSgdConfig.for_dataset(train.n_examples, 30, 10, 0.1)
        spec = MechanismSpec(kind="loss_perturbation", privacy=PrivacySpec(1.0, 0.0),
                             dpsgd=cfg)
        spec.kind = "dpsgd"  # bypass constructor validation to hit the runtime check
        with pytest.raises(WrongVariantError):
            train_dpsgd(train, spec, RngStream(1))

    def test_disabled_noise_and_clip_match_plain_sgd(self):
        train, _ = blob_splits(9)
        n, d, c = train.n_examples, train.n_features, train.n_classes
        cfg = DpSgdConfig.for_dataset(n, 40, 25, clip=1e9, learning_rate=0.7)
        spec = spec_for("dpsgd", delta=1e-5, lam=0.0, dpsgd=cfg)
        predictor = train_dpsgd(train, spec, RngStream(10, 3),
                                unsafe_disable_noise=True)

        rng = RngStream(10, 3).generator()
        theta = np.zeros((d, c))
        for _ in range(cfg.n_steps):
            idx = rng.choice(n, size=cfg.batch_size, replace=False)
            xb, yb = train.features[idx], train.labels[idx]
            residual = softmax(xb @ theta) - yb
            scales = np.ones(cfg.batch_size)
            summed = xb.T @ (scales[:, None] * residual)
            theta = theta - cfg.learning_rate * (summed / cfg.batch_size)
        assert np.array_equal(predictor.theta, theta)

    def test_clip_definition(self):
        train, _ = blob_splits(10)
        n, d, c = train.n_examples, train.n_features, train.n_classes
        # One full-batch step from theta = 0 with noise off isolates clipping.
        nu = 0.5
        cfg = DpSgdConfig.for_dataset(n, n, 1, clip=nu, learning_rate=1.0)
        spec = spec_for("dpsgd", delta=1e-5, lam=0.0, dpsgd=cfg)
        predictor = train_dpsgd(train, spec, RngStream(11), unsafe_disable_noise=True)

        residual = softmax(train.features @ np.zeros((d, c))) - train.labels
        grads = train.features[:, :, None] * residual[:, None, :]
        norms = np.linalg.norm(grads.reshape(n, -1), axis=1)
        assert (norms > nu).any() and (norms < nu).any()  # both regimes present
        scales = np.maximum(1.0, norms / nu)
        clipped = grads / scales[:, None, None]
        clipped_norms = np.linalg.norm(clipped.reshape(n, -1), axis=1)
        # Over the clip: rescaled to norm exactly nu. Under it: untouched.
        np.testing.assert_allclose(clipped_norms[norms > nu], nu, rtol=1e-12)
        np.testing.assert_array_equal(clipped[norms < nu], grads[norms < nu])
        expected = -1.0 * clipped.sum(axis=0) / n
        np.testing.assert_allclose(predictor.theta, expected, atol=1e-12)

    def test_noise_variance_in_summed_gradient(self):
        train, _ = blob_splits(11)
        n = train.n_examples
        nu, lr = 0.2, 1.0
        cfg = DpSgdConfig.for_dataset(n, n, 1, clip=nu, learning_rate=lr)
        spec = spec_for("dpsgd", delta=1e-5, eps=1.0, lam=0.0, dpsgd=cfg)
        # One step from zero: theta = -lr (clipped_sum + sigma nu z) / n, so
        # Var(theta entries) across streams = (lr sigma nu / n)^2.
        thetas = np.stack([
            train_dpsgd(train, spec, RngStream(12, t)).theta for t in range(400)
        ])
        from privlin import dpsgd_sigma_for_target
        sigma = dpsgd_sigma_for_target(spec.privacy, cfg)
        target = (lr * sigma * nu / n) ** 2
        observed = thetas.var(axis=0, ddof=1)
        assert np.mean(observed) == pytest.approx(target, rel=0.15)

    def test_batch_size_validation(self):
        train, _ = blob_splits(12)
        cfg = DpSgdConfig(clip=0.1, batch_size=10 * train.n_examples, n_steps=2,
                          sample_rate=1.0)
        spec = spec_for("dpsgd", delta=1e-5, dpsgd=cfg)
        with pytest.raises(ValueError):
            train_dpsgd(train, spec, RngStream(1))


class TestPredictionSensitivity:
    def test_fresh_noise_per_query(self):
        train, test = blob_splits(13)
        spec = spec_for("prediction_sensitivity", budget=10)
        predictor = build_prediction_sensitivity(train, spec, RngStream(14))
        x = test.features[0]
        first = predict_prediction_sensitivity(predictor, x)
        second = predict_prediction_sensitivity(predictor, x)
        assert not np.array_equal(first, second)

    def test_vanishing_noise_recovers_logits(self):
        train, test = blob_splits(14)
        spec = spec_for("prediction_sensitivity", eps=1e9, budget=5)
        predictor = build_prediction_sensitivity(train, spec, RngStream(15))
        x = test.features[0]
        noisy = predict_prediction_sensitivity(predictor, x)
        exact = predict_logits(predictor.theta, x)
        np.testing.assert_allclose(noisy, exact, atol=1e-6)

    def test_noise_scale_inverse_in_budget(self):
        train, _ = blob_splits(15)
        one = build_prediction_sensitivity(
            train, spec_for("prediction_sensitivity", budget=1), RngStream(16))
        hundred = build_prediction_sensitivity(
            train, spec_for("prediction_sensitivity", budget=100), RngStream(16))
        assert hundred.noise_scale == pytest.approx(one.noise_scale / 100, rel=1e-12)

    def test_budget_refusal(self):
        train, test = blob_splits(16)
        spec = spec_for("prediction_sensitivity", budget=3)
        predictor = build_prediction_sensitivity(train, spec, RngStream(17))
        for i in range(3):
            predict_prediction_sensitivity(predictor, test.features[i])
        with pytest.raises(BudgetExhaustedError):
            predict_prediction_sensitivity(predictor, test.features[3])
        assert predictor.budget.used == 3

    def test_query_validation(self):
        train, _ = blob_splits(17)
        spec = spec_for("prediction_sensitivity", budget=5)
        predictor = build_prediction_sensitivity(train, spec, RngStream(18))
        with pytest.raises(ValueError):
            predict_prediction_sensitivity(predictor, np.zeros(train.n_features + 1))
        with pytest.raises(ValueError):
            predict_prediction_sensitivity(predictor, np.full(train.n_features, 1.0))
        assert predictor.budget.used == 0  # refused before consuming


class TestSubsampleAggregate:
    def test_partition_arithmetic(self):
        parts = partition_indices(1000, 256, RngStream(19))
        assert parts.shape == (256, 3)
        flat = parts.ravel()
        assert len(set(flat.tolist())) == flat.size  # pairwise disjoint
        assert flat.size == 768  # 232 of 1000 discarded

    def test_too_many_models(self):
        train, _ = blob_splits(18)
        with pytest.raises(ValueError):
            build_subsample_ensemble(train, spec_for("subsample_aggregate",
                                                     n_models=train.n_examples + 1),
                                     RngStream(20))

    def test_votes_sum_to_ensemble_size(self):
        train, test = blob_splits(19)
        spec = spec_for("subsample_aggregate", n_models=12)
        predictor = build_subsample_ensemble(train, spec, RngStream(21))
        counts = ensemble_vote_counts(predictor.ensemble, test.features)
        assert counts.shape == (test.n_examples, train.n_classes)
        assert np.all(counts.sum(axis=1) == 12)
        single = ensemble_vote_counts(predictor.ensemble, test.features[0])
        np.testing.assert_array_equal(single, counts[0])

    def test_one_changed_example_touches_at_most_one_submodel(self):
        train, test = blob_splits(20, n_train_per_class=40, c=3, d=5)
        spec = spec_for("subsample_aggregate", n_models=10, lam=0.1)
        ensemble_a = build_subsample_ensemble(train, spec, RngStream(22)).ensemble

        swapped = LabeledDataset(train.features.copy(), train.labels.copy())
        swapped.features[17] = swapped.features[17] * 0.5
        swapped.labels[17] = np.roll(swapped.labels[17], 1)
        ensemble_b = build_subsample_ensemble(swapped, spec, RngStream(22)).ensemble

        differing = sum(
            0 if np.array_equal(a, b) else 1
            for a, b in zip(ensemble_a, ensemble_b)
        )
        assert differing <= 1
        counts_a = ensemble_vote_counts(ensemble_a, test.features)
        counts_b = ensemble_vote_counts(ensemble_b, test.features)
        assert np.abs(counts_a - counts_b).max() <= 1

    def test_vote_distribution_closed_form(self):
        probs = vote_distribution([2, 1, 0], math.log(2.0))
        np.testing.assert_allclose(probs, [4 / 7, 2 / 7, 1 / 7], rtol=1e-12)

    def test_zero_beta_is_uniform(self):
        probs = vote_distribution([7, 1, 0, 4], 0.0)
        np.testing.assert_allclose(probs, 0.25, rtol=1e-12)

    def test_sampling_frequencies_match_closed_form(self):
        # Hand-built ensemble casting votes (2, 1, 0) on the query e1.
        def voter(target):
            theta = np.zeros((2, 3))
            theta[0, target] = 1.0
            return theta

        ensemble = np.stack([voter(0), voter(0), voter(1)])
        draws = 20000
        predictor = PrivatePredictor(
            kind="subsample_aggregate", privacy=PrivacySpec(1.0, 0.0, draws),
            ensemble=ensemble, vote_beta=math.log(2.0),
            budget=BudgetState(draws), rng=RngStream(23).generator())
        x = np.array([1.0, 0.0])
        np.testing.assert_array_equal(ensemble_vote_counts(ensemble, x), [2, 1, 0])
        labels = np.array([predict_subsample_aggregate(predictor, x)
                           for _ in range(draws)])
        freqs = np.bincount(labels, minlength=3) / draws
        expected = np.array([4 / 7, 2 / 7, 1 / 7])
        ses = np.sqrt(expected * (1 - expected) / draws)
        assert np.all(np.abs(freqs - expected) <= 3 * ses)

    def test_budget_refusal(self):
        train, test = blob_splits(21)
        spec = spec_for("subsample_aggregate", budget=2, n_models=8)
        predictor = build_subsample_ensemble(train, spec, RngStream(24))
        predict_subsample_aggregate(predictor, test.features[0])
        predict_subsample_aggregate(predictor, test.features[1])
        with pytest.raises(BudgetExhaustedError):
            predict_subsample_aggregate(predictor, test.features[2])


class TestDispatchAndBudgets:
    def test_training_side_predictors_answer_unlimited_queries(self):
        train, test = blob_splits(22)
        for kind in ("model_sensitivity", "loss_perturbation", "nonprivate"):
            spec = spec_for(kind, budget=2)
            predictor = fit_predictor(train, spec, RngStream(25))
            answers = answer_queries(predictor, test.features)  # more than budget
            assert answers.shape == (test.n_examples,)
            repeat = answer_queries(predictor, test.features)
            assert np.array_equal(answers, repeat)  # frozen parameters

    def test_prediction_side_budget_is_exact(self):
        train, test = blob_splits(23)
        budget = 7
        for kind in ("prediction_sensitivity", "subsample_aggregate"):
            spec = spec_for(kind, budget=budget, n_models=8)
            predictor = fit_predictor(train, spec, RngStream(26))
            answer_queries(predictor, test.features[:budget])
            assert predictor.budget.used == budget
            with pytest.raises(BudgetExhaustedError):
                predictor.predict(test.features[0])


class TestSerialization:
    def test_round_trip_training_side(self, tmp_path):
        train, test = blob_splits(24)
        predictor = fit_predictor(train, spec_for("model_sensitivity"), RngStream(27))
        path = tmp_path / "model.npz"
        save_predictor(path, predictor)
        loaded = load_predictor(path)
        assert loaded.kind == predictor.kind
        assert loaded.privacy == predictor.privacy
        assert np.array_equal(loaded.theta, predictor.theta)
        assert loaded.remaining_budget is None

    def test_round_trip_resumes_noise_stream(self, tmp_path):
        train, test = blob_splits(25)
        spec = spec_for("prediction_sensitivity", budget=10)
        predictor = build_prediction_sensitivity(train, spec, RngStream(28))
        predict_prediction_sensitivity(predictor, test.features[0])
        predict_prediction_sensitivity(predictor, test.features[1])
        path = tmp_path / "pred.npz"
        save_predictor(path, predictor)

        original_next = predict_prediction_sensitivity(predictor, test.features[2])
        loaded = load_predictor(path)
        assert loaded.budget.used == 2
        loaded_next = predict_prediction_sensitivity(loaded, test.features[2])
        np.testing.assert_array_equal(loaded_next, original_next)

    def test_round_trip_ensemble(self, tmp_path):
        train, test = blob_splits(26)
        spec = spec_for("subsample_aggregate", budget=5, n_models=6)
        predictor = build_subsample_ensemble(train, spec, RngStream(29))
        path = tmp_path / "ens.npz"
        save_predictor(path, predictor)
        loaded = load_predictor(path)
        assert np.array_equal(loaded.ensemble, predictor.ensemble)
        assert loaded.vote_beta == predictor.vote_beta
        a = predict_subsample_aggregate(predictor, test.features[0])
        b = predict_subsample_aggregate(loaded, test.features[0])
        assert a == b  # identical rng state resumes identically
