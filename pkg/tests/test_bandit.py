import math

import numpy as np
import pytest

from dro_crm import (ContractViolation, DataFormatError, LoggerSpec,
                     PolicyParams, SplitSpec, compute_clip_constant,
                     evaluate_policy, generate_bandit_log, hamming_cost,
                     ips_risk, ips_validation_score, load_bandit_log,
                     load_multilabel_svmlight, save_bandit_log,
                     save_multilabel_svmlight, split_dataset,
                     synthetic_multilabel, train_logger)
from dro_crm.bandit import SupervisedDataset
from dro_crm.policy import log_prob_matrix, logits_matrix, sigmoid


class TestSvmlightFormat:
    def test_basic_line(self, tmp_path):
        path = tmp_path / "toy.svm"
        path.write_text("0,2 1:0.5 4:1.0\n")
        ds = load_multilabel_svmlight(path, add_bias=False, n_labels=3, n_features=4)
        assert ds.Y.tolist() == [[1.0, 0.0, 1.0]]
        assert ds.X.tolist() == [[0.5, 0.0, 0.0, 1.0]]

    def test_one_based_labels_detected(self, tmp_path):
        path = tmp_path / "toy.svm"
        path.write_text("1,3 1:1.0\n2 2:1.0\n")
        ds = load_multilabel_svmlight(path, add_bias=False)
        assert ds.n_labels == 3
        assert ds.Y.tolist() == [[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]
        assert ds.label_base == 1

    def test_empty_label_list(self, tmp_path):
        path = tmp_path / "toy.svm"
        path.write_text("0 1:1.0\n 2:0.5\n")
        ds = load_multilabel_svmlight(path, add_bias=False)
        assert ds.Y[1].sum() == 0.0

    def test_empty_file_errors(self, tmp_path):
        path = tmp_path / "empty.svm"
        path.write_text("\n\n")
        with pytest.raises(DataFormatError, match="no examples"):
            load_multilabel_svmlight(path)

    def test_malformed_line_reports_lineno(self, tmp_path):
        path = tmp_path / "bad.svm"
        path.write_text("0 1:1.0\n0 broken\n")
        with pytest.raises(DataFormatError, match=":2:"):
            load_multilabel_svmlight(path)

    def test_bias_column_appended(self, tmp_path):
        path = tmp_path / "toy.svm"
        path.write_text("0 1:2.0\n")
        ds = load_multilabel_svmlight(path, add_bias=True)
        assert ds.has_bias
        assert ds.X.tolist() == [[2.0, 1.0]]

    def test_round_trip_identity(self, tmp_path):
        ds = synthetic_multilabel(10, 6, 3, seed=5)
        path = tmp_path / "rt.svm"
        save_multilabel_svmlight(ds, path)
        back = load_multilabel_svmlight(path, add_bias=False,
                                        n_features=6, n_labels=3)
        assert np.allclose(back.X, ds.X, atol=0.0)
        assert np.array_equal(back.Y, ds.Y)


class TestSplit:
    def test_fractions_and_ceiling_rule(self):
        ds = synthetic_multilabel(100, 4, 2, seed=0)
        train, valid, logger = split_dataset(ds, SplitSpec(seed=3))
        assert train.n_examples == 75
        assert valid.n_examples == 25
        assert logger.n_examples == math.ceil(0.05 * 75)

    def test_same_seed_identical(self):
        ds = synthetic_multilabel(60, 4, 2, seed=0)
        a = split_dataset(ds, SplitSpec(seed=9))
        b = split_dataset(ds, SplitSpec(seed=9))
        for x, y in zip(a, b):
            assert np.array_equal(x.X, y.X)

    def test_different_seeds_differ(self):
        ds = synthetic_multilabel(1000, 4, 2, seed=0)
        a, _, _ = split_dataset(ds, SplitSpec(seed=0))
        b, _, _ = split_dataset(ds, SplitSpec(seed=1))
        assert not np.array_equal(a.X, b.X)

    def test_partitions_disjoint(self):
        ds = synthetic_multilabel(40, 3, 2, seed=1)
        ds.X[:, 0] = np.arange(40)  # tag rows
        train, valid, logger = split_dataset(ds, SplitSpec(seed=2))
        train_ids = set(train.X[:, 0].tolist())
        valid_ids = set(valid.X[:, 0].tolist())
        assert not train_ids & valid_ids
        assert set(logger.X[:, 0].tolist()) <= train_ids

    def test_invalid_spec(self):
        with pytest.raises(ContractViolation):
            SplitSpec(train_frac=0.7, valid_frac=0.25)


class TestLoggerTraining:
    def test_always_on_label(self):
        X = np.array([[1.0, 1.0]])
        Y = np.array([[1.0]])
        ds = SupervisedDataset(X, Y)
        params = train_logger(ds, LoggerSpec())
        assert sigmoid(logits_matrix(params, X))[0, 0] > 0.5

    def test_tiny_alpha_gives_uniform(self):
        ds = synthetic_multilabel(30, 4, 3, seed=2)
        params = train_logger(ds, LoggerSpec(alpha=1e-6))
        lp = log_prob_matrix(params, ds.X, ds.Y)
        assert np.allclose(np.exp(lp), 2.0 ** -3, atol=1e-4)

    def test_likelihood_beats_zero_weights(self):
        ds = synthetic_multilabel(50, 5, 3, seed=3)
        params = train_logger(ds, LoggerSpec(alpha=1.0))
        trained = log_prob_matrix(params, ds.X, ds.Y).mean()
        baseline = log_prob_matrix(PolicyParams.zeros(3, 5), ds.X, ds.Y).mean()
        assert trained > baseline


class TestBanditGeneration:
    def test_record_count(self):
        ds = synthetic_multilabel(5, 3, 2, seed=4)
        logger = train_logger(ds, LoggerSpec())
        log = generate_bandit_log(logger, ds, delta=2, seed=0)
        assert log.n == 10

    def test_uniform_logger_action_frequency(self):
        ds = synthetic_multilabel(10_000, 2, 1, seed=5)
        logger = PolicyParams.zeros(1, 2)
        log = generate_bandit_log(logger, ds, delta=1, seed=1)
        freq = log.Y[:, 0].mean()
        assert abs(freq - 0.5) < 3 * math.sqrt(0.25 / log.n)

    def test_perfect_sample_cost_is_scaled_zero_hamming(self):
        ds = synthetic_multilabel(50, 3, 2, seed=6)
        logger = PolicyParams(np.full((2, 3), 0.0))
        log = generate_bandit_log(logger, ds, delta=1, seed=2)
        raw = log.cost_scaling.to_raw(log.costs)
        perfect = raw == 0.0
        assert perfect.any()
        assert np.allclose(log.costs[perfect], -1.0)

    def test_reproducible_bit_identical(self):
        ds = synthetic_multilabel(20, 3, 2, seed=7)
        logger = train_logger(ds, LoggerSpec())
        a = generate_bandit_log(logger, ds, delta=3, seed=5)
        b = generate_bandit_log(logger, ds, delta=3, seed=5)
        assert a.Y.tobytes() == b.Y.tobytes()
        assert a.log_propensities.tobytes() == b.log_propensities.tobytes()
        assert a.costs.tobytes() == b.costs.tobytes()
        assert a.clip_m == b.clip_m

    def test_propensities_match_reevaluation(self):
        ds = synthetic_multilabel(30, 3, 2, seed=8)
        logger = train_logger(ds, LoggerSpec())
        log = generate_bandit_log(logger, ds, delta=2, seed=3)
        again = log_prob_matrix(logger, log.X, log.Y)
        assert np.abs(again - log.log_propensities).max() < 1e-12

    def test_mean_cost_matches_expected_loss(self):
        ds = synthetic_multilabel(300, 3, 2, seed=9)
        logger = train_logger(ds, LoggerSpec())
        log = generate_bandit_log(logger, ds, delta=8, seed=4)
        raw = log.cost_scaling.to_raw(log.costs)
        expected = evaluate_policy(logger, ds, "expected")
        # hamming per record is bounded by q = 2: conservative 3 sigma
        sigma = 2.0 / math.sqrt(log.n)
        assert abs(raw.mean() - expected) < 3 * sigma

    def test_clip_constant_at_least_one(self):
        ds = synthetic_multilabel(40, 3, 2, seed=10)
        logger = train_logger(ds, LoggerSpec())
        log = generate_bandit_log(logger, ds, delta=1, seed=5)
        assert log.clip_m >= 1.0

    def test_delta_must_be_positive(self):
        ds = synthetic_multilabel(5, 3, 2, seed=11)
        with pytest.raises(ContractViolation):
            generate_bandit_log(PolicyParams.zeros(2, 3), ds, delta=0, seed=0)


class TestHammingAndClip:
    def test_hamming_examples(self):
        assert hamming_cost([1, 0, 1], [1, 1, 0]) == 2
        assert hamming_cost([1, 0], [1, 0]) == 0
        assert hamming_cost([1, 0, 1, 0], [0, 1, 0, 1]) == 4
        with pytest.raises(ContractViolation):
            hamming_cost([1], [1, 0])

    def test_clip_equal_propensities(self):
        assert compute_clip_constant(np.full(7, 0.3)) == 1.0

    def test_clip_interpolation_rule(self):
        p = np.arange(0.1, 1.01, 0.1)
        assert compute_clip_constant(p) == pytest.approx(0.91 / 0.19, rel=1e-12)

    def test_clip_single_element(self):
        assert compute_clip_constant(np.array([0.4])) == 1.0

    def test_clip_validates_range(self):
        with pytest.raises(ContractViolation):
            compute_clip_constant(np.array([0.0, 0.5]))


class TestEvaluation:
    def test_uniform_policy_half_q(self):
        ds = synthetic_multilabel(30, 4, 5, seed=12)
        assert evaluate_policy(PolicyParams.zeros(5, 4), ds, "expected") == pytest.approx(2.5)

    def test_perfect_policy_zero(self):
        from dro_crm import append_bias
        ds = append_bias(synthetic_multilabel(30, 4, 2, seed=13))
        # a policy with huge logits matching the labels exactly
        params = train_logger(ds, LoggerSpec(l2=1e-8, alpha=60.0, max_iters=400))
        assert evaluate_policy(params, ds, "greedy") == 0.0
        assert evaluate_policy(params, ds, "expected") < 0.05

    def test_expected_matches_monte_carlo(self):
        from dro_crm import FeatureVector, sample_action
        ds = synthetic_multilabel(3, 3, 2, seed=14)
        rng = np.random.default_rng(0)
        params = PolicyParams(0.7 * rng.normal(size=(2, 3)))
        exact = evaluate_policy(params, ds, "expected")
        rng = np.random.default_rng(1)
        draws = 100_000
        total = 0.0
        for _ in range(draws):
            i = int(rng.integers(ds.n_examples))
            y, _ = sample_action(params, FeatureVector.from_dense(ds.X[i]), rng)
            total += np.abs(y - ds.Y[i]).sum()
        sigma = 2.0 / math.sqrt(draws)
        assert abs(total / draws - exact) < 3 * sigma

    def test_unknown_mode(self):
        ds = synthetic_multilabel(5, 3, 2, seed=15)
        with pytest.raises(ContractViolation):
            evaluate_policy(PolicyParams.zeros(2, 3), ds, "other")


class TestValidationScore:
    def test_delegates_to_ips(self):
        ds = synthetic_multilabel(40, 3, 2, seed=16)
        logger = train_logger(ds, LoggerSpec())
        log = generate_bandit_log(logger, ds, delta=1, seed=6)
        params = PolicyParams(0.1 * np.ones((2, 3)))
        assert ips_validation_score(params, log) == ips_risk(params, log)

    def test_logger_scores_its_mean_cost(self):
        ds = synthetic_multilabel(40, 3, 2, seed=17)
        logger = train_logger(ds, LoggerSpec())
        log = generate_bandit_log(logger, ds, delta=2, seed=7)
        assert ips_validation_score(logger, log) == pytest.approx(
            float(log.costs.mean()), abs=1e-12)


class TestLogSerialization:
    def test_round_trip(self, tmp_path):
        ds = synthetic_multilabel(15, 3, 2, seed=18)
        logger = train_logger(ds, LoggerSpec())
        log = generate_bandit_log(logger, ds, delta=2, seed=8)
        csv_path, meta_path = tmp_path / "log.csv", tmp_path / "log.meta"
        save_bandit_log(log, csv_path, meta_path)
        back = load_bandit_log(csv_path, meta_path, ds)
        assert np.array_equal(back.Y, log.Y)
        assert np.allclose(back.log_propensities, log.log_propensities, atol=1e-14)
        assert np.allclose(back.costs, log.costs, atol=0.0)
        assert back.clip_m == log.clip_m
        assert back.delta == 2 and back.seed == 8
        assert np.array_equal(back.X, log.X)

    def test_header_checked(self, tmp_path):
        (tmp_path / "bad.csv").write_text("wrong,header\n")
        (tmp_path / "bad.meta").write_text("clip_m = 1.0\ncost_scale = 1.0\ncost_offset = 0.0\n")
        ds = synthetic_multilabel(5, 3, 2, seed=19)
        with pytest.raises(DataFormatError):
            load_bandit_log(tmp_path / "bad.csv", tmp_path / "bad.meta", ds)
