"""Models, analytic gradients, and the error-feedback simulation loop."""

import numpy as np
import pytest

from dagc.data import LabeledDataset, synthetic_classification
from dagc.errors import BudgetInfeasibleError, ConfigError
from dagc.train import (
    Model,
    RunMetrics,
    TrainConfig,
    _component_rng,
    _ShardBatcher,
    assert_budget_parity,
    batch_loss,
    evaluate,
    init_model,
    local_gradient,
    resolve_allocation,
    resolve_weights,
    run_dsgd,
    run_simulation,
    traffic_report,
)


def small_dataset(seed=0, samples=60, features=4, classes=3):
    return synthetic_classification(
        samples, features, classes, np.random.default_rng(seed)
    )


# ---------------------------------------------------------------------------
# models and gradients


class TestInitModel:
    def test_softmax_starts_at_zero(self):
        m = init_model("softmax_regression", 5, 3)
        assert m.dim == (5 + 1) * 3
        assert np.all(m.params == 0.0)

    def test_mlp_param_count(self):
        m = init_model("mlp1", 5, 3, hidden=7, rng=np.random.default_rng(0))
        assert m.dim == (5 + 1) * 7 + (7 + 1) * 3

    def test_mlp_requires_rng(self):
        with pytest.raises(ValueError, match="rng"):
            init_model("mlp1", 5, 3)

    def test_unknown_arch(self):
        with pytest.raises(ValueError, match="architecture"):
            init_model("transformer", 5, 3)


class TestLocalGradient:
    def test_zero_params_closed_form(self):
        # at the origin softmax is uniform, so the logit residual is
        # (1/C - onehot); the weight gradient is x^T residual / B
        ds = LabeledDataset(
            np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]), 2
        )
        m = init_model("softmax_regression", 2, 2)
        g = local_gradient(m, ds, [0, 1])
        residual = np.full((2, 2), 0.5)
        residual[0, 0] -= 1.0
        residual[1, 1] -= 1.0
        residual /= 2.0
        expected_w = ds.features.T @ residual
        expected_b = residual.sum(axis=0)
        np.testing.assert_allclose(g, np.concatenate([expected_w.ravel(), expected_b]))

    @pytest.mark.parametrize("arch", ["softmax_regression", "mlp1"])
    def test_finite_difference_oracle(self, arch):
        rng = np.random.default_rng(1)
        ds = small_dataset(seed=2)
        m = init_model(arch, 4, 3, hidden=6, rng=rng)
        if arch == "softmax_regression":
            m.params[:] = rng.normal(0.0, 0.5, size=m.dim)
        batch = np.arange(20)
        g = local_gradient(m, ds, batch)
        h = 1e-5
        for coord in rng.choice(m.dim, size=min(50, m.dim), replace=False):
            saved = m.params[coord]
            m.params[coord] = saved + h
            up = batch_loss(m, ds, batch)
            m.params[coord] = saved - h
            down = batch_loss(m, ds, batch)
            m.params[coord] = saved
            numeric = (up - down) / (2 * h)
            scale = max(abs(numeric), 1e-3)
            assert abs(g[coord] - numeric) / scale <= 1e-4

    def test_duplicated_batch_invariance(self):
        ds = small_dataset(seed=3)
        m = init_model("softmax_regression", 4, 3)
        m.params[:] = 0.1
        batch = np.array([0, 5, 9])
        doubled = np.array([0, 5, 9, 0, 5, 9])
        np.testing.assert_allclose(
            local_gradient(m, ds, batch), local_gradient(m, ds, doubled)
        )

    def test_empty_batch(self):
        ds = small_dataset()
        m = init_model("softmax_regression", 4, 3)
        with pytest.raises(ValueError, match="non-empty"):
            local_gradient(m, ds, np.array([], dtype=np.int64))

    def test_loss_at_origin_is_log_classes(self):
        ds = small_dataset(seed=4)
        m = init_model("softmax_regression", 4, 3)
        assert batch_loss(m, ds) == pytest.approx(np.log(3.0))


class TestEvaluate:
    def test_constant_predictor(self):
        ds = LabeledDataset(np.zeros((5, 2)), np.full(5, 1), 3)
        m = init_model("softmax_regression", 2, 3)
        m.params[-3 + 1] = 10.0  # bias of class 1
        assert evaluate(m, ds) == 1.0

    def test_random_params_near_chance(self):
        rng = np.random.default_rng(5)
        classes = 4
        labels = np.repeat(np.arange(classes), 500)
        ds = LabeledDataset(rng.uniform(size=(2000, 6)), labels, classes)
        m = init_model("mlp1", 6, classes, rng=rng)
        acc = evaluate(m, ds)
        sigma = np.sqrt(0.25 * 0.75 / 2000)
        assert abs(acc - 0.25) <= 3 * sigma + 0.05

    def test_empty_test_set_rejected(self):
        m = init_model("softmax_regression", 2, 2)
        with pytest.raises(ValueError, match="match"):
            LabeledDataset(np.zeros((0, 2)), np.array([0]), 2)

    def test_dimension_mismatch(self):
        ds = LabeledDataset(np.zeros((2, 3)), np.array([0, 1]), 2)
        m = init_model("softmax_regression", 2, 2)
        with pytest.raises(ValueError, match="mismatch"):
            evaluate(m, ds)


# ---------------------------------------------------------------------------
# config validation


class TestTrainConfig:
    def base(self, **kw):
        cfg = dict(workers=4, skew_ratio=10.0, strategy="uniform_topk", mean_ratio=0.01)
        cfg.update(kw)
        return TrainConfig(**cfg)

    def test_valid(self):
        self.base().validate()

    def test_rejects_single_worker(self):
        with pytest.raises(ConfigError, match="workers"):
            self.base(workers=1).validate()

    def test_rejects_two_weight_sources(self):
        with pytest.raises(ConfigError, match="exactly one"):
            self.base(p_large=0.5).validate()

    def test_rejects_unknown_strategy(self):
        with pytest.raises(ConfigError, match="strategy"):
            self.base(strategy="magic").validate()

    def test_manual_requires_matching_length(self):
        with pytest.raises(ConfigError, match="length"):
            self.base(
                strategy="manual", mean_ratio=None, manual_ratios=[0.1, 0.2]
            ).validate()

    def test_relative_strategy_requires_mean_ratio(self):
        with pytest.raises(ConfigError, match="mean_ratio"):
            self.base(mean_ratio=None).validate()

    def test_absolute_strategy_requires_threshold(self):
        with pytest.raises(ConfigError, match="mean_threshold"):
            self.base(strategy="dagc_a", mean_ratio=None).validate()

    def test_rejects_idx_without_paths(self):
        with pytest.raises(ConfigError, match="idx"):
            self.base(dataset="idx").validate()


class TestResolvers:
    def test_resolve_weights_sources(self):
        w1 = resolve_weights(TrainConfig(workers=4, skew_ratio=10.0))
        assert w1.skew_ratio == pytest.approx(10.0, rel=1e-12)
        w2 = resolve_weights(TrainConfig(workers=11, p_large=0.5))
        assert w2.weights[0] == 0.5
        w3 = resolve_weights(TrainConfig(workers=2, weights=[0.7, 0.3]))
        assert w3.weights == (0.7, 0.3)

    def test_resolve_weights_deterministic_in_seed(self):
        a = resolve_weights(TrainConfig(workers=5, skew_ratio=30.0, seed=9))
        b = resolve_weights(TrainConfig(workers=5, skew_ratio=30.0, seed=9))
        assert a.weights == b.weights

    def test_resolve_allocation_kinds(self):
        base = dict(workers=3, weights=[0.5, 0.3, 0.2])
        kind, values = resolve_allocation(
            TrainConfig(strategy="uniform_topk", mean_ratio=0.01, **base)
        )
        assert (kind, values) == ("ratio", [0.01, 0.01, 0.01])
        kind, values = resolve_allocation(
            TrainConfig(strategy="dagc_a", mean_threshold=0.05, **base)
        )
        assert kind == "threshold" and len(values) == 3
        kind, values = resolve_allocation(
            TrainConfig(strategy="accordion_r", mean_ratio=0.01, **base)
        )
        assert values == [0.001] * 3  # starts at the aggressive ratio
        kind, values = resolve_allocation(
            TrainConfig(strategy="accordion_a", mean_threshold=0.02, **base)
        )
        assert values == [0.2] * 3  # starts at the aggressive threshold


# ---------------------------------------------------------------------------
# the simulation loop


def run_small(strategy="uniform_topk", **overrides):
    cfg = dict(
        num_samples=300,
        num_features=4,
        num_classes=3,
        workers=3,
        weights=[0.5, 0.3, 0.2],
        strategy=strategy,
        mean_ratio=0.1,
        iterations=40,
        eval_interval=10,
        learning_rate=0.2,
        seed=0,
    )
    cfg.update(overrides)
    return run_dsgd(TrainConfig(**cfg))


class TestRunSimulation:
    def test_identity_compression_matches_plain_sgd(self):
        ds = small_dataset(seed=6)
        test = small_dataset(seed=7, samples=30)
        shard = np.arange(len(ds))
        model = init_model("softmax_regression", 4, 3)
        run_simulation(
            model, ds, test, [shard], [1.0],
            kind="topk", params=[1.0], learning_rate=0.3, batch_size=16,
            iterations=25, eval_interval=5, seed=11,
        )
        reference = init_model("softmax_regression", 4, 3)
        batcher = _ShardBatcher(shard, 16, _component_rng(11, "worker-0"))
        for _ in range(25):
            g = local_gradient(reference, ds, batcher.next_batch())
            reference.params -= 0.3 * g
        np.testing.assert_array_equal(model.params, reference.params)

    def test_two_iteration_hand_simulation(self):
        # two workers, d = 6, full-shard batches; the expected trajectory is
        # recomputed here step by step with nothing shared but the dataset
        feats = np.array([[0.0], [0.5], [1.0], [0.25]])
        labels = np.array([0, 1, 2, 1])
        ds = LabeledDataset(feats, labels, 3)
        shards = [np.array([0, 1]), np.array([2, 3])]
        weights = [0.5, 0.5]
        model = init_model("softmax_regression", 1, 3)
        run_simulation(
            model, ds, ds, shards, weights,
            kind="topk", params=[1.0, 0.5], learning_rate=0.1, batch_size=2,
            iterations=2, eval_interval=1, seed=3,
        )

        def grad(params, idx):
            w, b = params[:3].reshape(1, 3), params[3:]
            z = feats[idx] @ w + b
            e = np.exp(z - z.max(axis=1, keepdims=True))
            probs = e / e.sum(axis=1, keepdims=True)
            probs[np.arange(len(idx)), labels[idx]] -= 1.0
            probs /= len(idx)
            return np.concatenate([(feats[idx].T @ probs).ravel(), probs.sum(0)])

        x = np.zeros(6)
        errors = [np.zeros(6), np.zeros(6)]
        k = [6, 3]  # ceil(1.0 * 6), ceil(0.5 * 6)
        for _ in range(2):
            step = np.zeros(6)
            for i, shard in enumerate(shards):
                target = errors[i] + grad(x, shard)
                keep = np.sort(np.argsort(-np.abs(target), kind="stable")[: k[i]])
                dense = np.zeros(6)
                dense[keep] = target[keep]
                errors[i] = target - dense
                step += weights[i] * dense
            x = x - 0.1 * step
        np.testing.assert_allclose(model.params, x, rtol=0, atol=1e-15)

    def test_zero_learning_rate_keeps_params_and_counts_traffic(self):
        metrics = run_small(learning_rate=0.0, iterations=20, eval_interval=5)
        assert metrics.losses == [metrics.losses[0]] * len(metrics.losses)
        assert metrics.cumulative_totals()[-1] > 0

    def test_weighted_aggregation_collapses_on_identical_shards(self):
        ds = small_dataset(seed=8)
        test = small_dataset(seed=9, samples=30)
        shard = np.arange(len(ds))
        single = init_model("softmax_regression", 4, 3)
        run_simulation(
            single, ds, test, [shard], [1.0],
            kind="topk", params=[1.0], learning_rate=0.3, batch_size=len(ds),
            iterations=10, eval_interval=5, seed=2,
        )
        pair = init_model("softmax_regression", 4, 3)
        run_simulation(
            pair, ds, test, [shard.copy(), shard.copy()], [0.6, 0.4],
            kind="topk", params=[1.0, 1.0], learning_rate=0.3, batch_size=len(ds),
            iterations=10, eval_interval=5, seed=2,
        )
        np.testing.assert_allclose(pair.params, single.params, atol=1e-12)

    def test_bitwise_determinism(self):
        a = run_small(strategy="dagc_r")
        b = run_small(strategy="dagc_r")
        assert a.to_csv() == b.to_csv()

    def test_thread_pool_matches_serial(self, monkeypatch):
        serial = run_small()
        monkeypatch.setenv("DAGC_THREADS", "4")
        threaded = run_small()
        assert threaded.to_csv() == serial.to_csv()

    def test_eval_cadence(self):
        metrics = run_small(iterations=25, eval_interval=10)
        assert metrics.iterations == [10, 20, 25]

    def test_budget_infeasible_aborts_before_running(self):
        with pytest.raises(BudgetInfeasibleError):
            run_small(
                strategy="dagc_r",
                weights=[0.98, 0.01, 0.01],
                mean_ratio=0.4,
            )

    def test_accordion_strategy_runs(self):
        metrics = run_small(strategy="accordion_r", iterations=30)
        assert len(metrics.accuracies) == 3

    def test_absolute_strategy_runs(self):
        metrics = run_small(strategy="dagc_a", mean_ratio=None, mean_threshold=0.05)
        assert metrics.cumulative_totals()[-1] >= 0


# ---------------------------------------------------------------------------
# metrics and traffic accounting


class TestRunMetrics:
    def test_csv_shape(self):
        metrics = run_small(iterations=20, eval_interval=10)
        lines = metrics.to_csv().split("\n")
        assert lines[0] == (
            "iter,loss,acc,elements_total,elements_w1,elements_w2,elements_w3"
        )
        assert lines[-1] == ""  # LF-terminated
        assert len(lines) == 2 + 2  # header + 2 eval rows + trailing empty

    def test_cumulative_traffic_nondecreasing(self):
        metrics = run_small()
        totals = metrics.cumulative_totals()
        assert np.all(np.diff(totals) >= 0)
        assert np.all((0 <= np.array(metrics.accuracies)))
        assert np.all((np.array(metrics.accuracies) <= 1))


class TestTraffic:
    @staticmethod
    def wide_run(kind_params):
        # (999 features + bias) * 10 classes = 10^4 parameters
        ds = synthetic_classification(40, 999, 10, np.random.default_rng(20))
        shards = [np.arange(i, 40, 10) for i in range(10)]
        model = init_model("softmax_regression", 999, 10)
        return run_simulation(
            model, ds, ds, shards, [0.1] * 10,
            kind="topk", params=kind_params, learning_rate=0.1, batch_size=4,
            iterations=3, eval_interval=3, seed=5,
        )

    def test_uniform_per_iteration_total(self):
        metrics = self.wide_run([0.001] * 10)
        totals = metrics.elements_per_iteration.sum(axis=1)
        np.testing.assert_array_equal(totals, [100, 100, 100])

    def test_dagc_budget_within_rounding(self):
        from dagc.alloc import WeightVector, dagc_r

        w = WeightVector(np.array([30.0, 5, 2, 1, 1, 1, 1, 1, 1, 1]) / 44.0)
        ratios = list(dagc_r(w, 0.001).ratios)
        metrics = self.wide_run(ratios)
        totals = metrics.elements_per_iteration.sum(axis=1)
        assert np.all(np.abs(totals - 100) <= 10)

    def test_traffic_report_and_parity(self):
        uniform = self.wide_run([0.001] * 10)
        report = traffic_report({"uniform": uniform})
        assert report["uniform"]["total_elements"] == 300
        assert len(report["uniform"]["per_worker_elements"]) == 10
        assert_budget_parity(uniform, uniform)

    def test_parity_raises_on_diverging_budgets(self):
        a = self.wide_run([0.001] * 10)
        b = self.wide_run([0.01] * 10)
        with pytest.raises(AssertionError, match="diverge"):
            assert_budget_parity(a, b)

    def test_report_rejects_empty(self):
        with pytest.raises(ValueError, match="no metrics"):
            traffic_report({})
