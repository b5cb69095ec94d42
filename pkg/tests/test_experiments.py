import json
import logging
from math import comb

import numpy as np
import pytest

from core.experiments import (
    ExperimentConfig,
    LatencyReport,
    ResultRow,
    best_subset_scan,
    build_stack,
    classification_data,
    emit_results,
    latency_rows,
    parse_tokenization,
    random_subset_accuracies,
    read_results,
    resolve_k,
    run_accuracy_vs_n,
    run_experiment,
    run_latency_bench,
    run_norm_experiment,
    run_specialization_table,
    stack_forward,
)
from core.result_aggregator import mean_std, stddev_statistic, summarize, unique_subset_count
from core.selection import SubsetMask, subset_masks
from core.shared import ConfigError, ShapeError, TimingError
from core.tensor_core import RngStream
from core.training import ModelSpec, build_model, evaluate_accuracy


def small_cfg(**overrides):
    values = dict(
        experiment='accuracy-vs-n', n_list=(4,), hidden_budget=16, tokens=2, token_dim=3, classes=3,
        k_list=('n/4', 'n/2'), seeds=(0, 1, 2), epochs=3, batch_size=16, learning_rate=1e-2,
        train_size=60, test_size=24, cluster_std=0.3, cluster_spread=2.0,
    )
    values.update(overrides)
    return ExperimentConfig(**values)


class TestAggregates:
    def test_stddev_statistic(self):
        assert stddev_statistic(0.95, [0.45, 0.50, 0.55]) == pytest.approx(9.0)
        assert stddev_statistic(0.5, [0.45, 0.50, 0.55]) == pytest.approx(0.0)

    def test_stddev_statistic_zero_spread(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert stddev_statistic(0.9, [0.5, 0.5]) is None
        assert 'zero spread' in caplog.text

    def test_stddev_statistic_needs_two_samples(self):
        with pytest.raises(ValueError):
            stddev_statistic(0.9, [0.5])

    def test_mean_std(self):
        assert mean_std([1.0, 3.0]) == pytest.approx((2.0, np.sqrt(2.0)))
        assert mean_std([4.0]) == (4.0, 0.0)

    def test_unique_subset_count(self):
        assert unique_subset_count([SubsetMask((0,)), SubsetMask((0,)), SubsetMask((1,))]) == 2
        assert unique_subset_count([]) == 0
        assert unique_subset_count(subset_masks(6, 3)) == comb(6, 3)

    def test_summarize(self):
        rows = [ResultRow('x', 4, 1, s, 'acc', v) for s, v in enumerate([0.5, 0.7])]
        rows.append(ResultRow('x', 4, 2, 0, 'acc', 0.9))
        summary = summarize(rows)
        assert [(s['k'], s['count']) for s in summary] == [(1, 2), (2, 1)]
        assert summary[0]['mean'] == pytest.approx(0.6)


class TestConfigHelpers:
    @pytest.mark.parametrize('spec, n, k', [('n/4', 8, 2), ('n', 8, 8), ('3', 8, 3), (' n / 2 ', 4, 2)])
    def test_resolve_k(self, spec, n, k):
        assert resolve_k(spec, n) == k

    @pytest.mark.parametrize('spec, n', [('n/4', 6), ('9', 8), ('0', 8), ('half', 8), ('n/x', 8)])
    def test_resolve_k_rejects(self, spec, n):
        with pytest.raises(ConfigError):
            resolve_k(spec, n)

    def test_tokenization(self):
        assert parse_tokenization('2x5') == (2, 5)
        with pytest.raises(ConfigError):
            parse_tokenization('2by5')

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(experiment='cifar')
        with pytest.raises(ConfigError):
            ExperimentConfig(n_list=(6,), k_list=('n/4',))
        with pytest.raises(ConfigError):
            ExperimentConfig(seeds=())
        assert ExperimentConfig(experiment='norm', n_list=(1, 10), k_list=('n/4',)).n_list == (1, 10)

    @pytest.mark.parametrize('experiment, dataset', [('specialization', 'cluster'), ('mnist', 'mnist')])
    def test_oracle_experiments_need_one_layer(self, experiment, dataset):
        with pytest.raises(ConfigError):
            ExperimentConfig(experiment=experiment, dataset=dataset, layers=2)
        assert ExperimentConfig(experiment='accuracy-vs-n', layers=2).layers == 2

    def test_result_row_rejects_non_finite(self):
        with pytest.raises(ValueError):
            ResultRow('x', 1, 1, 0, 'loss', float('nan'))


class TestResultFiles:
    def rows(self):
        return [ResultRow('norm', 10, 10, 0, 'loss_2x5_epoch0000', 0.1), ResultRow('norm', 1, 1, 0, 'm', 2.5)]

    def test_csv_header_only(self, tmp_path):
        path = tmp_path / 'empty.csv'
        emit_results([], str(path))
        assert path.read_text().splitlines() == ['experiment,n,k,seed,metric,value']

    def test_csv_round_trip_keeps_order(self, tmp_path):
        path = str(tmp_path / 'out' / 'rows.csv')
        emit_results(self.rows(), path)
        assert read_results(path) == self.rows()

    def test_json(self, tmp_path):
        path = str(tmp_path / 'rows.json')
        emit_results(self.rows(), path, 'json')
        with open(path) as f:
            assert json.load(f)[1] == {'experiment': 'norm', 'n': 1, 'k': 1, 'seed': 0, 'metric': 'm', 'value': 2.5}
        assert read_results(path) == self.rows()

    def test_bad_format(self, tmp_path):
        with pytest.raises(ConfigError):
            emit_results([], str(tmp_path / 'x.xml'), 'xml')

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / 'file'
        blocker.write_text('')
        with pytest.raises(OSError):
            emit_results([], str(blocker / 'rows.csv'))


class TestRunners:
    def test_norm_rows(self):
        cfg = ExperimentConfig(experiment='norm', dataset='norm', head='sum', n_list=(1, 10), k_list=('n',),
                               seeds=(0,), epochs=3, batch_size=32, tokenizations=('2x5',))
        rows = run_norm_experiment(cfg)
        per_n = {n: [r for r in rows if r.n == n] for n in (1, 10)}
        assert [len(v) for v in per_n.values()] == [3, 3]
        assert [r.metric for r in per_n[1]] == ['loss_2x5_epoch0000', 'loss_2x5_epoch0001', 'loss_2x5_epoch0002']
        assert run_norm_experiment(cfg) == rows

    def test_norm_needs_summation_head(self):
        with pytest.raises(ConfigError):
            run_norm_experiment(ExperimentConfig(experiment='norm', dataset='norm', head='linear'))

    def test_accuracy_vs_n_rows(self):
        cfg = small_cfg(n_list=(4, 8))
        rows = run_accuracy_vs_n(cfg)
        for n in (4, 8):
            alg = [r for r in rows if r.n == n and r.metric == 'algorithm1_accuracy']
            assert sorted(r.k for r in alg) == [n // 4, n // 2]
            assert len([r for r in rows if r.n == n and r.metric == 'random_accuracy_seed']) == 2 * 3
            assert all(0.0 <= r.value <= 1.0 for r in alg)

    def test_accuracy_vs_n_with_given_models(self):
        cfg = small_cfg()
        data = classification_data(cfg, 0)
        model = build_model(cfg.model_spec(4), RngStream(0, 'given'))
        rows = run_accuracy_vs_n(cfg, models={4: model}, data=data)
        [full] = [r for r in rows if r.metric == 'full_accuracy']
        assert full.value == evaluate_accuracy(model, data.test)

    def test_accuracy_vs_n_missing_model(self):
        cfg = small_cfg(n_list=(4, 8))
        model = build_model(cfg.model_spec(4), RngStream(0, 'given'))
        with pytest.raises(ConfigError):
            run_accuracy_vs_n(cfg, models={4: model})

    def test_specialization_rows(self):
        cfg = small_cfg(experiment='specialization', k_list=('n/4',))
        rows = run_specialization_table(cfg)
        metrics = {r.metric: r.value for r in rows}
        assert metrics['dominance_violations'] == 0
        assert metrics['best_subset_accuracy'] >= metrics['algorithm1_accuracy']
        assert 0 <= metrics['unique_best_subsets'] <= comb(4, 1)
        assert {r.k for r in rows if r.metric != 'full_accuracy'} == {1}

    def test_specialization_rejects_fractional_k(self):
        cfg = small_cfg(experiment='specialization', n_list=(6,), k_list=('1',))
        with pytest.raises(ConfigError):
            run_specialization_table(cfg)

    def test_specialization_rejects_stacked_models(self):
        cfg = small_cfg(experiment='specialization', k_list=('n/4',))
        cfg.layers = 2
        with pytest.raises(ConfigError):
            run_specialization_table(cfg)

    def test_full_budget_methods_agree(self):
        cfg = small_cfg()
        data = classification_data(cfg, 0)
        model = build_model(ModelSpec(tokens=2, token_dim=3, n=2, hidden_budget=8, classes=3), RngStream(1, 'm'))
        full = evaluate_accuracy(model, data.test)
        found, _ = best_subset_scan(model, data.test, 2)
        assert evaluate_accuracy(model, data.test, k=2) == full
        assert float(np.mean(found)) == full
        assert random_subset_accuracies(model, data.test, 2, (0, 1), 'x') == [full, full]

    def test_mnist_requires_files(self, tmp_path):
        cfg = ExperimentConfig(experiment='mnist', dataset='mnist', mnist_dir=str(tmp_path), n_list=(4,))
        with pytest.raises(ConfigError):
            run_experiment(cfg)


class TestLatency:
    def test_report_counts(self):
        stack = build_stack(2, 4, 3, 8)
        reports = run_latency_bench(stack, [4, 1], [1, 3], tokens=2, warmup=1, timed=3)
        assert [(r.k, r.batch_size, r.mode) for r in reports] == [
            (4, 1, 'algorithm1'), (1, 1, 'algorithm1'), (4, 1, 'forward'),
            (4, 3, 'algorithm1'), (1, 3, 'algorithm1'), (4, 3, 'forward'),
        ]
        assert all(len(r.samples_ms) == 3 and r.mean > 0 for r in reports)
        rows = latency_rows(reports, 4)
        assert len(rows) == 12 and rows[0].metric == 'latency_ms_b1' and rows[1].metric == 'latency_ms_b1_std'

    def test_stack_full_k_matches_plain(self, stream):
        stack = build_stack(2, 4, 3, 8)
        xs = stream.normal((5, 2, 3))
        assert np.array_equal(stack_forward(stack, xs, 4), stack_forward(stack, xs))

    def test_nonpositive_counts(self):
        stack = build_stack(1, 2, 2, 4)
        with pytest.raises(ConfigError):
            run_latency_bench(stack, [1], [1], tokens=2, warmup=0, timed=1)
        with pytest.raises(ShapeError):
            run_latency_bench(stack, [3], [1], tokens=2, warmup=1, timed=1)

    def test_stalled_timer_is_rejected(self, monkeypatch):
        stack = build_stack(1, 2, 2, 4)
        monkeypatch.setattr('core.experiments.time.perf_counter', lambda: 1.0)
        with pytest.raises(TimingError):
            run_latency_bench(stack, [1], [1], tokens=2, warmup=1, timed=1)

    def test_report_statistics(self):
        report = LatencyReport(k=1, batch_size=1, warmup=1, timed=2, samples_ms=[1.0, 3.0])
        assert report.mean == 2.0 and report.std == pytest.approx(np.sqrt(2.0))
