"""
Experiment runners: norm regression across n, the specialization table,
accuracy versus n, latency of subset-pruned inference, and the opt-in MNIST
profile. Every runner returns ResultRow lists; emit_results writes them.
"""
import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from core.datasets import (
    ClassificationData,
    ClusterTaskConfig,
    NormTaskConfig,
    gen_cluster_dataset,
    load_mnist_dir,
    mnist_available,
    mnist_classification,
)
from core.result_aggregator import mean_std, stddev_statistic, unique_subset_count
from core.selection import algorithm1_batch, exhaustive_best_subset, random_active, subset_count
from core.shared import ConfigError, ShapeError, TimingError
from core.softmoe_layer import build_layer, forward_batch, mask_to_active
from core.tensor_core import RngStream
from core.training import (
    ModelSpec,
    TrainingStreams,
    build_model,
    correct_flags,
    evaluate_accuracy,
    train_model,
)

logger = logging.getLogger(__name__)

EXPERIMENTS = ('norm', 'specialization', 'accuracy-vs-n', 'latency', 'mnist')
RESULT_FIELDS = ('experiment', 'n', 'k', 'seed', 'metric', 'value')


@dataclass
class ExperimentConfig:
    experiment: str = 'specialization'
    layers: int = 1
    n_list: tuple = (8,)
    hidden_budget: int = 64
    tokens: int = 4
    token_dim: int = 8
    head: str = 'linear'
    classes: int = 10
    dataset: str = 'cluster'
    k_list: tuple = ('n/4',)
    seeds: tuple = tuple(range(10))
    epochs: int = 30
    batch_size: int = 64
    steps_per_epoch: int = 1
    learning_rate: float = 1e-3
    stop_at_accuracy: float = None
    accuracy_tolerance: float = 0.005
    train_size: int = 4000
    test_size: int = 2000
    cluster_std: float = 1.0
    cluster_spread: float = 1.0
    tokenizations: tuple = ('2x5', '5x2')
    batch_sizes: tuple = (1, 100)
    warmup: int = 100
    timed: int = 100
    mnist_dir: str = None
    normalize_pixels: bool = True
    listing_order: bool = False
    output: str = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {', '.join(EXPERIMENTS)}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if not self.n_list or min(self.n_list) < 1:
            raise ConfigError("n_list must hold positive expert counts")
        if self.dataset not in ('cluster', 'norm', 'mnist'):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and steps_per_epoch >= 1 are required")
        if self.warmup < 1 or self.timed < 1:
            raise ConfigError("warmup and timed pass counts must be positive")
        if self.experiment in ('specialization', 'mnist') and self.layers != 1:
            raise ConfigError(f"{self.experiment} compares against the exhaustive oracle and needs layers = 1")
        if self.experiment != 'norm':
            for n in self.n_list:
                for spec in self.k_list:
                    resolve_k(spec, n)
        for tok in self.tokenizations:
            parse_tokenization(tok)
        return self

    def model_spec(self, n, tokens=None, token_dim=None):
        return ModelSpec(
            layers=self.layers,
            tokens=tokens or self.tokens,
            token_dim=token_dim or self.token_dim,
            n=n,
            hidden_budget=self.hidden_budget,
            head=self.head,
            classes=self.classes,
        )


def resolve_k(spec, n):
    """Integer k for a k_list entry: a plain integer or an 'n/q' fraction of n."""
    text = str(spec).strip().replace(' ', '')
    if text.startswith('n/'):
        try:
            q = int(text[2:])
        except ValueError:
            raise ConfigError(f"bad k fraction {spec!r}")
        if q < 1 or n % q != 0:
            raise ConfigError(f"k = {text} is not integral for n = {n}")
        k = n // q
    elif text == 'n':
        k = n
    else:
        try:
            k = int(text)
        except ValueError:
            raise ConfigError(f"bad k entry {spec!r}")
    if not 1 <= k <= n:
        raise ConfigError(f"k = {k} must satisfy 1 <= k <= n = {n}")
    return k


def parse_tokenization(text):
    try:
        m, d = (int(p) for p in str(text).lower().split('x'))
    except ValueError:
        raise ConfigError(f"bad tokenization {text!r}; expected MxD")
    return m, d


@dataclass
class ResultRow:
    experiment: str
    n: int
    k: int
    seed: int
    metric: str
    value: float

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"non-finite result value for {self.metric}")


@dataclass
class LatencyReport:
    k: int
    batch_size: int
    warmup: int
    timed: int
    mode: str = 'algorithm1'
    samples_ms: list = field(default_factory=list)

    @property
    def mean(self):
        return float(np.mean(self.samples_ms))

    @property
    def std(self):
        return float(np.std(self.samples_ms, ddof=1)) if len(self.samples_ms) > 1 else 0.0


# --- Shared helpers ---

def _streams(seed, name):
    root = RngStream(seed, name)
    return root.child('init'), TrainingStreams(data=root.child('data'), shuffle=root.child('shuffle'))


def classification_data(cfg, seed):
    if cfg.dataset == 'mnist':
        directory = cfg.mnist_dir
        if not mnist_available(directory):
            raise ConfigError(f"MNIST IDX files not found in {directory!r}")
        return mnist_classification(load_mnist_dir(directory), cfg.normalize_pixels)
    if cfg.dataset != 'cluster':
        raise ConfigError(f"{cfg.experiment} needs a classification dataset, got {cfg.dataset!r}")
    task = ClusterTaskConfig(
        classes=cfg.classes, tokens=cfg.tokens, token_dim=cfg.token_dim, std=cfg.cluster_std,
        spread=cfg.cluster_spread, train_size=cfg.train_size, test_size=cfg.test_size,
    )
    train, test = gen_cluster_dataset(task, RngStream(seed, 'cluster-data'))
    return ClassificationData(train=train, test=test, classes=cfg.classes)


def train_classifier(cfg, n, data, seed):
    """Trains one model for n experts; stops at the first epoch reaching the target accuracy."""
    init, streams = _streams(seed, f"{cfg.experiment}/n{n}")
    if cfg.dataset == 'mnist':
        spec = cfg.model_spec(n, tokens=4, token_dim=196)
    else:
        spec = cfg.model_spec(n)
    if spec.head != 'linear':
        raise ConfigError(f"{cfg.experiment} needs a linear head")
    model = build_model(spec, init)
    trace = train_model(model, data, cfg.epochs, cfg.batch_size, streams,
                        stop_at_accuracy=cfg.stop_at_accuracy, learning_rate=cfg.learning_rate)
    accuracy = evaluate_accuracy(model, data.test)
    if cfg.stop_at_accuracy is not None and abs(accuracy - cfg.stop_at_accuracy) > cfg.accuracy_tolerance:
        logger.warning("n=%d reached %.4f test accuracy, outside %.4f +- %.4f",
                       n, accuracy, cfg.stop_at_accuracy, cfg.accuracy_tolerance)
    return model, trace, accuracy


def random_subset_accuracies(model, test, k, seeds, name):
    """Test accuracy with an independent uniform k-subset per test point, once per seed."""
    n = model.spec.n
    out = []
    for seed in seeds:
        active = random_active(n, k, len(test), RngStream(seed, f"{name}/random/n{n}/k{k}"))
        out.append(evaluate_accuracy(model, test, active=active))
    return out


def _random_rows(cfg, n, k, model, test, rows):
    accs = random_subset_accuracies(model, test, k, cfg.seeds, cfg.experiment)
    for seed, acc in zip(cfg.seeds, accs):
        rows.append(ResultRow(cfg.experiment, n, k, seed, 'random_accuracy_seed', acc))
    mean, std = mean_std(accs)
    rows.append(ResultRow(cfg.experiment, n, k, cfg.seeds[0], 'random_accuracy', mean))
    rows.append(ResultRow(cfg.experiment, n, k, cfg.seeds[0], 'random_accuracy_std', std))
    return accs


def _stddev_row(cfg, n, k, alg, accs, rows):
    if len(accs) < 2:
        return
    stat = stddev_statistic(alg, accs)
    if stat is not None:
        rows.append(ResultRow(cfg.experiment, n, k, cfg.seeds[0], 'stddev_statistic', stat))


def best_subset_scan(model, test, k):
    """Exhaustive oracle over the test set: per-point found flags and the masks that were found."""
    found = np.zeros(len(test), dtype=bool)
    masks = []
    for i in range(len(test)):
        hit, mask = exhaustive_best_subset(model, test.inputs[i], int(test.labels[i]), k)
        found[i] = hit
        if hit:
            masks.append(mask)
    return found, masks


# --- Runners ---

def run_norm_experiment(cfg):
    """Per-(tokenization, n, seed, epoch) loss rows; summation head, H = 10 d."""
    if cfg.head != 'sum' or cfg.dataset != 'norm':
        raise ConfigError("the norm experiment needs head = sum and dataset = norm")
    rows = []
    for tok in cfg.tokenizations:
        m, d = parse_tokenization(tok)
        task = NormTaskConfig(input_dim=m * d, tokens=m, token_dim=d, batch_size=cfg.batch_size)
        for n in cfg.n_list:
            for seed in cfg.seeds:
                init, streams = _streams(seed, f"norm/{tok}/n{n}")
                spec = ModelSpec(layers=cfg.layers, tokens=m, token_dim=d, n=n,
                                 hidden_budget=10 * d, head='sum')
                model = build_model(spec, init)
                trace = train_model(model, task, cfg.epochs, cfg.batch_size, streams,
                                    learning_rate=cfg.learning_rate, steps_per_epoch=cfg.steps_per_epoch)
                for r in trace.rows:
                    rows.append(ResultRow('norm', n, n, seed, norm_loss_metric(m, d, r.epoch), r.loss))
    return rows


def norm_loss_metric(m, d, epoch):
    return f"loss_{m}x{d}_epoch{epoch:04d}"


def run_specialization_table(cfg, data=None):
    """
    For each n with k = n/4: full, exhaustive best-subset, top-k selection and
    random-subset accuracies, the std-dev statistic and the number of unique
    best subsets.
    """
    if cfg.layers != 1:
        raise ConfigError("the specialization table needs single-layer models")
    rows = []
    data = data or classification_data(cfg, cfg.seeds[0])
    for n in cfg.n_list:
        if n % 4 != 0:
            raise ConfigError(f"k = n/4 is not integral for n = {n}")
        k = n // 4
        model, _, full = train_classifier(cfg, n, data, cfg.seeds[0])
        rows.append(ResultRow(cfg.experiment, n, n, cfg.seeds[0], 'full_accuracy', full))

        found, masks = best_subset_scan(model, data.test, k)
        alg_correct = correct_flags(model, data.test, k=k, listing_order=cfg.listing_order)
        violations = int(np.sum(alg_correct & ~found))
        if violations:
            logger.warning("n=%d: %d points where top-k selection is correct but the oracle found nothing", n, violations)
        alg = float(np.mean(alg_correct))
        rows.append(ResultRow(cfg.experiment, n, k, cfg.seeds[0], 'best_subset_accuracy', float(np.mean(found))))
        rows.append(ResultRow(cfg.experiment, n, k, cfg.seeds[0], 'algorithm1_accuracy', alg))
        rows.append(ResultRow(cfg.experiment, n, k, cfg.seeds[0], 'dominance_violations', violations))
        accs = _random_rows(cfg, n, k, model, data.test, rows)
        _stddev_row(cfg, n, k, alg, accs, rows)
        cap = min(len(data.test), subset_count(n, k))
        rows.append(ResultRow(cfg.experiment, n, k, cfg.seeds[0], 'unique_best_subsets',
                              min(unique_subset_count(masks), cap)))
    return rows


def run_accuracy_vs_n(cfg, models=None, data=None):
    """
    Top-k selection and mean random accuracy on every (n, k) grid cell.

    `models` (n -> trained Model) skips training; when given it must cover
    every n in the config.
    """
    if models is not None:
        missing = [n for n in cfg.n_list if n not in models]
        if missing:
            raise ConfigError(f"no trained model for n = {missing}")
    rows = []
    data = data or classification_data(cfg, cfg.seeds[0])
    for n in cfg.n_list:
        if models is not None:
            model = models[n]
            full = evaluate_accuracy(model, data.test)
        else:
            model, _, full = train_classifier(cfg, n, data, cfg.seeds[0])
        rows.append(ResultRow(cfg.experiment, n, n, cfg.seeds[0], 'full_accuracy', full))
        for spec in cfg.k_list:
            k = resolve_k(spec, n)
            alg = evaluate_accuracy(model, data.test, k=k, listing_order=cfg.listing_order)
            rows.append(ResultRow(cfg.experiment, n, k, cfg.seeds[0], 'algorithm1_accuracy', alg))
            accs = _random_rows(cfg, n, k, model, data.test, rows)
            _stddev_row(cfg, n, k, alg, accs, rows)
    return rows


def run_mnist_profile(cfg):
    """Opt-in MNIST reproduction: one model per n, then the specialization metrics."""
    if cfg.dataset != 'mnist':
        raise ConfigError("the mnist profile needs dataset = mnist")
    data = classification_data(cfg, cfg.seeds[0])
    return run_specialization_table(cfg, data=data)


def build_stack(layers, n, d, hidden_budget, seed=0):
    root = RngStream(seed, 'latency-stack')
    return [build_layer(d, n, hidden_budget, root.child(f"layer{i}")) for i in range(layers)]


def stack_forward(stack, xs, k=None):
    """One pass through every layer; k = None is the plain forward pass."""
    h = xs
    for layer in stack:
        if k is None:
            h = forward_batch(layer, h, mask_to_active(layer.n, None, h.shape[0])).output
        else:
            h = algorithm1_batch(layer, h, k).output
    return h


def run_latency_bench(stack, k_list, batch_sizes, tokens, warmup=100, timed=100, seed=0, include_plain=True):
    """
    Wall-clock milliseconds per forward pass through the whole stack, after
    `warmup` untimed passes, for every (k, batch size) cell.
    """
    if warmup < 1 or timed < 1:
        raise ConfigError("warmup and timed counts must be positive")
    n, d = stack[0].n, stack[0].d
    for k in k_list:
        if not 1 <= k <= n:
            raise ShapeError(f"k = {k} must satisfy 1 <= k <= n = {n}")
    reports = []
    stream = RngStream(seed, 'latency-inputs')
    cells = [(k, 'algorithm1') for k in k_list]
    if include_plain:
        cells.append((n, 'forward'))
    for batch in batch_sizes:
        xs = stream.normal((batch, tokens, d))
        for k, mode in cells:
            budget = None if mode == 'forward' else k
            for _ in range(warmup):
                stack_forward(stack, xs, budget)
            report = LatencyReport(k=k, batch_size=batch, warmup=warmup, timed=timed, mode=mode)
            for _ in range(timed):
                start = time.perf_counter()
                stack_forward(stack, xs, budget)
                elapsed_ms = (time.perf_counter() - start) * 1e3
                if elapsed_ms <= 0.0:
                    raise TimingError(f"timer reported {elapsed_ms} ms for a forward pass")
                report.samples_ms.append(elapsed_ms)
            reports.append(report)
    return reports


def latency_rows(reports, n):
    rows = []
    for r in reports:
        metric = f"latency_ms_b{r.batch_size}" if r.mode == 'algorithm1' else f"forward_latency_ms_b{r.batch_size}"
        rows.append(ResultRow('latency', n, r.k, 0, metric, r.mean))
        rows.append(ResultRow('latency', n, r.k, 0, metric + '_std', r.std))
    return rows


def run_latency_experiment(cfg):
    n = cfg.n_list[0]
    stack = build_stack(cfg.layers, n, cfg.token_dim, cfg.hidden_budget, cfg.seeds[0])
    ks = sorted({resolve_k(spec, n) for spec in cfg.k_list}, reverse=True)
    reports = run_latency_bench(stack, ks, cfg.batch_sizes, cfg.tokens, cfg.warmup, cfg.timed, cfg.seeds[0])
    return latency_rows(reports, n), reports


RUNNERS = {
    'norm': run_norm_experiment,
    'specialization': run_specialization_table,
    'accuracy-vs-n': run_accuracy_vs_n,
    'latency': lambda cfg: run_latency_experiment(cfg)[0],
    'mnist': run_mnist_profile,
}


def run_experiment(cfg):
    return RUNNERS[cfg.experiment](cfg)


# --- Result files ---

def _row_dict(row):
    d = asdict(row)
    d['value'] = float(d['value'])
    return d


def emit_results(rows, path, fmt='csv'):
    """Writes rows in their given order as CSV (with header) or a JSON array."""
    if fmt not in ('csv', 'json'):
        raise ConfigError(f"unknown result format {fmt!r}")
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, 'w', newline='') as f:
        if fmt == 'json':
            json.dump([_row_dict(r) for r in rows], f, indent=2)
            f.write('\n')
        else:
            writer = csv.writer(f)
            writer.writerow(RESULT_FIELDS)
            for r in rows:
                writer.writerow([r.experiment, r.n, r.k, r.seed, r.metric, repr(float(r.value))])
    return path


def read_results(path):
    with open(path, newline='') as f:
        if path.endswith('.json'):
            return [ResultRow(**d) for d in json.load(f)]
        reader = csv.DictReader(f)
        return [ResultRow(r['experiment'], int(r['n']), int(r['k']), int(r['seed']), r['metric'], float(r['value']))
                for r in reader]
