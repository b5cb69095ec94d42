"""
Result Aggregator - summary statistics over experiment result rows
"""
import logging
from collections import defaultdict

import numpy as np

logger = logging.getLogger(__name__)


def mean_std(values):
    """Mean and sample standard deviation (n - 1 denominator; 0.0 for a single value)."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise ValueError("mean_std needs at least one value")
    std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return float(np.mean(values)), std


def stddev_statistic(alg_accuracy, random_accuracies):
    """
    Number of sample standard deviations by which alg_accuracy exceeds the
    mean random accuracy. None (with a warning) when the spread is zero.
    """
    randoms = list(random_accuracies)
    if len(randoms) < 2:
        raise ValueError(f"stddev_statistic needs at least 2 random samples, got {len(randoms)}")
    mean, std = mean_std(randoms)
    if std == 0.0:
        logger.warning("random accuracies have zero spread; std-dev statistic undefined, row omitted")
        return None
    return (alg_accuracy - mean) / std


def unique_subset_count(masks):
    return len({tuple(getattr(m, 'indices', m)) for m in masks})


def summarize(rows):
    """
    Groups rows by (experiment, n, k, metric) and aggregates over seeds.

    Returns a list of dicts with mean, std and count, in first-seen order.
    """
    groups = defaultdict(list)
    for row in rows:
        groups[(row.experiment, row.n, row.k, row.metric)].append(row.value)
    summary = []
    for (experiment, n, k, metric), values in groups.items():
        mean, std = mean_std(values)
        summary.append({
            'experiment': experiment,
            'n': n,
            'k': k,
            'metric': metric,
            'mean': mean,
            'std': std,
            'count': len(values),
        })
    return summary
