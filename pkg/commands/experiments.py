import os

import click
from flask import Blueprint, current_app
from slugify import slugify

from core.experiments import (
    EXPERIMENTS,
    build_stack,
    emit_results,
    latency_rows,
    run_experiment,
    run_latency_bench,
)
from core.run_config import load_run_config
from core.shared import command_guard

experiments_bp = Blueprint('experiments', __name__, cli_group=None)


def default_output(name, fmt):
    return os.path.join(current_app.config['OUT_DIR'], f"{slugify(name)}.{fmt}")


def _format_for(path):
    return 'json' if path.endswith('.json') else 'csv'


@experiments_bp.cli.command('experiment')
@click.argument('name', type=click.Choice(EXPERIMENTS))
@click.option('--config', 'config_path', default=None, help='Run config (key = value lines).')
@click.option('--out', 'out_path', default=None, help='Result file (.csv or .json).')
@click.option('--seed', type=int, default=None, help='Override the config seeds with one seed.')
@click.option('--mnist-dir', default=None, help='Directory holding the MNIST IDX files.')
@command_guard
def cmd_experiment(name, config_path, out_path, seed, mnist_dir):
    """Run one of the experiments and emit its result rows."""
    overrides = {
        'experiment': name,
        'seeds': (seed,) if seed is not None else None,
        'mnist_dir': mnist_dir or current_app.config.get('MNIST_DIR'),
    }
    cfg = load_run_config(config_path, overrides=overrides)
    out_path = out_path or cfg.output or default_output(name, 'csv')

    print(f"🚀 Running {name} experiment over n = {', '.join(str(n) for n in cfg.n_list)}")
    rows = run_experiment(cfg)
    emit_results(rows, out_path, _format_for(out_path))
    print(f"✅ {len(rows)} result rows written to {out_path}")


@experiments_bp.cli.command('bench')
@click.option('--layers', type=int, default=6, show_default=True)
@click.option('--experts', type=int, default=8, show_default=True)
@click.option('--dim', type=int, default=256, show_default=True)
@click.option('--tokens', type=int, default=16, show_default=True)
@click.option('--hidden', type=int, default=2048, show_default=True, help='Hidden units per expert.')
@click.option('--warmup', type=int, default=100, show_default=True)
@click.option('--timed', type=int, default=100, show_default=True)
@click.option('--batch-sizes', default='1,100', show_default=True)
@click.option('--seed', type=int, default=0)
@click.option('--out', 'out_path', default=None, help='Result file (.csv or .json).')
@command_guard
def cmd_bench(layers, experts, dim, tokens, hidden, warmup, timed, batch_sizes, seed, out_path):
    """Latency of top-k pruned inference for k = n, n/2, n/4."""
    batches = [int(b) for b in batch_sizes.split(',') if b.strip()]
    ks = sorted({experts, max(1, experts // 2), max(1, experts // 4)}, reverse=True)
    stack = build_stack(layers, experts, dim, hidden * experts, seed)

    print(f"🚀 Benchmarking {layers} layers, n={experts}, d={dim}, hidden={hidden}, k in {ks}")
    reports = run_latency_bench(stack, ks, batches, tokens, warmup, timed, seed)
    for r in reports:
        print(f"ℹ️  {r.mode:<10} k={r.k:<3} batch={r.batch_size:<4} {r.mean:9.3f} ms +- {r.std:.3f}")
    out_path = out_path or default_output('latency', 'csv')
    emit_results(latency_rows(reports, experts), out_path, _format_for(out_path))
    print(f"✅ Latency report written to {out_path}")
