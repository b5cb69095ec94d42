import os

import click
from flask import Blueprint, current_app

from core.checkpoint import save_checkpoint
from core.experiments import ResultRow, classification_data, emit_results, parse_tokenization
from core.datasets import NormTaskConfig
from core.run_config import load_run_config
from core.shared import command_guard
from core.tensor_core import RngStream
from core.training import ModelSpec, TrainingStreams, build_model, train_model

train_bp = Blueprint('train', __name__, cli_group=None)


def _trace_rows(cfg, n, seed, trace):
    rows = []
    for r in trace.rows:
        rows.append(ResultRow('train', n, n, seed, f"loss_epoch{r.epoch:04d}", r.loss))
        if r.accuracy is not None:
            rows.append(ResultRow('train', n, n, seed, f"test_accuracy_epoch{r.epoch:04d}", r.accuracy))
    return rows


def train_from_config(cfg):
    """Builds and trains the model a run config describes (first n, first seed)."""
    n, seed = cfg.n_list[0], cfg.seeds[0]
    root = RngStream(seed, f"train/n{n}")
    streams = TrainingStreams(data=root.child('data'), shuffle=root.child('shuffle'))
    if cfg.dataset == 'norm':
        m, d = parse_tokenization(cfg.tokenizations[0])
        task = NormTaskConfig(input_dim=m * d, tokens=m, token_dim=d, batch_size=cfg.batch_size)
        spec = ModelSpec(layers=cfg.layers, tokens=m, token_dim=d, n=n, hidden_budget=10 * d, head='sum')
    else:
        task = classification_data(cfg, seed)
        if cfg.dataset == 'mnist':
            spec = cfg.model_spec(n, tokens=4, token_dim=196)
        else:
            spec = cfg.model_spec(n)
    model = build_model(spec, root.child('init'))
    trace = train_model(model, task, cfg.epochs, cfg.batch_size, streams,
                        stop_at_accuracy=cfg.stop_at_accuracy, learning_rate=cfg.learning_rate,
                        steps_per_epoch=cfg.steps_per_epoch)
    return model, trace


@train_bp.cli.command('train')
@click.option('--config', 'config_path', default=None, help='Run config (key = value lines).')
@click.option('--out', 'out_path', default=None, help='Checkpoint path to write.')
@click.option('--seed', type=int, default=None, help='Override the config seeds with one seed.')
@click.option('--mnist-dir', default=None, help='Directory holding the MNIST IDX files.')
@command_guard
def cmd_train(config_path, out_path, seed, mnist_dir):
    """Train a Soft MoE model and write a checkpoint plus its training trace."""
    overrides = {
        'seeds': (seed,) if seed is not None else None,
        'mnist_dir': mnist_dir or current_app.config.get('MNIST_DIR'),
    }
    cfg = load_run_config(config_path, overrides=overrides)
    out_path = out_path or cfg.output or os.path.join(current_app.config['OUT_DIR'], 'model.ckpt')
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)

    print(f"🚀 Training n={cfg.n_list[0]} on {cfg.dataset} for {cfg.epochs} epochs")
    model, trace = train_from_config(cfg)
    save_checkpoint(model, out_path)
    emit_results(_trace_rows(cfg, cfg.n_list[0], cfg.seeds[0], trace), out_path + '.trace.csv')
    if trace.final_accuracy is not None:
        print(f"✅ Checkpoint written to {out_path} (test accuracy {trace.final_accuracy:.4f})")
    else:
        print(f"✅ Checkpoint written to {out_path} (final loss {trace.final_loss})")
