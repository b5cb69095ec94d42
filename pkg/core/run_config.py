"""
Run configs: flat `key = value` documents (the .env syntax, read with
python-dotenv's parser) that validate to an ExperimentConfig.
"""
import io
import os
from dataclasses import fields

from dotenv.parser import parse_stream

from core.experiments import ExperimentConfig
from core.shared import ConfigError, get_settings


def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _optional_float(v):
    return None if v.lower() in ('', 'none') else float(v)


def _optional_str(v):
    return None if v.lower() in ('', 'none') else v


def _bool(v):
    lowered = v.lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int_list(v):
    return tuple(int(p) for p in v.split(',') if p.strip())


def _str_list(v):
    return tuple(p.strip() for p in v.split(',') if p.strip())


PARSERS = {
    'experiment': str,
    'layers': _int,
    'n_list': _int_list,
    'hidden_budget': _int,
    'tokens': _int,
    'token_dim': _int,
    'head': str,
    'classes': _int,
    'dataset': str,
    'k_list': _str_list,
    'seeds': _int_list,
    'epochs': _int,
    'batch_size': _int,
    'steps_per_epoch': _int,
    'learning_rate': _float,
    'stop_at_accuracy': _optional_float,
    'accuracy_tolerance': _float,
    'train_size': _int,
    'test_size': _int,
    'cluster_std': _float,
    'cluster_spread': _float,
    'tokenizations': _str_list,
    'batch_sizes': _int_list,
    'warmup': _int,
    'timed': _int,
    'mnist_dir': _optional_str,
    'normalize_pixels': _bool,
    'listing_order': _bool,
    'output': _optional_str,
}

assert set(PARSERS) == {f.name for f in fields(ExperimentConfig)}


def parse_run_config(text, source='<config>', overrides=None):
    values = {}
    for binding in parse_stream(io.StringIO(text)):
        raw = binding.original.string
        lineno = binding.original.line + raw[:len(raw) - len(raw.lstrip())].count('\n')
        if binding.error or (binding.key is not None and binding.value is None):
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        if binding.key is None:
            continue
        key, value = binding.key.replace('-', '_'), binding.value.strip()
        if key not in PARSERS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = PARSERS[key](value)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from e
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig(**values)


def resolve_config_path(explicit=None):
    # 1. Explicit flag, 2. SOFTMOE_CONFIG from the environment / .env
    if explicit:
        return explicit
    from_env = get_settings()['config_path']
    if from_env:
        return from_env
    raise ConfigError("no run config given (pass --config or set SOFTMOE_CONFIG)")


def load_run_config(path=None, overrides=None):
    path = resolve_config_path(path)
    if not os.path.exists(path):
        raise ConfigError(f"config file {path!r} does not exist")
    with open(path, 'r') as f:
        text = f.read()
    return parse_run_config(text, source=path, overrides=overrides)


def dump_run_config(cfg):
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ','.join(str(v) for v in value)
        lines.append(f"{f.name} = {'none' if value is None else value}")
    return '\n'.join(lines) + '\n'
