import os
from functools import wraps

# --- Errors ---

class SoftMoEError(ValueError):
    pass

class ShapeError(SoftMoEError):
    pass

class NonFiniteError(SoftMoEError):
    pass

class ConfigError(SoftMoEError):
    pass

class IdxFormatError(SoftMoEError):
    """Malformed IDX file. `reason` is one of IDX_REASONS."""

    def __init__(self, reason, detail=''):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)

IDX_REASONS = ('wrong magic', 'truncated', 'count mismatch', 'bad dimensions')

class TimingError(SoftMoEError):
    pass

class CheckpointError(SoftMoEError):
    pass

class CheckpointVersionError(CheckpointError):
    pass

class CheckpointShapeError(CheckpointError):
    pass

class CheckpointCorruptError(CheckpointError):
    pass

# --- Exit codes for the command line ---
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_CHECKPOINT = 5

# --- Settings ---

def get_settings():
    """Process-level settings read from the environment (populated from .env by main.py)."""
    return {
        'out_dir': os.getenv('SOFTMOE_OUT_DIR', 'results'),
        'mnist_dir': os.getenv('SOFTMOE_MNIST_DIR') or None,
        'config_path': os.getenv('SOFTMOE_CONFIG') or None,
        'log_level': os.getenv('LOG_LEVEL', 'INFO').upper(),
    }

def exit_code_for(exc):
    if isinstance(exc, CheckpointError):
        return EXIT_CHECKPOINT
    if isinstance(exc, (OSError, IdxFormatError)):
        return EXIT_IO
    return EXIT_CONFIG

def command_guard(f):
    """Turns domain failures raised inside a CLI command into distinct exit codes."""
    @wraps(f)
    def decorated_function(*args, **kwargs):
        import click
        try:
            return f(*args, **kwargs)
        except (SoftMoEError, OSError) as e:
            code = exit_code_for(e)
            print(f"⚠️  {type(e).__name__}: {e}")
            raise click.exceptions.Exit(code)
    return decorated_function
