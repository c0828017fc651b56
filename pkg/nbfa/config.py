import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any

from nbfa.errors import ConfigError

# Run defaults; CLI flags override a config file, which overrides these.
DEFAULTS: dict[str, Any] = {
    "model": "nbfa",
    "sampler": "cp",
    "a0": 0.01,
    "b0": 0.01,
    "e0": 1.0,
    "f0": 1.0,
    "K_init": 400,
    "K_star": 20,
    "iters": 5000,
    "burnin": 2500,
    "thin": 5,
    "eta": "0.05",
    "truncation": "adaptive",
    "train_fraction": 1.0,
    "seed": 0,
    "chains": 1,
    "splits": 1,
    "min_doc_freq": 5,
    "post_iters": 1000,
    "post_collect": 500,
    "format": "uci-bow",
}


class Settings:
    def __init__(self) -> None:
        self.notice_level = 25
        self.threads = int(os.environ.get("NBFA_THREADS", "1"))
        self.log_level = os.environ.get("LOG_LEVEL", "NOTICE")
        self.checkpoint_every = int(os.environ.get("NBFA_CHECKPOINT_EVERY", "500"))
        self.debug = os.environ.get("NBFA_DEBUG", "false")

    @property
    def invariant_check_every(self) -> int:
        return 1 if self.debug.lower() == "true" else 100


settings = Settings()


def load_config_file(path: str | Path) -> dict[str, Any]:
    with open(path, "rb") as f:
        try:
            data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Invalid config file {path}: {e}") from e

    unknown = sorted(set(data) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"Unknown config keys in {path}: {', '.join(unknown)}")
    return data


def resolve(flags: dict[str, Any], file_values: dict[str, Any] | None = None) -> dict[str, Any]:
    """Merge flag values over config-file values over DEFAULTS.

    Flags left at None are treated as unset.
    """
    resolved = dict(DEFAULTS)
    if file_values:
        resolved.update(file_values)
    resolved.update({k: v for k, v in flags.items() if k in DEFAULTS and v is not None})
    return resolved
