# %%
import dataclasses
import json
import logging
import os
from pathlib import Path

import yaml
from omegaconf import DictConfig, OmegaConf
from omegaconf.errors import OmegaConfBaseException

from errors import ConfigError

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
CACHE_ENV_VAR = "RESBILSTM_CACHE_DIR"


def setup_logging(level="INFO"):
    """Install a single stream handler on the root logger."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))


def cache_dir():
    return Path(os.environ.get(CACHE_ENV_VAR, Path.home() / ".cache" / "resbilstm"))


def to_dict(obj):
    """Plain-JSON view of a (possibly nested) config dataclass."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def canonical_json(obj):
    return json.dumps(to_dict(obj), sort_keys=True, separators=(",", ":"))


def from_dict(cls, data):
    """Build `cls` from a dict, rejecting keys the dataclass does not declare."""
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    if hasattr(cls, "from_dict"):
        return cls.from_dict(data)
    return cls(**data)


def load_overlay(cls, path=None, overrides=None, base=None):
    """
    Resolve a config with precedence defaults (or `base`) < config file < overrides.

    The file may be JSON or YAML. Overrides whose value is None count as "not
    given" so that argparse defaults never shadow the file. The merge runs in
    struct mode, so keys the dataclass does not declare are rejected.
    """
    merged = OmegaConf.create(to_dict(base if base is not None else cls()))
    OmegaConf.set_struct(merged, True)
    layers = []
    if path is not None:
        try:
            file_cfg = OmegaConf.load(path)
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(file_cfg, DictConfig):
            raise ConfigError(f"config {path} must hold a mapping")
        layers.append(file_cfg)
    given = {key: value for key, value in (overrides or {}).items() if value is not None}
    layers.append(OmegaConf.create(given))
    try:
        merged = OmegaConf.merge(merged, *layers)
    except OmegaConfBaseException as exc:
        raise ConfigError(f"invalid {cls.__name__} config: {exc}") from exc
    return from_dict(cls, OmegaConf.to_container(merged, resolve=True))
