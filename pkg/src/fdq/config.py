"""Experiment configuration: strict JSON documents plus run manifests.

A config is one JSON file merged over :data:`DEFAULT_CONFIG`.  Parsing is
strict: any key absent from the defaults is rejected by name, and leaf
values must keep the default's JSON type.  ``--set key.path=value``
overrides reuse the same rules, so a sweep can never silently typo a
knob into a no-op.
"""

import hashlib
import json
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, ContractError

DEFAULT_CONFIG = {
    "task": {"name": "copy", "vocab": 12, "min_len": 1, "max_len": 8,
             "pairs": 500},
    "split": [0.8, 0.1, 0.1],
    "model": {"hidden": 32, "attention": True, "max_len": 12},
    "train": {"epochs": 10, "batch_size": 32, "optimizer": "adam",
              "lr": 5e-3, "clip_norm": 5.0, "patience": 0},
    "q": {
        "family": "length",
        "hidden": 32,
        "epochs": 30,
        "batch_size": 32,
        "lr": 5e-3,
        # schedule for the full backward model (family backward_opt1 and
        # the mmi_rerank baseline both need one)
        "backward": {"hidden": 32, "epochs": 30, "batch_size": 32,
                     "lr": 5e-3},
        "buckets": [[1, 2], [3, 4], [5, 7], [8, 12], [13, None]],
        "full_targets_only": False,
        "rollout": {"positions": 4, "samples": 2, "beam": 7,
                    "metric": "bleu", "prefix_source": "gold",
                    "pairs": None},
    },
    "decode": {"mode": "sbs", "beam": 7, "weight": 1.0, "length": None,
               "nbest": None, "cap": None, "mask_eos": True,
               "use_length_protocol": False, "input": None,
               "modes": ["length_q"], "weights": [0.0, 0.5, 1.0]},
    "eval": {"hyp": None, "ref": None, "smooth": True},
    "out": "run",
    "seed": 0,
}

Q_FAMILIES = ("length", "backward_opt1", "backward_opt2", "outcome")


def _check_type(path, value, default):
    # None defaults mark nullable knobs; their type is checked at use
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(
            f"config key {path!r}: expected {type(default).__name__}, "
            f"got {type(value).__name__}")


def _merge(base, update, default, prefix=""):
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in default:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(default[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(
                    f"config key {path!r}: expected object, "
                    f"got {type(value).__name__}")
            _merge(base[key], value, default[key], prefix=path + ".")
        else:
            _check_type(path, value, default[key])
            base[key] = value
    return base


def default_config():
    return json.loads(json.dumps(DEFAULT_CONFIG))


def load_config(path):
    """Parse a JSON config file and merge it over the defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: malformed JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path}: top level must be an object")
    return _merge(default_config(), doc, DEFAULT_CONFIG)


def apply_overrides(config, assignments):
    """Apply ``key.path=value`` overrides in order; values parse as JSON."""
    for text in assignments:
        if "=" not in text:
            raise ConfigError(f"override {text!r} is not of the form key=value")
        key, raw = text.split("=", 1)
        parts = key.split(".")
        node, default = config, DEFAULT_CONFIG
        for part in parts[:-1]:
            if not isinstance(default, dict) or part not in default:
                raise ConfigError(f"unknown config key {key!r}")
            node, default = node[part], default[part]
        leaf = parts[-1]
        if not isinstance(default, dict) or leaf not in default:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(default[leaf], dict):
            raise ConfigError(
                f"config key {key!r} is a section; set its fields instead")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings are a convenience, e.g. task.name=copy
        _check_type(key, value, default[leaf])
        node[leaf] = value
    return config


def validate_config(config):
    """Range checks that name the offending key."""
    if config["q"]["family"] not in Q_FAMILIES:
        raise ConfigError(
            f"config key 'q.family': {config['q']['family']!r} is not one "
            f"of {Q_FAMILIES}")
    for key, lo in (("task.pairs", 1), ("model.hidden", 1),
                    ("model.max_len", 1), ("train.epochs", 0),
                    ("train.batch_size", 1), ("q.epochs", 0),
                    ("q.batch_size", 1), ("q.hidden", 1),
                    ("decode.beam", 1)):
        section, name = key.split(".")
        if config[section][name] < lo:
            raise ConfigError(
                f"config key {key!r}: must be >= {lo}, "
                f"got {config[section][name]}")
    if any(w < 0 for w in config["decode"]["weights"]):
        raise ConfigError("config key 'decode.weights': weights must be >= 0")
    return config


def config_hash(config):
    """Hash of the canonical JSON form; reruns of one config share it."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _versions():
    return {"fdq": __version__, "numpy": np.__version__,
            "python": platform.python_version()}


@dataclass
class RunManifest:
    """What a command produced: artifact paths, wall times, logged numbers."""

    command: str
    config_hash: str
    seed: int
    artifacts: dict = field(default_factory=dict)
    wall_times: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    versions: dict = field(default_factory=_versions)

    def write(self, path):
        # a manifest may only list artifacts that actually exist
        for name, target in self.artifacts.items():
            if not Path(target).exists():
                raise ContractError(
                    f"manifest artifact {name!r} missing on disk: {target}")
        doc = {"command": self.command, "config_hash": self.config_hash,
               "seed": self.seed, "artifacts": self.artifacts,
               "wall_times": self.wall_times, "metrics": self.metrics,
               "versions": self.versions}
        path = Path(path)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        return path


@contextmanager
def timed(manifest, phase):
    t0 = time.perf_counter()
    yield
    manifest.wall_times[phase] = round(time.perf_counter() - t0, 3)
