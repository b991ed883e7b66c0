"""Configuration parsing: per-command defaults, text or JSON files, overrides.

Config files are flat ``key = value`` lines, optionally grouped under
``[section]`` headers (sections only group keys; every key is global to
its command). Lists are comma separated. A file whose first non-blank
character is ``{`` is read as JSON, with nested objects treated as
sections. Unknown keys, malformed values and violated constraints raise
:class:`ConfigError` naming the key.
"""

from __future__ import annotations

import configparser
import json
import math
from typing import Dict, Mapping, Optional

from .model import OVERLAP_MODES
from .pruning import GRASP_SELECTIONS, REWIND_MODES
from .trainer import PARTITION_MODES


class ConfigError(ValueError):
    pass


_TRAIN = {
    "eta": 0.5,
    "beta": 0.2,
    "max_iters": 10000,
    "rel_change_tol": 1e-8,
}

_ORACLE = {
    "d": 300,
    "K": 10,
    "r": 20,
    "overlap_mode": "almost_overlapped",
    "noise_level": 0.0,
}

DEFAULTS: Dict[str, Dict] = {
    "gen-oracle": {**_ORACLE, "d": 100, "K": 5, "weight_scale": 0.5, "seed": 0},
    "train": {
        **_ORACLE, **_TRAIN,
        "oracle": "",
        "N": 5000,
        "lam": 0.1,
        "partition_mode": "reuse_full",
        "n_subsets": 1,
        "success_tol": 1e-4,
        "seed": 0,
    },
    "probe-hessian": {
        **_ORACLE,
        "oracle": "",
        "d": 100, "K": 5,
        "N": 5000,
        "probe_distance": 0.05,
        "n_probes": 20,
        "method": "auto",
        "max_params": 5000,
        "seed": 0,
    },
    "phase-radius": {
        **_ORACLE, **_TRAIN,
        "d": 200, "N": 2000,
        "eta": 40.0,
        "r_tilde_values": (90, 100, 110, 120, 130),
        "lam_values": (1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0),
        "success_tol": 1e-4,
        "success_level": 0.9,
        "trials": 30,
        "seed": 0,
    },
    "rate-sweep": {
        **_ORACLE, **_TRAIN,
        "N": 5000,
        "lam": 0.1,
        "r_tilde_values": (50, 100, 150, 200),
        "beta_values": (0.0, 0.2),
        "success_tol": 1e-4,
        "trials": 5,
        "seed": 0,
    },
    "sample-complexity": {
        **_ORACLE, **_TRAIN,
        "mode": "jittered",
        "d": 100,
        "eta": 20.0,
        "lam": 0.5,
        "r_tilde_values": (10, 20, 30, 40, 50, 60),
        "N_values": tuple(range(50, 1101, 50)),
        "overlap_modes": ("disjoint", "random", "almost_overlapped"),
        "success_tol": 1e-4,
        "success_level": 0.9,
        "trials": 30,
        "seed": 0,
    },
    "noise-sweep": {
        **_ORACLE, **_TRAIN,
        "N": 1000,
        "eta": 20.0,
        "lam": 0.1,
        "r_tilde_values": (10, 20, 30, 40),
        "noise_levels": (0.01, 0.02, 0.04),
        "trials": 20,
        "seed": 0,
    },
    "grasp-sweep": {
        **_ORACLE, **_TRAIN,
        "d": 100, "K": 5,
        "eta": 10.0,
        "max_iters": 5000,
        "lam": 0.5,
        "ratio_values": (40.0, 60.0, 80.0),
        "N_values": (400, 800),
        "warmup_iters": 20,
        "grasp_selection": "abs_score",
        "warm_lam_range": (0.2, 1.5),
        "N_test": 100000,
        "bucket_width": 0.05,
        "min_bucket_trials": 10,
        "focus_bucket": 0.85,
        "required_test_error": 1e-3,
        "iteration_thresholds": (0.25, 0.2, 0.15),
        "trials": 300,
        "seed": 0,
    },
    "imp-sweep": {
        **_ORACLE, **_TRAIN,
        "d": 100, "K": 5,
        "noise_level": 1e-3,
        "eta": 10.0,
        "max_iters": 5000,
        "lam": 0.5,
        "N_values": (100, 200, 500, 1000),
        "rounds": 12,
        "per_round_fraction": 0.2,
        "rewind": "to_init",
        "N_test": 100000,
        "trials": 5,
        "seed": 0,
    },
}

# Values restoring the reference configurations behind --paper-scale.
PAPER_SCALE: Dict[str, Dict] = {
    "phase-radius": {"d": 500, "N": 5000, "trials": 100,
                     "r_tilde_values": (20, 40, 60, 80, 100, 120, 140, 160, 180, 200),
                     "lam_values": (0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0)},
    "rate-sweep": {"trials": 20, "r_tilde_values": (25, 50, 75, 100, 125, 150, 175, 200)},
    "sample-complexity": {"trials": 100},
    "noise-sweep": {"trials": 100, "r_tilde_values": (10, 15, 20, 25, 30, 35, 40)},
    "grasp-sweep": {"trials": 1000, "N_values": (200, 400, 800, 1600, 3200)},
    "imp-sweep": {"trials": 20},
}

_MODES = {
    "overlap_mode": OVERLAP_MODES,
    "partition_mode": PARTITION_MODES,
    "rewind": REWIND_MODES,
    "grasp_selection": GRASP_SELECTIONS,
    "method": ("auto", "dense", "lanczos"),
    "mode": ("jittered", "fixed_r"),
}

_POSITIVE_INT = {"d", "K", "r", "N", "max_iters", "n_subsets", "trials", "n_probes", "max_params",
                 "warmup_iters", "N_test", "min_bucket_trials", "rounds"}
_POSITIVE = {"eta", "lam", "rel_change_tol", "success_tol", "probe_distance", "weight_scale",
             "bucket_width", "required_test_error"}


def defaults(command: str, paper_scale: bool = False) -> Dict:
    if command not in DEFAULTS:
        raise ConfigError(f"unknown command {command!r}")
    out = dict(DEFAULTS[command])
    if paper_scale:
        out.update(PAPER_SCALE.get(command, {}))
    return out


def _coerce(key: str, raw, default):
    """Convert ``raw`` (text or JSON value) to the type of ``default``."""
    def fail(kind):
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}")

    if isinstance(default, tuple):
        items = raw if isinstance(raw, (list, tuple)) else [s for s in str(raw).split(",") if s.strip()]
        elem = default[0] if default else 0.0
        return tuple(_coerce(key, x, elem) for x in items)
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        fail("a boolean")
    if isinstance(default, int):
        if isinstance(raw, bool):
            fail("an integer")
        if isinstance(raw, int):
            return raw
        if isinstance(raw, float) and raw.is_integer():
            return int(raw)
        try:
            return int(str(raw).strip())
        except ValueError:
            fail("an integer")
    if isinstance(default, float):
        if isinstance(raw, bool):
            fail("a number")
        try:
            return float(str(raw).strip()) if not isinstance(raw, (int, float)) else float(raw)
        except ValueError:
            fail("a number")
    return str(raw).strip()


def _check(key: str, value) -> None:
    def bad(rule):
        raise ConfigError(f"{key} must {rule}, got {value!r}")

    if key == "beta" and not 0 <= value < 1:
        raise ConfigError("beta must lie in [0,1)")
    if key == "beta_values" and not all(0 <= b < 1 for b in value):
        raise ConfigError("beta must lie in [0,1)")
    if key in _POSITIVE_INT and value < 1:
        bad("be a positive integer")
    if key in _POSITIVE and not (value > 0 and math.isfinite(value)):
        bad("be positive")
    if key in _MODES and value not in _MODES[key]:
        bad(f"be one of {', '.join(_MODES[key])}")
    if key == "overlap_modes" and not all(m in OVERLAP_MODES for m in value):
        bad(f"list only {', '.join(OVERLAP_MODES)}")
    if key == "noise_level" and not value >= 0:
        bad("be nonnegative")
    if key == "noise_levels" and not all(v >= 0 for v in value):
        bad("be nonnegative")
    if key in ("success_level",) and not 0 < value <= 1:
        bad("lie in (0,1]")
    if key == "per_round_fraction" and not 0 < value < 1:
        bad("lie in (0,1)")
    if key == "ratio_values" and not all(0 <= v < 100 for v in value):
        bad("lie in [0,100)")
    if key == "focus_bucket" and not 0 <= value <= 1:
        bad("lie in [0,1]")
    if key == "warm_lam_range" and not (len(value) == 2 and 0 < value[0] <= value[1]):
        bad("be two positive values lo,hi with lo <= hi")
    if key == "iteration_thresholds" and len(value) != 3:
        bad("list exactly three test-error thresholds")
    if key.endswith("_values") and len(value) == 0:
        bad("be a nonempty list")
    if key in ("lam_values", "r_tilde_values", "N_values") and not all(v > 0 for v in value):
        bad("contain positive values only")


def read_config_text(text: str) -> Dict[str, object]:
    """Raw key/value pairs from config-file text (sections flattened)."""
    stripped = text.lstrip()
    if not stripped:
        return {}
    if stripped.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"invalid JSON config: {err}") from None
        return _flatten(doc)
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case sensitive (K vs k)
    if not stripped.startswith("["):
        text = "[main]\n" + text
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from None
    out: Dict[str, object] = {}
    for section in parser.sections():
        for key, value in parser.items(section, raw=True):
            if key in out:
                raise ConfigError(f"{key}: set in more than one section")
            out[key] = value
    return out


def _flatten(doc: Mapping) -> Dict[str, object]:
    out: Dict[str, object] = {}
    for key, value in doc.items():
        if isinstance(value, Mapping):
            for k, v in _flatten(value).items():
                if k in out:
                    raise ConfigError(f"{k}: set in more than one section")
                out[k] = v
        else:
            if key in out:
                raise ConfigError(f"{key}: set in more than one section")
            out[key] = value
    return out


def parse_config(
    command: str,
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, object]] = None,
    paper_scale: bool = False,
    text: Optional[str] = None,
) -> Dict:
    """Resolved configuration for ``command``: defaults < file < overrides."""
    resolved = defaults(command, paper_scale)
    layers = []
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            layers.append(read_config_text(fh.read()))
    if text is not None:
        layers.append(read_config_text(text))
    if overrides:
        layers.append({k: v for k, v in overrides.items() if v is not None})
    for layer in layers:
        for key, raw in layer.items():
            if key not in resolved:
                raise ConfigError(f"unknown key {key!r} for command {command!r}")
            resolved[key] = _coerce(key, raw, resolved[key])
    for key, value in resolved.items():
        _check(key, value)
    return resolved


def format_config(config: Mapping[str, object]) -> str:
    """Render a resolved configuration back to the key = value text format."""
    lines = []
    for key in sorted(config):
        value = config[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
