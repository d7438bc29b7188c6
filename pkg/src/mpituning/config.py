"""Run configuration: built-in defaults < INI file < command-line flags.

File grammar (``configparser`` dialect)::

    # or ; starts a comment line
    [section]
    key = value

Sections and keys must be known (see ``DEFAULTS``); values are parsed to the
type of their default.  Booleans accept true/false/yes/no/on/off/1/0 and
tuples are comma-separated.  The only environment variable consulted is
``MPI_TUNE_THREADS``, which caps numerical-library threads.
"""

from __future__ import annotations

import configparser
import copy
import hashlib
import json
import os
from pathlib import Path

from .detector import DetectorConfig
from .errors import FormatError
from .losses import LossWeights
from .peft import PeftConfig
from .scenes import SceneConfig
from .train import TrainConfig

THREADS_ENV = "MPI_TUNE_THREADS"

DEFAULTS: dict = {
    "run": {"seed": 0},
    "detector": {
        "image_size": 96, "patch_size": 8, "channels": 1, "d": 64, "heads": 4,
        "fe_blocks": 2, "dec_blocks": 2, "num_queries": 16, "ffn_hidden": 128,
        "init_box_size": 0.1,
    },
    "data": {
        "seed": 0, "pretrain_count": 2000, "pretrain_val_count": 100,
        "finetune_train_count": 400, "finetune_val_count": 100, "test_count": 200,
    },
    "scenes.pretrain": {
        "min_objects": 1, "max_objects": 4, "min_side": 12.0, "max_side": 28.0,
        "min_separation": 24.0, "noise_amplitude": 0.08,
    },
    "scenes.finetune": {
        "min_objects": 2, "max_objects": 5, "min_side": 3.0, "max_side": 9.0,
        "min_separation": 12.0, "noise_amplitude": 0.08,
    },
    "pretrain": {
        "epochs": 12, "lr": 1e-3, "lr_min": 1e-6, "batch_size": 8,
        "weight_decay": 1e-4, "clip_norm": 1.0, "seed": 0,
    },
    "finetune": {
        "epochs": 12, "lr": 1e-4, "lr_min": 1e-6, "batch_size": 8,
        "weight_decay": 1e-4, "clip_norm": 1.0, "seed": 0,
    },
    "peft": {
        "M": 12, "mhp_dim": 8, "table_length": 4096, "table_base": 10000.0,
        "n_ctx": 8, "n_visual": 8, "visual_deep": True, "adapter_dim": 32, "seed": 1,
    },
    "loss": {"cls": 1.0, "l1": 5.0, "giou": 2.0, "aux": True, "encoder": True},
    "eval": {"batch_size": 16},
    "experiment": {"baselines": ()},
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_value(raw: str, default, where: str, path=None):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise FormatError(f"{where}: cannot parse {raw!r} as {type(default).__name__}",
                          path=path) from None


def parse_ini(text: str, path=None) -> dict:
    """Overrides found in ``text`` as {section: {key: typed value}}."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=str(path or "<config>"))
    except configparser.Error as exc:
        raise FormatError(f"malformed config: {exc}", path=path) from None
    out: dict = {}
    for section in cp.sections():
        if section not in DEFAULTS:
            raise FormatError(f"unknown config section [{section}]", path=path)
        for key, raw in cp.items(section):
            if key not in DEFAULTS[section]:
                raise FormatError(f"unknown key {key!r} in [{section}]", path=path)
            out.setdefault(section, {})[key] = _parse_value(raw, DEFAULTS[section][key],
                                                           f"[{section}] {key}", path)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Effective configuration: defaults, then the file, then ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise FormatError(f"cannot read config: {exc.strerror}", path=path) from None
        for section, values in parse_ini(text, path).items():
            cfg[section].update(values)
    for section, values in (overrides or {}).items():
        for key, value in values.items():
            if value is not None:
                cfg[section][key] = value
    return cfg


def to_ini(cfg: dict) -> str:
    lines = []
    for section, values in cfg.items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            if isinstance(value, tuple):
                value = ",".join(value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=list)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# typed views
# ---------------------------------------------------------------------------

def detector_config(cfg: dict) -> DetectorConfig:
    return DetectorConfig(**cfg["detector"], seed=cfg["run"]["seed"])


def scene_config(cfg: dict, kind: str) -> SceneConfig:
    sc = cfg[f"scenes.{kind}"]
    kw = {**sc, "image_size": cfg["detector"]["image_size"],
          "channels": cfg["detector"]["channels"]}
    return SceneConfig(**kw)


def train_config(cfg: dict, stage: str) -> TrainConfig:
    kw = dict(cfg[stage])
    if kw["clip_norm"] <= 0:
        kw["clip_norm"] = None
    return TrainConfig(**kw)


def peft_config(cfg: dict) -> PeftConfig:
    return PeftConfig(**cfg["peft"])


def loss_weights(cfg: dict) -> LossWeights:
    return LossWeights(**cfg["loss"])


def thread_limit() -> int:
    """Thread cap from MPI_TUNE_THREADS (default 1)."""
    raw = os.environ.get(THREADS_ENV, "1").strip()
    try:
        n = int(raw)
    except ValueError:
        raise FormatError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise FormatError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n
