"""Flat ``key = value`` run configuration.

Every knob of a run lives in one flat namespace so a config file, a
checkpoint snapshot and ``--set`` overrides all share one format. Unknown
keys are errors.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Mapping

from .calibration import CalibConfig
from .decoding import DecodeConfig
from .errors import ConfigError
from .model import ModelConfig
from .rouge import MetricKind

# Desk defaults. The method fixes K, margin, cost_alpha, mle_weight and momentum;
# everything else (sizes, learning rates, schedules, step counts) is a local choice.
DEFAULTS: dict[str, object] = {
    "seed": 0,
    # data
    "task": "reverse",
    "vocab_size": 50,
    "min_len": 5,
    "max_len": 15,
    "n_train": 2000,
    "n_valid": 200,
    "n_test": 200,
    "data_dir": "",
    "out_dir": "run",
    # model
    "d_model": 64,
    "n_heads": 4,
    "n_layers": 2,
    "d_ff": 256,
    "max_positions": 32,
    # MLE phase
    "batch_size": 16,
    "lr": 4e-4,
    "warmup": 200,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "mle_steps": 3000,
    "eval_every": 100,
    "patience": 0,
    "checkpoint_every": 0,
    # calibration phase
    "moca_steps": 500,
    "moca_lr": 1e-4,
    "moca_warmup": 0,
    "K": 16,
    "margin": 0.001,
    "cost_alpha": 2.0,
    "mle_weight": 0.01,
    "momentum": 0.99,
    "weighting": "constant",
    "mode": "momentum",
    "run_name": "moca",
    "metric": "mean",
    "search": "beam",
    "cand_beam": 16,
    "cand_groups": 1,
    "diversity": 0.0,
    "decode_alpha": 2.0,
    "decode_max_len": 20,
    "decode_min_len": 1,
    # evaluation
    "eval_beam": 4,
    "bucket_width": 10,
}

MODES = ("momentum", "online-m0", "offline")


def _coerce(key: str, raw) -> object:
    default = DEFAULTS[key]
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if isinstance(default, bool):
            return str(raw).lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None
    return str(raw)


def parse_config_text(text: str) -> dict[str, object]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value', got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"config line {n}: unknown key {key!r}")
        out[key] = _coerce(key, val)
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (), base: Mapping | None = None) -> dict:
    """Defaults, then ``path`` (if any), then ``key=value`` overrides."""
    cfg = dict(DEFAULTS if base is None else base)
    if path:
        cfg.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = (s.strip() for s in item.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, val)
    validate(cfg)
    return cfg


def update(cfg: Mapping, **kw) -> dict:
    for k in kw:
        if k not in DEFAULTS:
            raise ConfigError(f"unknown config key {k!r}")
    out = dict(cfg)
    out.update({k: _coerce(k, v) if isinstance(v, str) else v for k, v in kw.items()})
    validate(out)
    return out


def dump_config(cfg: Mapping) -> str:
    return "".join(f"{k} = {cfg[k]!r}\n" if isinstance(cfg[k], float) else f"{k} = {cfg[k]}\n" for k in DEFAULTS)


def validate(cfg: Mapping) -> None:
    if cfg["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    MetricKind(cfg["metric"])
    model_config(cfg).validate()
    calib_config(cfg).validate()
    eval_decode_config(cfg).validate()


def model_config(cfg: Mapping) -> ModelConfig:
    return ModelConfig(
        vocab_size=cfg["vocab_size"],
        d_model=cfg["d_model"],
        n_heads=cfg["n_heads"],
        n_layers=cfg["n_layers"],
        d_ff=cfg["d_ff"],
        max_positions=cfg["max_positions"],
    )


def candidate_decode_config(cfg: Mapping) -> DecodeConfig:
    return DecodeConfig(
        beam_size=cfg["cand_beam"],
        num_groups=cfg["cand_groups"],
        diversity_strength=cfg["diversity"],
        length_penalty=cfg["decode_alpha"],
        max_length=cfg["decode_max_len"],
        min_length=cfg["decode_min_len"],
    )


def eval_decode_config(cfg: Mapping) -> DecodeConfig:
    return DecodeConfig(
        beam_size=cfg["eval_beam"],
        num_groups=1,
        length_penalty=cfg["decode_alpha"],
        max_length=cfg["decode_max_len"],
        min_length=cfg["decode_min_len"],
    )


def calib_config(cfg: Mapping) -> CalibConfig:
    return CalibConfig(
        K=cfg["K"],
        margin=cfg["margin"],
        cost_alpha=cfg["cost_alpha"],
        mle_weight=cfg["mle_weight"],
        momentum=cfg["momentum"],
        weighting=cfg["weighting"],
        decode=candidate_decode_config(cfg),
        metric=MetricKind(cfg["metric"]),
        search=cfg["search"],
    )
