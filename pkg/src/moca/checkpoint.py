"""Binary checkpoint format.

Layout (all integers unsigned 32-bit little-endian)::

    b"MOCA1" | version | step | meta (len + UTF-8 JSON) | config (len + UTF-8 text)
    then four tensor groups: online, generator, adam_m, adam_v
    group   = count, then per tensor: name (len + UTF-8), rank, dims..., float32 LE data

``meta`` carries the Adam hyperparameters and step, the RNG state and the
training loop's bookkeeping (early-stopping counters, running sums).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .calibration import TrainState
from .config import model_config, parse_config_text, dump_config, DEFAULTS
from .errors import CheckpointError, ConfigError
from .model import ModelConfig, TransformerParams
from .tensor import AdamState

MAGIC = b"MOCA1"
VERSION = 1
_GROUPS = ("online", "generator", "adam_m", "adam_v")


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def _blob(b: bytes) -> bytes:
    return _u32(len(b)) + b


def _group(tensors: dict[str, np.ndarray] | None) -> bytes:
    if not tensors:
        return _u32(0)
    parts = [_u32(len(tensors))]
    for name, arr in tensors.items():
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name!r} is {arr.dtype}; checkpoints store float32 only")
        parts.append(_blob(name.encode("utf-8")))
        parts.append(_u32(arr.ndim))
        parts.extend(_u32(d) for d in arr.shape)
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    meta = {
        "adam": {
            "lr": state.adam.lr,
            "beta1": state.adam.beta1,
            "beta2": state.adam.beta2,
            "eps": state.adam.eps,
            "warmup": state.adam.warmup,
            "step": state.adam.step,
        },
        "rng": state.rng.bit_generator.state,
        "extra": state.extra,
    }
    body = b"".join(
        [
            MAGIC,
            _u32(VERSION),
            _u32(state.step),
            _blob(json.dumps(meta, sort_keys=True).encode("utf-8")),
            _blob(dump_config(state.config).encode("utf-8")),
            _group(state.theta.tensors),
            _group(state.xi.tensors if state.xi is not None else None),
            _group(state.adam.m),
            _group(state.adam.v),
        ]
    )
    Path(path).write_bytes(body)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.off}, file has {len(self.data)}")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def group(self) -> dict[str, np.ndarray]:
        out = {}
        for _ in range(self.u32()):
            at = self.off
            try:
                name = self.blob().decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointError(f"bad tensor name at offset {at}") from None
            shape = tuple(self.u32() for _ in range(self.u32()))
            n = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
        return out


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> TrainState:
    """Read a checkpoint; optionally insist on a model architecture."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic at offset 0 (not a MOCA1 checkpoint)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset {len(MAGIC)}")
    step = r.u32()
    try:
        meta = json.loads(r.blob().decode("utf-8"))
        cfg_text = r.blob().decode("utf-8")
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header before offset {r.off}: {exc}") from None
    groups = {g: r.group() for g in _GROUPS}
    if r.off != len(r.data):
        raise CheckpointError(f"trailing bytes after offset {r.off}")

    cfg = dict(DEFAULTS)
    cfg.update(parse_config_text(cfg_text))
    mcfg = model_config(cfg)
    if expect is not None and expect != mcfg:
        raise ConfigError(f"checkpoint architecture {mcfg} does not match expected {expect}")
    theta = TransformerParams(mcfg, groups["online"])
    xi = TransformerParams(mcfg, groups["generator"]) if groups["generator"] else None
    for p in (theta, xi):
        if p is not None and not _shapes_match(p):
            raise ConfigError("checkpoint tensors do not match the architecture in its config")
    a = meta["adam"]
    adam = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["warmup"], a["step"], groups["adam_m"], groups["adam_v"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(theta, xi, adam, step, cfg, rng, meta.get("extra", {}))


def _shapes_match(p: TransformerParams) -> bool:
    from .model import param_shapes

    want = param_shapes(p.config)
    return want.keys() == p.tensors.keys() and all(want[k] == p.tensors[k].shape for k in want)
