"""A small pre-layer-norm encoder-decoder transformer on top of :mod:`moca.tensor`.

Sequences are handled as tuples of content token ids; ``bos``/``eos`` are
added at the model boundary. The decoder input for target ``y`` is
``(bos, *y)`` and the prediction targets are ``(*y, eos)``, so a target of
``n`` content tokens contributes ``n + 1`` predicted positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocab:
    """Bijection between token strings and ids; ids 0-3 are reserved."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if any(t in RESERVED for t in tokens):
            raise ConfigError("content tokens may not reuse reserved names")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("duplicate tokens in vocabulary")
        self.itos = list(RESERVED) + tokens
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def synthetic(cls, size: int) -> "Vocab":
        """Vocabulary of ``size`` ids total: the reserved four plus ``t0, t1, ...``."""
        if size <= len(RESERVED):
            raise ConfigError(f"vocab size must exceed {len(RESERVED)}")
        return cls([f"t{i}" for i in range(size - len(RESERVED))])

    def __len__(self):
        return len(self.itos)

    def encode(self, text: str) -> tuple[int, ...]:
        return tuple(self.stoi.get(t, UNK) for t in text.split())

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[i] for i in ids if i not in (PAD, BOS, EOS))


@dataclass(frozen=True)
class Example:
    source: tuple[int, ...]
    target: tuple[int, ...]

    def __post_init__(self):
        if not self.source or not self.target:
            raise ContractError("example source and target must be nonempty")
        if any(i < len(RESERVED) for i in self.source + self.target):
            raise ContractError("example sequences must hold content token ids only")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_positions: int = 32

    def validate(self):
        for k in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_positions"):
            if getattr(self, k) <= 0:
                raise ConfigError(f"{k} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map for every parameter tensor."""
    V, d, f, P = cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_positions
    shapes: dict[str, tuple[int, ...]] = {
        "src_embed": (V, d),
        "tgt_embed": (V, d),
        "src_pos": (P, d),
        "tgt_pos": (P, d),
    }

    def ln(p):
        shapes[p + ".g"] = (d,)
        shapes[p + ".b"] = (d,)

    def attn(p):
        for w in ("q", "k", "v", "o"):
            shapes[f"{p}.w{w}"] = (d, d)
            shapes[f"{p}.b{w}"] = (d,)

    def ff(p):
        shapes[p + ".w1"] = (d, f)
        shapes[p + ".b1"] = (f,)
        shapes[p + ".w2"] = (f, d)
        shapes[p + ".b2"] = (d,)

    for l in range(cfg.n_layers):
        ln(f"enc.{l}.ln1")
        attn(f"enc.{l}.self")
        ln(f"enc.{l}.ln2")
        ff(f"enc.{l}.ff")
    ln("enc.ln")
    for l in range(cfg.n_layers):
        ln(f"dec.{l}.ln1")
        attn(f"dec.{l}.self")
        ln(f"dec.{l}.ln2")
        attn(f"dec.{l}.cross")
        ln(f"dec.{l}.ln3")
        ff(f"dec.{l}.ff")
    ln("dec.ln")
    shapes["out.w"] = (d, V)
    shapes["out.b"] = (V,)
    return shapes


@dataclass
class TransformerParams:
    """Named parameter arrays plus the architecture they belong to.

    Arrays are treated as immutable; updates build a new instance via
    :meth:`replace`. :meth:`leaves` hands out one stable set of
    :class:`Tensor` wrappers per instance so gradients can be keyed by name.
    """

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    _leaves: dict[str, Tensor] | None = field(default=None, repr=False, compare=False)

    def replace(self, tensors: Mapping[str, np.ndarray]) -> "TransformerParams":
        return TransformerParams(self.config, dict(tensors))

    @classmethod
    def from_leaves(cls, config: ModelConfig, leaves: Mapping[str, Tensor]) -> "TransformerParams":
        p = cls(config, {k: t.data for k, t in leaves.items()})
        p._leaves = dict(leaves)
        return p

    def leaves(self) -> dict[str, Tensor]:
        if self._leaves is None:
            self._leaves = {k: Tensor(v, name=k) for k, v in self.tensors.items()}
        return self._leaves

    def astype(self, dtype) -> "TransformerParams":
        return self.replace({k: v.astype(dtype) for k, v in self.tensors.items()})

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def count(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def same_layout(self, other: "TransformerParams") -> bool:
        return self.tensors.keys() == other.tensors.keys() and all(
            self.tensors[k].shape == other.tensors[k].shape for k in self.tensors
        )

    def bitwise_equal(self, other: "TransformerParams") -> bool:
        return self.same_layout(other) and all(
            self.tensors[k].dtype == other.tensors[k].dtype
            and self.tensors[k].tobytes() == other.tensors[k].tobytes()
            for k in self.tensors
        )


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> TransformerParams:
    """Xavier-uniform matrices, unit layer-norm gains, zero biases."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 2:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".g"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = arr.astype(dtype)
    return TransformerParams(cfg, tensors)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _neg_inf_mask(keep: np.ndarray) -> np.ndarray:
    return np.where(keep, 0.0, -np.inf)


def _causal_mask(n: int) -> np.ndarray:
    return _neg_inf_mask(np.tril(np.ones((n, n), dtype=bool)))


def _proj(x, P, w, b):
    return T.add(T.matmul(x, P[w]), P[b])


def _split_heads(x: Tensor, h: int) -> Tensor:
    B, L, d = x.shape
    return T.transpose(T.reshape(x, (B, L, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, L, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, L, h * dh))


def _keys_values(P, prefix, x, h):
    k = _split_heads(_proj(x, P, prefix + ".wk", prefix + ".bk"), h)
    v = _split_heads(_proj(x, P, prefix + ".wv", prefix + ".bv"), h)
    return T.transpose(k), v


def _attend(P, prefix, xq, kv, mask, h):
    kt, v = kv
    q = _split_heads(_proj(xq, P, prefix + ".wq", prefix + ".bq"), h)
    scores = T.scale(T.matmul(q, kt), 1.0 / math.sqrt(q.shape[-1]))
    ctx = T.matmul(T.softmax_rows(scores, mask), v)
    return _proj(_merge_heads(ctx), P, prefix + ".wo", prefix + ".bo")


def _ln(P, prefix, x):
    return T.layer_norm(x, P[prefix + ".g"], P[prefix + ".b"])


def _ff(P, prefix, x):
    hdn = T.gelu(_proj(x, P, prefix + ".w1", prefix + ".b1"))
    return _proj(hdn, P, prefix + ".w2", prefix + ".b2")


def _check_lengths(cfg: ModelConfig, src_len: int, tgt_len: int):
    if src_len > cfg.max_positions or tgt_len > cfg.max_positions:
        raise ContractError(
            f"sequence length (source {src_len}, target {tgt_len}) exceeds "
            f"max_positions={cfg.max_positions}"
        )


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


@dataclass
class Memory:
    """Encoder output for a batch of sources, with cross-attention keys/values per layer."""

    kv: list
    mask: np.ndarray


def encode(params: TransformerParams, sources: Sequence[Sequence[int]]) -> Memory:
    cfg = params.config
    P = params.leaves()
    ids = pad_batch(sources)
    B, S = ids.shape
    _check_lengths(cfg, S, 0)
    keep = ids != PAD
    mask = _neg_inf_mask(keep)[:, None, None, :]
    x = T.add(T.embedding(P["src_embed"], ids), T.slice_(P["src_pos"], 0, 0, S))
    for l in range(cfg.n_layers):
        hn = _ln(P, f"enc.{l}.ln1", x)
        x = T.add(x, _attend(P, f"enc.{l}.self", hn, _keys_values(P, f"enc.{l}.self", hn, cfg.n_heads), mask, cfg.n_heads))
        x = T.add(x, _ff(P, f"enc.{l}.ff", _ln(P, f"enc.{l}.ln2", x)))
    mem = _ln(P, "enc.ln", x)
    kv = [_keys_values(P, f"dec.{l}.cross", mem, cfg.n_heads) for l in range(cfg.n_layers)]
    return Memory(kv, mask)


def decode(params: TransformerParams, memory: Memory, tgt_in: np.ndarray) -> Tensor:
    """Log-probabilities ``[B, L, V]`` for decoder inputs ``tgt_in`` (``[B, L]`` ids)."""
    cfg = params.config
    P = params.leaves()
    tgt_in = np.asarray(tgt_in, dtype=np.int64)
    L = tgt_in.shape[1]
    _check_lengths(cfg, 0, L)
    causal = _causal_mask(L)
    x = T.add(T.embedding(P["tgt_embed"], tgt_in), T.slice_(P["tgt_pos"], 0, 0, L))
    for l in range(cfg.n_layers):
        hn = _ln(P, f"dec.{l}.ln1", x)
        x = T.add(x, _attend(P, f"dec.{l}.self", hn, _keys_values(P, f"dec.{l}.self", hn, cfg.n_heads), causal, cfg.n_heads))
        hn = _ln(P, f"dec.{l}.ln2", x)
        x = T.add(x, _attend(P, f"dec.{l}.cross", hn, memory.kv[l], memory.mask, cfg.n_heads))
        x = T.add(x, _ff(P, f"dec.{l}.ff", _ln(P, f"dec.{l}.ln3", x)))
    logits = _proj(_ln(P, "dec.ln", x), P, "out.w", "out.b")
    return T.log_softmax_rows(logits)


def teacher_forced(params: TransformerParams, sources, targets):
    """Batched teacher-forced log-probs.

    Returns ``(logp [B, L, V], gold [B, L], lengths [B])`` where row ``t`` of
    example ``b`` predicts ``gold[b, t]`` and only the first ``lengths[b]``
    rows are real (content plus eos).
    """
    if len(sources) != len(targets) or not sources:
        raise ContractError("teacher_forced: need equally many nonempty sources and targets")
    for s, y in zip(sources, targets):
        _check_lengths(params.config, len(s), len(y) + 1)
    mem = encode(params, sources)
    tgt_in = pad_batch([(BOS, *y) for y in targets])
    gold = pad_batch([(*y, EOS) for y in targets])
    lengths = np.array([len(y) + 1 for y in targets])
    return decode(params, mem, tgt_in), gold, lengths


def forward_logprobs(params: TransformerParams, source: Sequence[int], target: Sequence[int]) -> Tensor:
    """``[len(target) + 1, V]`` matrix; row ``t`` is log p(. | target[:t], source)."""
    logp, _, _ = teacher_forced(params, [tuple(source)], [tuple(target)])
    n, L, V = logp.shape
    return T.reshape(logp, (L, V))


def _valid_weights(lengths: np.ndarray, width: int, per_row: np.ndarray) -> np.ndarray:
    pos = np.arange(width)[None, :]
    return np.where(pos < lengths[:, None], per_row[:, None], 0.0)


def batch_mle_loss(params: TransformerParams, examples: Sequence[Example]) -> Tensor:
    """Mean over examples of the per-example length-normalized NLL."""
    if not examples:
        raise ContractError("mle loss needs at least one example")
    for ex in examples:
        if not ex.target:
            raise ContractError("mle loss: empty target")
    logp, gold, lengths = teacher_forced(params, [e.source for e in examples], [e.target for e in examples])
    w = _valid_weights(lengths, gold.shape[1], 1.0 / (lengths * len(examples)))
    return T.sum_(T.cross_entropy(logp, gold, w))


def mle_loss(params: TransformerParams, example: Example) -> Tensor:
    return batch_mle_loss(params, [example])


def _chunks(seq, n):
    for i in range(0, len(seq), n):
        yield seq[i : i + n]


def token_predictions(params: TransformerParams, examples: Sequence[Example], chunk: int = 64):
    """Teacher-forced argmax per example, as a list of (pred, gold) id arrays (eos included)."""
    out = []
    for part in _chunks(list(examples), chunk):
        logp, gold, lengths = teacher_forced(params, [e.source for e in part], [e.target for e in part])
        pred = logp.data.argmax(axis=-1)
        for b, n in enumerate(lengths):
            out.append((pred[b, :n], gold[b, :n]))
    return out


def positional_accuracy(params: TransformerParams, dataset: Sequence[Example], bucket_width: int = 5):
    """Teacher-forced accuracy by target position, grouped into buckets.

    Returns ``[((lo, hi), accuracy, count), ...]`` for non-empty buckets, where
    ``[lo, hi)`` is a 0-based range of predicted positions (eos included).
    """
    if not dataset:
        raise ContractError("positional_accuracy: empty dataset")
    if bucket_width < 1:
        raise ContractError("positional_accuracy: bucket width must be >= 1")
    hits: dict[int, int] = {}
    counts: dict[int, int] = {}
    for pred, gold in token_predictions(params, dataset):
        for t, ok in enumerate(pred == gold):
            b = t // bucket_width
            hits[b] = hits.get(b, 0) + int(ok)
            counts[b] = counts.get(b, 0) + 1
    return [
        ((b * bucket_width, (b + 1) * bucket_width), hits[b] / counts[b], counts[b])
        for b in sorted(counts)
    ]


def decode_step(params: TransformerParams, memory: Memory, cache, tokens: np.ndarray, pos: int):
    """Incremental decoder step for inference.

    ``tokens`` ``[n]`` are the inputs at position ``pos`` (bos at 0);
    ``cache`` holds per-layer self-attention keys/values for positions
    ``< pos`` (``None`` at ``pos == 0``), already aligned with the ``n`` rows.
    Returns ``(logp [n, V], new_cache)``; rows match the full-prefix
    :func:`decode` output at position ``pos``.
    """
    cfg = params.config
    P = params.leaves()
    _check_lengths(cfg, 0, pos + 1)
    h = cfg.n_heads
    ids = np.asarray(tokens, dtype=np.int64)[:, None]
    x = T.add(T.embedding(P["tgt_embed"], ids), T.slice_(P["tgt_pos"], 0, pos, pos + 1))
    new_cache = []
    for l in range(cfg.n_layers):
        pre = f"dec.{l}.self"
        hn = _ln(P, f"dec.{l}.ln1", x)
        kt, v = _keys_values(P, pre, hn, h)
        if cache is not None:
            kt = T.concat([cache[l][0], kt], axis=-1)
            v = T.concat([cache[l][1], v], axis=-2)
        new_cache.append((kt, v))
        x = T.add(x, _attend(P, pre, hn, (kt, v), None, h))
        hn = _ln(P, f"dec.{l}.ln2", x)
        x = T.add(x, _attend(P, f"dec.{l}.cross", hn, memory.kv[l], memory.mask, h))
        x = T.add(x, _ff(P, f"dec.{l}.ff", _ln(P, f"dec.{l}.ln3", x)))
    logits = _proj(_ln(P, "dec.ln", x), P, "out.w", "out.b")
    logp = T.log_softmax_rows(logits)
    n, _, V = logp.shape
    return T.reshape(logp, (n, V)), new_cache
