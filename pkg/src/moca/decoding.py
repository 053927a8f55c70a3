"""Greedy, beam and diverse beam search, plus an exhaustive-search oracle.

All searches share one convention: a hypothesis' length counts every
generated token including the final eos, pruning inside a step uses the raw
cumulative log-probability, and the length penalty only enters the final
ranking (``sum_logprob / length ** length_penalty``). Ties go to the lowest
token id, then to the earlier hypothesis / group.

Besides :class:`~moca.model.TransformerParams`, every search accepts any
object with a ``prefix_scorer(source)`` method returning a callable that
maps a list of generated prefixes to an ``[n, V]`` array of next-token
log-probabilities (see :class:`TableModel`).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .model import BOS, EOS, RESERVED, Memory, TransformerParams, decode_step, encode, teacher_forced
from .tensor import Tensor

Scorer = Callable[[Sequence[tuple[int, ...]]], np.ndarray]


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 4
    num_groups: int = 1
    diversity_strength: float = 0.0
    length_penalty: float = 1.0
    max_length: int = 20
    min_length: int = 1

    def validate(self) -> "DecodeConfig":
        if self.beam_size < 1 or self.num_groups < 1:
            raise ConfigError("beam_size and num_groups must be >= 1")
        if self.beam_size % self.num_groups:
            raise ConfigError(f"beam_size={self.beam_size} is not divisible by num_groups={self.num_groups}")
        if not self.max_length >= self.min_length >= 1:
            raise ConfigError("need max_length >= min_length >= 1")
        if self.diversity_strength < 0:
            raise ConfigError("diversity_strength must be >= 0")
        return self

    @property
    def group_width(self) -> int:
        return self.beam_size // self.num_groups


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    sum_logprob: float
    normalized_score: float
    finished: bool

    @property
    def content(self) -> tuple[int, ...]:
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == EOS else self.tokens


def _hyp(tokens, s, alpha) -> Hypothesis:
    return Hypothesis(tuple(tokens), s, s / len(tokens) ** alpha, True)


def _rank_key(h: Hypothesis):
    return (-h.normalized_score, h.tokens)


def make_scorer(model, sources: Sequence[Sequence[int]]) -> Callable:
    """Next-token scorer for a fixed list of sources.

    The returned callable takes ``rows`` of ``(source_index, prefix, parent)``
    where ``parent`` is the row of the previous call this prefix extends
    (ignored on the first call) and returns ``[len(rows), V]`` log-probs.
    """
    sources = [tuple(x) for x in sources]
    if hasattr(model, "prefix_scorer"):
        per = [model.prefix_scorer(x) for x in sources]
        return lambda rows: np.concatenate([per[i]([p]) for i, p, _ in rows])
    with T.no_tape():
        mem = encode(model, sources)
    kv = [(k.data, v.data) for k, v in mem.kv]
    state = {"cache": None}

    def score(rows):
        idx = np.array([i for i, _, _ in rows])
        pos = len(rows[0][1])
        sub = Memory([(Tensor(k[idx]), Tensor(v[idx])) for k, v in kv], mem.mask[idx])
        cache = state["cache"]
        if pos == 0:
            tokens = np.full(len(rows), BOS)
            cache = None
        else:
            parents = np.array([par for _, _, par in rows])
            tokens = np.array([p[-1] for _, p, _ in rows])
            cache = [(Tensor(k.data[parents]), Tensor(v.data[parents])) for k, v in cache]
        with T.no_tape():
            logp, state["cache"] = decode_step(model, sub, cache, tokens, pos)
        return logp.data.astype(np.float64)

    return score


def _mask(lp: np.ndarray, step: int, cfg: DecodeConfig) -> np.ndarray:
    lp = lp.copy()
    lp[:, [i for i in range(len(RESERVED)) if i != EOS]] = -np.inf
    if step + 1 < cfg.min_length:
        lp[:, EOS] = -np.inf
    return lp


def greedy_decode(model, source: Sequence[int], cfg: DecodeConfig) -> Hypothesis:
    cfg.validate()
    scorer = make_scorer(model, [source])
    toks: tuple[int, ...] = ()
    s = 0.0
    for step in range(cfg.max_length):
        lp = _mask(scorer([(0, toks, 0)]), step, cfg)[0]
        tok = int(np.argmax(lp))
        toks += (tok,)
        s = s + lp[tok]
        if tok == EOS:
            break
    return _hyp(toks, float(s), cfg.length_penalty)


def _group_search(model, sources, cfg: DecodeConfig, groups: int, width: int, strength: float):
    """Run grouped beam search for every source at once.

    Returns, per source, a list (one entry per group) of that group's best
    ``width`` finished hypotheses. Sources never interact: batching only
    shares the forward pass.
    """
    scorer = make_scorer(model, sources)
    n_src = len(sources)
    # live[e][g]: list of (tokens, sum_logprob, row in the previous scorer call)
    live = [[[((), 0.0, 0)] for _ in range(groups)] for _ in range(n_src)]
    done = [[[] for _ in range(groups)] for _ in range(n_src)]
    for step in range(cfg.max_length):
        rows = [(e, toks, par) for e in range(n_src) for g in live[e] for toks, _, par in g]
        if not rows:
            break
        lp_all = _mask(scorer(rows), step, cfg)
        V = lp_all.shape[1]
        row = 0
        for e in range(n_src):
            counts = np.zeros(V)
            for g in range(groups):
                beams = live[e][g]
                n = len(beams)
                if not n:
                    continue
                lp = lp_all[row : row + n]
                row += n
                sel = np.array([b[1] for b in beams])[:, None] + lp
                if strength and g:
                    sel = sel - strength * counts[None, :]
                flat = sel.ravel()
                # primary: score desc; then token id asc; then hypothesis index asc
                order = np.lexsort((np.arange(flat.size) // V, np.arange(flat.size) % V, -flat))
                nxt = []
                for k in order[:width]:
                    i, tok = divmod(int(k), V)
                    if not np.isfinite(sel[i, tok]):
                        break
                    toks = beams[i][0] + (tok,)
                    s = beams[i][1] + lp[i, tok]
                    counts[tok] += 1
                    if tok == EOS or len(toks) == cfg.max_length:
                        done[e][g].append(_hyp(toks, float(s), cfg.length_penalty))
                    else:
                        nxt.append((toks, s, row - n + i))
                live[e][g] = nxt
    return [[sorted(d, key=_rank_key)[:width] for d in per] for per in done]


def _dedup(per_group) -> list[Hypothesis]:
    seen, out = set(), []
    for hyps in per_group:
        for h in hyps:
            if h.tokens not in seen:
                seen.add(h.tokens)
                out.append(h)
    return out


def beam_search(model, source: Sequence[int], cfg: DecodeConfig) -> list[Hypothesis]:
    """Top ``beam_size`` finished hypotheses by normalized score, best first."""
    cfg.validate()
    return _group_search(model, [source], cfg, 1, cfg.beam_size, 0.0)[0][0]


def batch_beam_search(model, sources, cfg: DecodeConfig) -> list[list[Hypothesis]]:
    cfg.validate()
    return [r[0] for r in _group_search(model, sources, cfg, 1, cfg.beam_size, 0.0)]


def diverse_beam_search(model, source: Sequence[int], cfg: DecodeConfig) -> list[Hypothesis]:
    """Hamming-diversity beam search over ``num_groups`` groups.

    Groups are expanded in order at every step; group ``g`` pays
    ``diversity_strength`` per use of a token already chosen at this step by
    groups ``< g``. The penalty only steers selection: reported log-probs
    are the model's own. Output is each group's best hypotheses in group
    order, with exact duplicates removed.
    """
    return batch_diverse_beam_search(model, [source], cfg)[0]


def batch_diverse_beam_search(model, sources, cfg: DecodeConfig) -> list[list[Hypothesis]]:
    cfg.validate()
    res = _group_search(model, sources, cfg, cfg.num_groups, cfg.group_width, cfg.diversity_strength)
    return [_dedup(r) for r in res]


def _enumerate(eligible: Sequence[int], max_length: int, min_length: int):
    content = [t for t in eligible if t != EOS]
    for n in range(1, max_length + 1):
        for body in itertools.product(content, repeat=n - 1):
            if n >= min_length:
                yield body + (EOS,)
            if n == max_length:
                for last in content:
                    yield body + (last,)


def exhaustive_search(
    model,
    source: Sequence[int],
    max_length: int,
    length_penalty: float,
    min_length: int = 1,
    vocab_size: int | None = None,
    limit: int = 10**6,
) -> Hypothesis:
    """Score every terminated sequence independently and return the best.

    A sequence terminates with eos or by reaching ``max_length``. Transformer
    models are scored by teacher forcing, not by the incremental decoder.
    """
    if vocab_size is None:
        vocab_size = model.config.vocab_size
    eligible = [EOS] + list(range(len(RESERVED), vocab_size))
    if len(eligible) ** max_length > limit:
        raise ContractError(f"exhaustive_search: {len(eligible)}^{max_length} exceeds the {limit} guard")
    seqs = list(_enumerate(eligible, max_length, min_length))
    sums = _score_sequences(model, source, seqs)
    best = min((_hyp(s, float(v), length_penalty) for s, v in zip(seqs, sums)), key=_rank_key)
    return best


def _score_sequences(model, source, seqs) -> np.ndarray:
    if isinstance(model, TransformerParams):
        with T.no_tape():
            targets = [s[:-1] if s[-1] == EOS else s for s in seqs]
            logp, gold, lengths = teacher_forced(model, [tuple(source)] * len(seqs), targets)
        lp = logp.data.astype(np.float64)
        out = np.empty(len(seqs))
        for b, s in enumerate(seqs):
            out[b] = sum(lp[b, t, tok] for t, tok in enumerate(s))
        return out
    scorer = model.prefix_scorer(tuple(source))
    return np.array([sum(scorer([s[:t]])[0, tok] for t, tok in enumerate(s)) for s in seqs])


class TableModel:
    """Hand-specified next-token log-probabilities keyed by generated prefix.

    ``table`` maps a prefix tuple to a ``{token: prob}`` dict; missing
    prefixes fall back to ``default`` (or uniform over content + eos).
    Useful for building decoding witnesses by hand.
    """

    def __init__(self, vocab_size: int, table: dict, default: dict | None = None):
        self.vocab_size = vocab_size
        self.table = table
        self.default = default

    def _row(self, prefix) -> np.ndarray:
        probs = self.table.get(tuple(prefix), self.default)
        row = np.full(self.vocab_size, -np.inf)
        if probs is None:
            eligible = [EOS] + list(range(len(RESERVED), self.vocab_size))
            row[eligible] = -np.log(len(eligible))
        else:
            for tok, p in probs.items():
                row[tok] = np.log(p)
        return row

    def prefix_scorer(self, source):
        return lambda prefixes: np.stack([self._row(p) for p in prefixes])
