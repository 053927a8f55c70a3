"""Momentum calibration: candidates from an EMA generator, ranked by ROUGE,
with a margin ranking loss on position-weighted sequence costs.

Cost convention: ``cost = -(1 / len**alpha) * sum_t w_t * log p(y_t | y_<t, x)``,
so lower cost means more probable. Ranked sets are ordered worst-first
(ascending metric), and the ranking loss pushes a candidate at a later
index to have a lower cost than every earlier one by ``(j - i) * margin``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.stats import kendalltau

from . import tensor as T
from .decoding import DecodeConfig, batch_beam_search, batch_diverse_beam_search
from .errors import ConfigError, ContractError
from .model import EOS, Example, TransformerParams, batch_mle_loss, teacher_forced
from .rouge import MetricKind, eval_score
from .tensor import AdamState, Tensor

log = logging.getLogger(__name__)

WEIGHTINGS = ("constant", "positional")


@dataclass(frozen=True)
class CalibConfig:
    K: int = 16
    margin: float = 0.001
    cost_alpha: float = 2.0
    mle_weight: float = 0.01
    momentum: float = 0.99
    weighting: str = "constant"
    decode: DecodeConfig = field(
        default_factory=lambda: DecodeConfig(
            beam_size=16, num_groups=16, diversity_strength=1.0, length_penalty=2.0, max_length=20
        )
    )
    metric: MetricKind = MetricKind.MEAN
    search: str = "diverse"

    def validate(self) -> "CalibConfig":
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if self.margin < 0 or self.cost_alpha < 0 or self.mle_weight < 0:
            raise ConfigError("margin, cost_alpha and mle_weight must be >= 0")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum must lie in [0, 1]")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}")
        if self.search not in ("diverse", "beam"):
            raise ConfigError("search must be 'diverse' or 'beam'")
        self.decode.validate()
        return self


@dataclass
class Candidate:
    tokens: tuple[int, ...]
    generator_score: float
    metric_score: float | None = None
    online_cost: float | None = None

    @property
    def content(self) -> tuple[int, ...]:
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == EOS else self.tokens


@dataclass
class RankedCandidateSet:
    candidates: list[Candidate]
    source: tuple[int, ...]
    gold: tuple[int, ...]

    def __len__(self):
        return len(self.candidates)


# ---------------------------------------------------------------------------
# costs and losses
# ---------------------------------------------------------------------------


def positional_weights(n: int, weighting: str = "positional") -> np.ndarray:
    """Per-position weights with mean 1.

    ``positional`` grows as ``1 / (n + 1 - t)**2`` and is rescaled to mean
    one, so the last positions dominate.
    """
    if n < 1:
        raise ContractError(f"positional_weights: n must be >= 1, got {n}")
    if weighting == "constant":
        return np.ones(n)
    if weighting != "positional":
        raise ContractError(f"unknown weighting {weighting!r}")
    raw = 1.0 / np.arange(n, 0, -1, dtype=np.float64) ** 2
    return n * raw / raw.sum()


def _cost_weights(token_lists, alpha: float, weighting: str, width: int) -> np.ndarray:
    w = np.zeros((len(token_lists), width))
    for b, toks in enumerate(token_lists):
        n = len(toks)
        w[b, :n] = positional_weights(n, weighting) / n**alpha
    return w


def batch_sequence_costs(
    params: TransformerParams,
    sources: Sequence[Sequence[int]],
    token_lists: Sequence[Sequence[int]],
    alpha: float,
    weighting: str = "constant",
) -> Tensor:
    """Costs ``[N]`` of generated token sequences (eos-terminated or truncated)."""
    targets = [tuple(t[:-1]) if t and t[-1] == EOS else tuple(t) for t in token_lists]
    if any(not t for t in token_lists):
        raise ContractError("sequence_cost: empty candidate")
    logp, gold, _ = teacher_forced(params, [tuple(s) for s in sources], targets)
    w = _cost_weights(token_lists, alpha, weighting, gold.shape[1])
    return T.sum_(T.cross_entropy(logp, gold, w), axis=1)


def sequence_cost(params, source, tokens, alpha: float, weighting: str = "constant") -> Tensor:
    """Scalar cost of one candidate (``tokens`` as generated, eos included)."""
    costs = batch_sequence_costs(params, [source], [tokens], alpha, weighting)
    return T.reshape(costs, ())


def _pair_system(sizes: Sequence[int], margin: float):
    """Difference matrix D (pairs x total) and margin vector for block-wise pair sums."""
    rows, margins, offset = [], [], 0
    total = sum(sizes)
    for blk, n in enumerate(sizes):
        for i in range(n):
            for j in range(i + 1, n):
                r = np.zeros(total)
                r[offset + j] = 1.0
                r[offset + i] = -1.0
                rows.append(r)
                margins.append((j - i) * margin)
        offset += n
    return np.array(rows).reshape(len(rows), total), np.array(margins)


def _ranking_from_costs(costs: Tensor, sizes: Sequence[int], margin: float) -> Tensor:
    D, m = _pair_system(sizes, margin)
    diffs = T.matmul(Tensor(D.astype(costs.dtype)), T.reshape(costs, (costs.shape[0], 1)))
    hinge = T.relu(T.add(T.reshape(diffs, (D.shape[0],)), Tensor(m.astype(costs.dtype))))
    return T.sum_(hinge)


def ranking_loss(costs, margin: float) -> Tensor:
    """Sum over pairs i < j of ``max(0, cost_j - cost_i + (j - i) * margin)``.

    ``costs`` are ordered worst candidate first.
    """
    if not isinstance(costs, Tensor):
        costs = Tensor(np.asarray(costs, dtype=np.float64))
    n = costs.shape[0] if costs.shape else 0
    if n < 2:
        raise ContractError(f"ranking_loss: need at least 2 costs, got {n}")
    return _ranking_from_costs(costs, [n], margin)


@dataclass
class LossParts:
    total: Tensor
    ranking: Tensor
    mle: Tensor
    costs: Tensor
    sizes: list[int]


def batch_moca_loss(
    theta: TransformerParams,
    ranked: Sequence[RankedCandidateSet],
    examples: Sequence[Example],
    config: CalibConfig,
) -> LossParts:
    """Mean over examples of ``ranking_loss + mle_weight * mle_loss``."""
    if not ranked or len(ranked) != len(examples):
        raise ContractError("batch_moca_loss: need one ranked set per example")
    sources, toks, sizes = [], [], []
    for rs in ranked:
        sizes.append(len(rs))
        for c in rs.candidates:
            sources.append(rs.source)
            toks.append(c.tokens)
    costs = batch_sequence_costs(theta, sources, toks, config.cost_alpha, config.weighting)
    E = len(ranked)
    rank = T.scale(_ranking_from_costs(costs, sizes, config.margin), 1.0 / E)
    mle = batch_mle_loss(theta, examples)
    total = T.add(rank, T.scale(mle, config.mle_weight))
    return LossParts(total, rank, mle, costs, sizes)


def moca_loss(theta: TransformerParams, ranked: RankedCandidateSet, example: Example, config: CalibConfig) -> Tensor:
    return batch_moca_loss(theta, [ranked], [example], config).total


# ---------------------------------------------------------------------------
# candidates
# ---------------------------------------------------------------------------


def _filter_candidates(hyps, K: int) -> list[Candidate]:
    out, seen = [], set()
    for h in hyps:
        if not h.content or h.tokens in seen:
            continue
        seen.add(h.tokens)
        out.append(Candidate(h.tokens, h.normalized_score))
        if len(out) == K:
            break
    return out


def generate_candidate_batch(xi: TransformerParams, sources, config: CalibConfig) -> list[list[Candidate]]:
    search = batch_diverse_beam_search if config.search == "diverse" else batch_beam_search
    return [_filter_candidates(hyps, config.K) for hyps in search(xi, [tuple(s) for s in sources], config.decode)]


def generate_candidates(xi: TransformerParams, source: Sequence[int], config: CalibConfig) -> list[Candidate]:
    """Up to K unique, non-empty candidates decoded from the generator.

    Fewer than two survivors means the example should be skipped.
    """
    return generate_candidate_batch(xi, [source], config)[0]


def rank_candidates(candidates: Sequence[Candidate], gold: Sequence[int], metric=MetricKind.MEAN, source=()) -> RankedCandidateSet:
    """Worst-first order by metric; ties keep higher generator scores first."""
    if len(candidates) < 2:
        raise ContractError(f"rank_candidates: need >= 2 candidates, got {len(candidates)}")
    scored = [replace(c, metric_score=eval_score(c.content, gold, metric)) for c in candidates]
    scored.sort(key=lambda c: -c.generator_score)
    scored.sort(key=lambda c: c.metric_score)
    return RankedCandidateSet(scored, tuple(source), tuple(gold))


# ---------------------------------------------------------------------------
# momentum update and training step
# ---------------------------------------------------------------------------


def ema_update(xi: TransformerParams, theta: TransformerParams, m: float) -> TransformerParams:
    """``xi <- m * xi + (1 - m) * theta`` for every named tensor."""
    if not xi.same_layout(theta):
        raise ContractError("ema_update: generator and online parameters differ in names or shapes")
    return xi.replace({k: m * v + (1 - m) * theta.tensors[k] for k, v in xi.tensors.items()})


@dataclass
class TrainState:
    theta: TransformerParams
    xi: TransformerParams | None
    adam: AdamState
    step: int
    config: dict
    rng: np.random.Generator
    extra: dict = field(default_factory=dict)  # JSON-able loop bookkeeping saved with checkpoints


@dataclass
class StepReport:
    step: int
    loss: float
    ranking_loss: float
    mle_loss: float
    skipped: int
    batch_size: int
    mean_metric: float
    kendall_tau: float
    generator_calls: int

    @property
    def skip_rate(self) -> float:
        return self.skipped / self.batch_size if self.batch_size else 0.0


def kendall_agreement(costs: Sequence[float], metrics: Sequence[float]) -> float:
    """Kendall's tau-b between ``-cost`` and metric (nan when undefined)."""
    if len(costs) < 2 or np.ptp(costs) == 0 or np.ptp(metrics) == 0:
        return float("nan")
    return float(kendalltau(-np.asarray(costs), np.asarray(metrics)).statistic)


def _nanmean(xs) -> float:
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else float("nan")


def moca_train_step(
    state: TrainState,
    batch: Sequence[Example],
    config: CalibConfig,
    candidates_for: Callable[[Example], list[Candidate]] | None = None,
    momentum: float | None = None,
) -> tuple[TrainState, StepReport]:
    """Generate, rank, one Adam step on theta, one EMA step on xi.

    ``candidates_for`` replaces generation from ``state.xi`` (offline mode);
    ``momentum`` overrides ``config.momentum``.
    """
    m = config.momentum if momentum is None else momentum
    if candidates_for is None:
        pool = generate_candidate_batch(state.xi, [ex.source for ex in batch], config)
        calls = len(batch)
    else:
        pool = [candidates_for(ex) for ex in batch]
        calls = 0
    ranked, kept = [], []
    for ex, cands in zip(batch, pool):
        if len(cands) < 2:
            continue
        ranked.append(rank_candidates(cands, ex.target, config.metric, ex.source))
        kept.append(ex)
    skipped = len(batch) - len(kept)
    step = state.step + 1
    if not kept:
        log.warning("step %d: every example skipped (fewer than 2 unique candidates)", step)
        nan = float("nan")
        return replace(state, step=step), StepReport(step, nan, nan, nan, skipped, len(batch), nan, nan, calls)

    theta = state.theta
    with T.Tape() as tape:
        parts = batch_moca_loss(theta, ranked, kept, config)
    grads = T.grad_by_name(tape, T.backward(tape, parts.total), theta.leaves())
    new_theta, adam = T.adam_step(theta, grads, state.adam)
    new_xi = ema_update(state.xi, new_theta, m)

    costs = parts.costs.data.astype(np.float64)
    taus, metrics, off = [], [], 0
    for rs, n in zip(ranked, parts.sizes):
        ms = [c.metric_score for c in rs.candidates]
        metrics.extend(ms)
        taus.append(kendall_agreement(costs[off : off + n], ms))
        off += n
    report = StepReport(
        step,
        parts.total.item(),
        parts.ranking.item(),
        parts.mle.item(),
        skipped,
        len(batch),
        float(np.mean(metrics)),
        _nanmean(taus),
        calls,
    )
    return replace(state, theta=new_theta, xi=new_xi, adam=adam, step=step), report
