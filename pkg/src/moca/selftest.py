"""Built-in oracle checks run by the ``selftest`` command.

Each check compares a fast implementation against an independent slow one:
gradients against central differences, beam search against exhaustive
enumeration, ROUGE against brute-force counting, and the positional weights
and ranking loss against closed forms.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from .calibration import CalibConfig, Candidate, moca_loss, positional_weights, rank_candidates, ranking_loss
from .decoding import DecodeConfig, beam_search, exhaustive_search, greedy_decode
from .model import RESERVED, Example, ModelConfig, TransformerParams, init_params, mle_loss
from .rouge import rouge_l, rouge_n
from .tensor import finite_difference_errors

GRAD_TOL = 1e-5
ROUGE_TOL = 1e-12


@dataclass(frozen=True)
class CheckResult:
    module: str
    name: str
    seed: int
    magnitude: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.module:<16} {self.name:<32} seed={self.seed:<4} magnitude={self.magnitude:.3e}"


# ---------------------------------------------------------------------------
# shared oracle fixtures
# ---------------------------------------------------------------------------


def random_point(cfg: ModelConfig, seed: int) -> TransformerParams:
    """f64 parameters with every tensor (biases and gains too) randomized."""
    rng = np.random.default_rng(seed)
    base = init_params(cfg, seed, np.float64)
    return base.replace({k: v + 0.3 * rng.standard_normal(v.shape) for k, v in base.tensors.items()})


def tiny_grad_config() -> ModelConfig:
    return ModelConfig(vocab_size=8, d_model=4, n_heads=2, n_layers=1, d_ff=8, max_positions=8)


def random_example(rng: np.random.Generator, vocab_size: int, max_len: int = 5) -> Example:
    lo = len(RESERVED)
    src = tuple(int(t) for t in rng.integers(lo, vocab_size, size=int(rng.integers(1, max_len + 1))))
    tgt = tuple(int(t) for t in rng.integers(lo, vocab_size, size=int(rng.integers(1, max_len + 1))))
    return Example(src, tgt)


def random_ranked_set(rng: np.random.Generator, ex: Example, vocab_size: int, n: int = 4):
    from .model import EOS

    cands, seen = [], set()
    while len(cands) < n:
        body = tuple(int(t) for t in rng.integers(len(RESERVED), vocab_size, size=int(rng.integers(1, 6))))
        toks = body + (EOS,) if rng.random() < 0.8 else body
        if toks in seen:
            continue
        seen.add(toks)
        cands.append(Candidate(toks, float(rng.standard_normal())))
    return rank_candidates(cands, ex.target, source=ex.source)


def gradient_errors(seed: int, objective: str, grad_transform=None, max_coords: int = 24) -> dict[str, float]:
    """Per-tensor FD relative errors of ``mle`` or ``moca`` loss at a random f64 point."""
    cfg = tiny_grad_config()
    point = random_point(cfg, seed)
    rng = np.random.default_rng(seed + 1000)
    ex = random_example(rng, cfg.vocab_size)
    if objective == "mle":
        fn = lambda leaves: mle_loss(TransformerParams.from_leaves(cfg, leaves), ex)  # noqa: E731
    else:
        ranked = random_ranked_set(rng, ex, cfg.vocab_size)
        ccfg = CalibConfig(K=4, margin=0.001, cost_alpha=2.0, mle_weight=0.01, weighting="positional")
        fn = lambda leaves: moca_loss(TransformerParams.from_leaves(cfg, leaves), ranked, ex, ccfg)  # noqa: E731
    return finite_difference_errors(fn, point.tensors, step=1e-5, max_coords=max_coords, seed=seed, grad_transform=grad_transform)


def tiny_decoder(seed: int, n_content: int, sharpness: float = 3.0) -> TransformerParams:
    """Random f64 model over ``n_content`` content tokens, with peaked distributions."""
    cfg = ModelConfig(vocab_size=len(RESERVED) + n_content, d_model=8, n_heads=2, n_layers=1, d_ff=16, max_positions=8)
    p = init_params(cfg, seed, np.float64)
    return p.replace({k: v * sharpness if v.ndim == 2 else v for k, v in p.tensors.items()})


def decoder_oracle_case(seed: int):
    """(model, source, max_length, alpha) for one random tiny decoding problem."""
    rng = np.random.default_rng(seed)
    n_content = int(rng.integers(1, 4))  # eligible tokens = content + eos <= 4
    model = tiny_decoder(seed, n_content)
    source = tuple(int(t) for t in rng.integers(len(RESERVED), len(RESERVED) + n_content, size=int(rng.integers(1, 5))))
    max_len = int(rng.integers(1, 5))
    alpha = float(rng.choice([0.0, 0.6, 1.0, 2.0]))
    return model, source, max_len, alpha


def check_decoder_case(seed: int) -> tuple[bool, bool]:
    """(beam at full width == exhaustive argmax, greedy == width-1 beam bitwise)."""
    model, source, max_len, alpha = decoder_oracle_case(seed)
    eligible = model.config.vocab_size - len(RESERVED) + 1
    full = DecodeConfig(beam_size=eligible**max_len, length_penalty=alpha, max_length=max_len)
    best = beam_search(model, source, full)[0]
    oracle = exhaustive_search(model, source, max_len, alpha)
    one = DecodeConfig(beam_size=1, length_penalty=alpha, max_length=max_len)
    g = greedy_decode(model, source, one)
    b1 = beam_search(model, source, one)[0]
    same_greedy = g.tokens == b1.tokens and np.float64(g.sum_logprob).tobytes() == np.float64(b1.sum_logprob).tobytes()
    return best.tokens == oracle.tokens, same_greedy


def brute_rouge_n(c, r, n) -> tuple[float, float, float]:
    """ROUGE-N by explicit counting over positions."""
    cg = [tuple(c[i : i + n]) for i in range(len(c) - n + 1)]
    rg = [tuple(r[i : i + n]) for i in range(len(r) - n + 1)]
    overlap = 0
    for g in set(cg):
        overlap += min(cg.count(g), rg.count(g))
    return _prf(overlap, len(cg), len(rg))


def brute_lcs(a, b) -> int:
    """Longest common subsequence by enumerating subsequences of the shorter input."""
    if len(a) > len(b):
        a, b = b, a
    for k in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), k):
            sub = [a[i] for i in idx]
            it = iter(b)
            if all(any(x == y for y in it) for x in sub):
                return k
    return 0


def brute_rouge_l(c, r) -> tuple[float, float, float]:
    return _prf(brute_lcs(c, r), len(c), len(r))


def _prf(overlap, n_c, n_r):
    if overlap == 0 or n_c == 0 or n_r == 0:
        return 0.0, 0.0, 0.0
    p, r = Fraction(overlap, n_c), Fraction(overlap, n_r)
    return float(p), float(r), float(2 * p * r / (p + r))


def rouge_disagreement(rng: np.random.Generator, max_len: int = 8, vocab: int = 4) -> float:
    c = list(rng.integers(0, vocab, size=int(rng.integers(0, max_len + 1))))
    r = list(rng.integers(0, vocab, size=int(rng.integers(0, max_len + 1))))
    worst = 0.0
    for n in (1, 2):
        got = rouge_n(c, r, n)
        want = brute_rouge_n(c, r, n)
        worst = max(worst, *(abs(a - b) for a, b in zip((got.precision, got.recall, got.f1), want)))
    got = rouge_l(c, r)
    want = brute_rouge_l(c, r)
    return max(worst, *(abs(a - b) for a, b in zip((got.precision, got.recall, got.f1), want)))


def weight_errors(max_n: int = 512) -> tuple[float, bool]:
    """(worst |mean - 1| over n, every sequence strictly increasing)."""
    worst, increasing = 0.0, True
    for n in range(1, max_n + 1):
        w = positional_weights(n)
        worst = max(worst, abs(w.mean() - 1.0))
        increasing &= bool(np.all(np.diff(w) > 0))
    return worst, increasing


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------


def plant_gradient_fault(grads):
    """Corrupt one gradient by 1% (used to prove the gradient check can fail)."""
    out = dict(grads)
    out["out.w"] = out["out.w"] * 1.01
    return out


def run_selftest(fault: str | None = None, quick: bool = False, log: Callable[[str], None] | None = None) -> list[CheckResult]:
    """Run every oracle check. ``fault='gradient'`` plants a gradient bug."""
    if fault not in (None, "gradient"):
        raise ValueError(f"unknown planted fault {fault!r}")
    results: list[CheckResult] = []

    def record(module, name, seed, magnitude, ok):
        res = CheckResult(module, name, seed, float(magnitude), bool(ok))
        results.append(res)
        if log is not None:
            log(res.line())

    transform = plant_gradient_fault if fault == "gradient" else None
    for seed in range(2 if quick else 4):
        for objective in ("mle", "moca"):
            err = max(gradient_errors(seed, objective, transform).values())
            record("tensor_autodiff", f"{objective}_loss gradient", seed, err, err < GRAD_TOL)

    n_dec = 20 if quick else 60
    bad_beam = [s for s in range(n_dec) if not check_decoder_case(s)[0]]
    bad_greedy = [s for s in range(n_dec) if not check_decoder_case(s)[1]]
    record("decoding", f"beam vs exhaustive ({n_dec} models)", bad_beam[0] if bad_beam else 0, len(bad_beam), not bad_beam)
    record("decoding", f"greedy vs beam-1 ({n_dec} models)", bad_greedy[0] if bad_greedy else 0, len(bad_greedy), not bad_greedy)

    rng = np.random.default_rng(0)
    worst = max(rouge_disagreement(rng) for _ in range(200 if quick else 500))
    record("eval_metrics", "rouge vs brute force", 0, worst, worst <= ROUGE_TOL)
    c, r = "the cat sat".split(), "the cat ate".split()
    got = (rouge_n(c, r, 1).f1, rouge_n(c, r, 2).f1, rouge_l(c, r).f1)
    err = max(abs(a - b) for a, b in zip(got, (2 / 3, 1 / 2, 2 / 3)))
    record("eval_metrics", "worked example", 0, err, err <= ROUGE_TOL)

    worst, increasing = weight_errors()
    record("calibration", "positional weights mean 1", 0, worst, worst <= 1e-12 and increasing)
    err = float(np.max(np.abs(positional_weights(3) - np.array([12, 27, 108]) / 49)))
    record("calibration", "positional weights n=3", 0, err, err <= 1e-12)
    cases = [([1.0, 1.5], 0.001, 0.501), ([3.0, 2.0, 1.0], 0.5, 0.0), ([3.0, 2.0, 1.0], 1.5, 2.0)]
    err = max(abs(ranking_loss(c, m).item() - want) for c, m, want in cases)
    record("calibration", "ranking loss worked examples", 0, err, err <= 1e-12)
    return results


def summarize(results: list[CheckResult], seconds: float | None = None) -> str:
    failed = [r for r in results if not r.passed]
    head = f"{len(results) - len(failed)}/{len(results)} checks passed"
    if seconds is not None:
        head += f" in {seconds:.1f}s"
    lines = [head]
    for r in failed:
        lines.append(f"  failed: module={r.module} check={r.name!r} seed={r.seed} magnitude={r.magnitude:.3e}")
    return "\n".join(lines)


def timed_selftest(**kw) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    res = run_selftest(**kw)
    return res, time.perf_counter() - t0
