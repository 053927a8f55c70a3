"""Run orchestration: MLE training, calibration, evaluation and diagnostics.

A run lives in ``out_dir``::

    data/{train,valid,test}.jsonl      make_data
    mle.ckpt, mle_log.csv              train_mle
    <run_name>.ckpt, <run_name>_log.csv  calibrate
    <name>_eval.csv, <name>_positions.csv  evaluate
    <name>_diagnose.csv                diagnose

Batches are drawn from per-epoch permutations that depend only on the seed
and the step, so a resumed run sees exactly the batches an uninterrupted
run would.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .calibration import (
    Candidate,
    StepReport,
    TrainState,
    batch_sequence_costs,
    generate_candidate_batch,
    kendall_agreement,
    moca_train_step,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import calib_config, eval_decode_config, model_config
from .data import SPLITS, TaskSpec, file_vocab, make_dataset, read_split
from .decoding import batch_beam_search
from .errors import ConfigError, NumericFault
from .model import Example, Vocab, batch_mle_loss, init_params, positional_accuracy, token_predictions
from .rouge import MetricKind, eval_score
from .tensor import AdamState

log = logging.getLogger(__name__)

MLE_COLUMNS = ("step", "train_loss", "valid_loss", "valid_token_acc", "lr")
CALIB_COLUMNS = (
    "step",
    "loss",
    "ranking_loss",
    "mle_loss",
    "skip_rate",
    "mean_metric",
    "kendall_tau",
    "generator_calls",
    "lr",
)
EVAL_COLUMNS = ("example", "rouge1", "rouge2", "rougeL", "mean", "kendall_tau", "prediction")
POSITION_COLUMNS = ("bucket_start", "bucket_end", "accuracy", "count")
_EVAL_CHUNK = 32


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.8f}"
    return str(x)


def _csv_text(columns: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows([[_fmt(v) for v in r] for r in rows])
    return buf.getvalue()


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class _CsvLog:
    """Append-only CSV log; on resume, rows past the resumed step are dropped."""

    def __init__(self, path: Path, columns: Sequence[str], resume_step: int | None):
        self.path = path
        self.columns = tuple(columns)
        rows = []
        if resume_step is not None and path.exists():
            rows = [r for r in read_csv(path) if int(r["step"]) <= resume_step]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            w.writerows([[r[c] for c in self.columns] for r in rows])

    def write(self, row: Sequence) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(v) for v in row])


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def dataset_dir(cfg: Mapping) -> Path:
    if cfg["task"] == "file":
        return Path(cfg["data_dir"])
    return Path(cfg["data_dir"]) if cfg["data_dir"] else Path(cfg["out_dir"]) / "data"


def run_make_data(cfg: Mapping):
    """Generate (or validate, for file tasks) the dataset splits on disk."""
    spec = TaskSpec.from_config(cfg)
    out = None if spec.kind == "file" else dataset_dir(cfg)
    return make_dataset(spec, out)


def load_vocab(cfg: Mapping) -> Vocab:
    if cfg["task"] == "file":
        return file_vocab(cfg["data_dir"], cfg["vocab_size"])
    return Vocab.synthetic(cfg["vocab_size"])


def load_splits(cfg: Mapping) -> tuple[Vocab, dict[str, list[Example]]]:
    """Read the three splits written by :func:`run_make_data`."""
    root = dataset_dir(cfg)
    missing = [s for s in SPLITS if not (root / f"{s}.jsonl").exists()]
    if missing:
        raise ConfigError(f"dataset split(s) {missing} not found under {root}; run make-data first")
    vocab = load_vocab(cfg)
    return vocab, {s: read_split(root / f"{s}.jsonl", vocab) for s in SPLITS}


@lru_cache(maxsize=8)
def _epoch_order(seed: int, stream: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, stream, epoch]).permutation(n)


def batch_indices(seed: int, stream: int, n: int, batch_size: int, step: int) -> list[int]:
    """Example indices for 0-based ``step``: consecutive slices of per-epoch shuffles."""
    out = []
    for pos in range(step * batch_size, (step + 1) * batch_size):
        epoch, i = divmod(pos, n)
        out.append(int(_epoch_order(seed, stream, epoch, n)[i]))
    return out


# ---------------------------------------------------------------------------
# MLE phase
# ---------------------------------------------------------------------------


def _adam(cfg: Mapping, lr: float, warmup: int) -> AdamState:
    return AdamState(lr, cfg["beta1"], cfg["beta2"], cfg["adam_eps"], warmup)


def evaluate_mle(params, examples: Sequence[Example], chunk: int = 64) -> tuple[float, float]:
    """(mean per-example MLE loss, teacher-forced token accuracy)."""
    total = 0.0
    with T.no_tape():
        for i in range(0, len(examples), chunk):
            part = examples[i : i + chunk]
            total += batch_mle_loss(params, part).item() * len(part)
        hits = count = 0
        for pred, gold in token_predictions(params, examples):
            hits += int((pred == gold).sum())
            count += len(gold)
    return total / len(examples), hits / count


def new_mle_state(cfg: Mapping) -> TrainState:
    theta = init_params(model_config(cfg), cfg["seed"])
    rng = np.random.default_rng(cfg["seed"])
    extra = {"loss_sum": 0.0, "loss_count": 0, "best_valid": None, "bad_evals": 0}
    return TrainState(theta, None, _adam(cfg, cfg["lr"], cfg["warmup"]), 0, dict(cfg), rng, extra)


def run_train_mle(
    cfg: Mapping,
    splits: Mapping[str, Sequence[Example]],
    resume: str | Path | None = None,
    stop_after: int | None = None,
) -> TrainState:
    """Train from scratch (or from ``resume``) on the MLE objective.

    Logs one CSV row per evaluation interval. Stops at ``mle_steps``, on
    early-stopping patience (``patience`` evaluations without a better
    validation loss; 0 disables it), or after ``stop_after`` steps of this
    call (used to cut a run short for resume tests).
    """
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state = load_checkpoint(resume, expect=model_config(cfg))
        state = replace(state, config=dict(cfg))
    else:
        state = new_mle_state(cfg)
    train, valid = list(splits["train"]), list(splits["valid"])
    logf = _CsvLog(out / "mle_log.csv", MLE_COLUMNS, state.step if resume is not None else None)
    extra = dict(state.extra)
    done_here = 0
    while state.step < cfg["mle_steps"]:
        batch = [train[i] for i in batch_indices(cfg["seed"], 0, len(train), cfg["batch_size"], state.step)]
        theta = state.theta
        with T.Tape() as tape:
            loss = batch_mle_loss(theta, batch)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericFault(f"MLE loss became {value} at step {state.step + 1}")
        grads = T.grad_by_name(tape, T.backward(tape, loss), theta.leaves())
        theta, adam = T.adam_step(theta, grads, state.adam)
        state = replace(state, theta=theta, adam=adam, step=state.step + 1)
        extra["loss_sum"] += value
        extra["loss_count"] += 1
        done_here += 1
        stop = False
        if state.step % cfg["eval_every"] == 0 or state.step == cfg["mle_steps"]:
            v_loss, v_acc = evaluate_mle(theta, valid)
            logf.write([state.step, extra["loss_sum"] / extra["loss_count"], v_loss, v_acc, adam.rate(adam.step)])
            log.info("mle step %d valid_loss %.4f acc %.4f", state.step, v_loss, v_acc)
            extra["loss_sum"], extra["loss_count"] = 0.0, 0
            if extra["best_valid"] is None or v_loss < extra["best_valid"]:
                extra["best_valid"], extra["bad_evals"] = v_loss, 0
            else:
                extra["bad_evals"] += 1
            stop = cfg["patience"] > 0 and extra["bad_evals"] >= cfg["patience"]
        state = replace(state, extra=dict(extra))
        if cfg["checkpoint_every"] and state.step % cfg["checkpoint_every"] == 0:
            save_checkpoint(state, out / f"mle_step{state.step}.ckpt")
        if stop or (stop_after is not None and done_here >= stop_after):
            break
    save_checkpoint(state, out / "mle.ckpt")
    return state


# ---------------------------------------------------------------------------
# calibration phase
# ---------------------------------------------------------------------------


def _momentum_for(cfg: Mapping) -> float:
    return {"momentum": cfg["momentum"], "online-m0": 0.0, "offline": 1.0}[cfg["mode"]]


def pregenerate(xi, examples: Sequence[Example], config, chunk: int = 64) -> dict[tuple[int, ...], list[Candidate]]:
    """Candidates for every example from a fixed generator, keyed by source."""
    pool = {}
    for i in range(0, len(examples), chunk):
        part = examples[i : i + chunk]
        for ex, cands in zip(part, generate_candidate_batch(xi, [e.source for e in part], config)):
            pool[ex.source] = cands
    return pool


def run_calibrate(
    cfg: Mapping,
    init_checkpoint: str | Path,
    splits: Mapping[str, Sequence[Example]],
    resume: str | Path | None = None,
    stop_after: int | None = None,
) -> tuple[TrainState, list[StepReport]]:
    """Momentum calibration starting from an MLE checkpoint.

    ``mode`` selects the generator behaviour: ``momentum`` (EMA with the
    configured coefficient), ``online-m0`` (generator reset to the online
    model after every update) or ``offline`` (candidates decoded once from
    the initial model for the whole training split, generator frozen).
    """
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    mcfg = model_config(cfg)
    ccfg = calib_config(cfg)
    m = _momentum_for(cfg)
    if resume is not None:
        state = replace(load_checkpoint(resume, expect=mcfg), config=dict(cfg))
    else:
        init = load_checkpoint(init_checkpoint, expect=mcfg)
        state = TrainState(
            init.theta,
            init.theta,
            _adam(cfg, cfg["moca_lr"], cfg["moca_warmup"]),
            0,
            dict(cfg),
            np.random.default_rng([cfg["seed"], 1]),
            {"generator_calls": 0},
        )
    train = list(splits["train"])
    name = cfg["run_name"]
    logf = _CsvLog(out / f"{name}_log.csv", CALIB_COLUMNS, state.step if resume is not None else None)
    calls = state.extra["generator_calls"]

    lookup = None
    if cfg["mode"] == "offline":
        pool = pregenerate(state.xi, train, ccfg)
        if resume is None:
            calls += len(train)
        lookup = lambda ex: pool[ex.source]  # noqa: E731

    reports = []
    done_here = 0
    while state.step < cfg["moca_steps"]:
        batch = [train[i] for i in batch_indices(cfg["seed"], 1, len(train), cfg["batch_size"], state.step)]
        state, rep = moca_train_step(state, batch, ccfg, candidates_for=lookup, momentum=m)
        if not math.isnan(rep.loss) and not math.isfinite(rep.loss):
            raise NumericFault(f"calibration loss became {rep.loss} at step {rep.step}")
        calls += rep.generator_calls
        state = replace(state, extra={"generator_calls": calls})
        logf.write(
            [rep.step, rep.loss, rep.ranking_loss, rep.mle_loss, rep.skip_rate, rep.mean_metric, rep.kendall_tau, calls, state.adam.rate(max(state.adam.step, 1))]
        )
        reports.append(rep)
        done_here += 1
        if cfg["checkpoint_every"] and state.step % cfg["checkpoint_every"] == 0:
            save_checkpoint(state, out / f"{name}_step{state.step}.ckpt")
        if stop_after is not None and done_here >= stop_after:
            break
    save_checkpoint(state, out / f"{name}.ckpt")
    return state, reports


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalSummary:
    rouge1: float
    rouge2: float
    rougeL: float
    mean: float
    kendall_tau: float
    n: int


def score_predictions(predictions: Sequence[Sequence[int]], golds: Sequence[Sequence[int]]) -> list[tuple[float, float, float, float]]:
    """Per-example (R1, R2, RL, mean) F1 scores."""
    kinds = (MetricKind.ROUGE1, MetricKind.ROUGE2, MetricKind.ROUGEL)
    out = []
    for p, g in zip(predictions, golds):
        r = [eval_score(p, g, k) for k in kinds]
        out.append((*r, sum(r) / 3))
    return out


def decode_split(params, examples: Sequence[Example], cfg: Mapping) -> list[tuple[int, ...]]:
    dcfg = eval_decode_config(cfg)
    preds = []
    for i in range(0, len(examples), _EVAL_CHUNK):
        part = examples[i : i + _EVAL_CHUNK]
        for hyps in batch_beam_search(params, [e.source for e in part], dcfg):
            preds.append(hyps[0].content if hyps else ())
    return preds


def candidate_agreement(params, examples: Sequence[Example], cfg: Mapping) -> list[float]:
    """Per-example Kendall tau between ``-cost`` under ``params`` and metric, on fresh candidates."""
    ccfg = calib_config(cfg)
    taus = []
    for i in range(0, len(examples), _EVAL_CHUNK):
        part = examples[i : i + _EVAL_CHUNK]
        pools = generate_candidate_batch(params, [e.source for e in part], ccfg)
        srcs, toks = [], []
        for ex, cands in zip(part, pools):
            srcs += [ex.source] * len(cands)
            toks += [c.tokens for c in cands]
        with T.no_tape():
            costs = batch_sequence_costs(params, srcs, toks, ccfg.cost_alpha, ccfg.weighting).data.astype(np.float64)
        off = 0
        for ex, cands in zip(part, pools):
            n = len(cands)
            metrics = [eval_score(c.content, ex.target, ccfg.metric) for c in cands]
            taus.append(kendall_agreement(costs[off : off + n], metrics) if n >= 2 else float("nan"))
            off += n
    return taus


def _nanmean(xs) -> float:
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else float("nan")


def run_evaluate(
    cfg: Mapping,
    checkpoint: str | Path,
    examples: Sequence[Example],
    vocab: Vocab,
    name: str,
) -> EvalSummary:
    """Beam-decode ``examples`` and write ``<name>_eval.csv`` and ``<name>_positions.csv``.

    The eval CSV has one row per example plus a final ``corpus`` row of
    means. The positions CSV holds teacher-forced accuracy per bucket of
    target positions.
    """
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    params = load_checkpoint(checkpoint).theta
    preds = decode_split(params, examples, cfg)
    scores = score_predictions(preds, [e.target for e in examples])
    taus = candidate_agreement(params, examples, cfg)
    rows = [[i, *s, t, vocab.decode(p)] for i, (s, t, p) in enumerate(zip(scores, taus, preds))]
    means = [float(np.mean([s[k] for s in scores])) for k in range(4)]
    summary = EvalSummary(*means, _nanmean(taus), len(examples))
    rows.append(["corpus", *means, summary.kendall_tau, ""])
    (out / f"{name}_eval.csv").write_text(_csv_text(EVAL_COLUMNS, rows), encoding="utf-8")
    write_positions(out / f"{name}_positions.csv", positional_accuracy(params, examples, cfg["bucket_width"]))
    return summary


def write_positions(path: Path, buckets) -> None:
    rows = [[lo, hi, acc, n] for (lo, hi), acc, n in buckets]
    path.write_text(_csv_text(POSITION_COLUMNS, rows), encoding="utf-8")


def read_summary(path: str | Path) -> EvalSummary:
    rows = read_csv(path)
    last = rows[-1]
    if last["example"] != "corpus":
        raise ConfigError(f"{path}: no corpus row")
    return EvalSummary(
        float(last["rouge1"]), float(last["rouge2"]), float(last["rougeL"]), float(last["mean"]), float(last["kendall_tau"]), len(rows) - 1
    )


# ---------------------------------------------------------------------------
# diagnosis and generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Diagnosis:
    buckets: list
    first_accuracy: float
    last_accuracy: float
    recommendation: str

    @property
    def late_degradation(self) -> bool:
        return self.last_accuracy < self.first_accuracy

    def text(self) -> str:
        lines = [f"positions [{lo:>3}, {hi:>3}): accuracy {acc:.4f} over {n} tokens" for (lo, hi), acc, n in self.buckets]
        if self.late_degradation:
            lines.append(
                f"late positions are less accurate ({self.last_accuracy:.4f} < {self.first_accuracy:.4f}); "
                "recommend weighting = positional"
            )
        else:
            lines.append("no late-position degradation; recommend weighting = constant")
        return "\n".join(lines) + "\n"


def diagnose(params, examples: Sequence[Example], bucket_width: int = 5) -> Diagnosis:
    """Bucketed teacher-forced accuracy and the weighting it suggests.

    Positional weighting is recommended when the final bucket is less
    accurate than the first one.
    """
    buckets = positional_accuracy(params, examples, bucket_width)
    first, last = buckets[0][1], buckets[-1][1]
    rec = "positional" if last < first else "constant"
    return Diagnosis(buckets, first, last, rec)


def run_diagnose(cfg: Mapping, checkpoint: str | Path, examples: Sequence[Example], name: str = "diagnose") -> Diagnosis:
    params = load_checkpoint(checkpoint).theta
    d = diagnose(params, examples, cfg["bucket_width"])
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_positions(out / f"{name}_positions.csv", d.buckets)
    (out / f"{name}.txt").write_text(d.text(), encoding="utf-8")
    return d


def run_generate(cfg: Mapping, checkpoint: str | Path, examples: Sequence[Example], vocab: Vocab, path: str | Path) -> None:
    """Write beam-search outputs as JSON lines with ``source`` and ``prediction`` fields."""
    params = load_checkpoint(checkpoint).theta
    preds = decode_split(params, examples, cfg)
    lines = [json.dumps({"source": vocab.decode(e.source), "prediction": vocab.decode(p)}) + "\n" for e, p in zip(examples, preds)]
    Path(path).write_bytes("".join(lines).encode("utf-8"))


# ---------------------------------------------------------------------------
# full desk pipeline
# ---------------------------------------------------------------------------


def run_pipeline(cfg: Mapping, log_fn=None) -> dict:
    """make-data, MLE, diagnose, three calibration runs, evaluation of all four models.

    Runs: ``momentum`` and ``offline`` use constant weighting (the ablation
    pair); ``moca`` uses momentum with the weighting recommended by the
    diagnosis (it reuses ``momentum`` when that recommendation is constant).
    Writes ``pipeline_summary.json`` and returns the same dict.
    """
    from .config import update

    say = log_fn or (lambda msg: None)
    out = Path(cfg["out_dir"])
    run_make_data(cfg)
    vocab, splits = load_splits(cfg)
    say("training MLE baseline")
    run_train_mle(cfg, splits)
    mle_ckpt = out / "mle.ckpt"
    diag = run_diagnose(cfg, mle_ckpt, splits["valid"])
    say(f"diagnosis recommends weighting={diag.recommendation}")

    runs = {
        "momentum": update(cfg, mode="momentum", weighting="constant", run_name="momentum"),
        "offline": update(cfg, mode="offline", weighting="constant", run_name="offline"),
    }
    if diag.recommendation != "constant":
        runs["moca"] = update(cfg, mode="momentum", weighting=diag.recommendation, run_name="moca")
    for name, rcfg in runs.items():
        say(f"calibrating {name}")
        run_calibrate(rcfg, mle_ckpt, splits)
    moca_name = "moca" if "moca" in runs else "momentum"

    summary: dict = {"recommended_weighting": diag.recommendation, "moca_run": moca_name, "eval": {}}
    summary["diagnosis"] = [[lo, hi, acc, n] for (lo, hi), acc, n in diag.buckets]
    models = {"mle": mle_ckpt, **{name: out / f"{name}.ckpt" for name in runs}}
    for name, ckpt in models.items():
        say(f"evaluating {name}")
        summary["eval"][name] = run_evaluate(runs.get(name, cfg), ckpt, splits["test"], vocab, name).__dict__
    rows = read_csv(out / f"{moca_name}_log.csv")
    taus = [float(r["kendall_tau"]) for r in rows]
    summary["tau_first50"] = _nanmean(taus[:50])
    summary["tau_last50"] = _nanmean(taus[-50:])
    (out / "pipeline_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary
