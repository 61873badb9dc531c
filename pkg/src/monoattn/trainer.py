"""Training loop: cross-entropy plus weighted monotonicity loss, Adam updates,
dev-metric early stopping and the per-checkpoint monotonicity trace."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import metrics as M
from . import ndgrad as nd
from .corpus import EOS, Corpus, Splits, Vocab
from .model import Batch, ModelConfig, Seq2Seq
from .monoloss import MonoConfig, MonoReport, report_from_examples, score_batch

log = logging.getLogger(__name__)

MAXIMIZE = {"acc": True, "mfs": True, "wer": False, "per": False, "lev": False}


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, step: int, batch: Batch, ce: float, mono: float):
        self.step, self.batch = step, batch
        super().__init__(
            f"non-finite loss at step {step} (ce={ce}, mono={mono}); offending batch:\n"
            f"src={batch.src.tolist()}\nsrc_lengths={batch.src_lengths.tolist()}\n"
            f"tgt={batch.tgt.tolist()}\ntgt_lengths={batch.tgt_lengths.tolist()}\n"
            f"sep={None if batch.sep is None else batch.sep.tolist()}")


@dataclass
class TrainConfig:
    mono: MonoConfig = field(default_factory=MonoConfig)
    model: dict = field(default_factory=dict)
    batch_size: int = 32
    max_steps: int = 3000
    checkpoint_interval: int = 250
    patience: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    dev_metric: str = "acc"
    seed: int = 1
    # (step, lambda) -> lambda; constant weight unless replaced
    lambda_schedule: Callable[[int, float], float] | None = None

    def __post_init__(self):
        if self.patience < 1 or self.checkpoint_interval < 1:
            raise ValueError("patience and checkpoint interval must be >= 1")
        if self.batch_size < 1 or self.max_steps < 1:
            raise ValueError("batch size and max steps must be >= 1")
        if self.dev_metric not in MAXIMIZE:
            raise ValueError(f"unknown dev metric {self.dev_metric!r}")

    def lam_at(self, step: int) -> float:
        lam = self.mono.lam
        return lam if self.lambda_schedule is None else self.lambda_schedule(step, lam)


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(p.value) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.value) for n, p in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = grads.get(p.id)
            if g is None:
                g = np.zeros_like(p.value)
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class StepStats:
    step: int
    ce: float
    mono: float
    weighted_mono: float
    total: float
    report: MonoReport


@dataclass
class TraceRow:
    step: int
    train_ce: float
    train_mono: float
    train_pctmono: float
    dev_metric: float
    dev_mono: float
    dev_pctmono: float
    per_head: dict = field(default_factory=dict)


@dataclass
class EvalResult:
    report: M.MetricReport
    mono: MonoReport
    records: list


@dataclass
class FitResult:
    model: Seq2Seq
    vocabs: tuple
    trace: list
    best_step: int
    best_metric: float
    steps: int


def encode_corpus(corpus: Corpus, vocabs: tuple[Vocab, Vocab]):
    src_v, tgt_v = vocabs
    return [src_v.encode(s) for s, _ in corpus.pairs], [tgt_v.encode(t) for _, t in corpus.pairs]


def train_step(model: Seq2Seq, batch: Batch, optimizer: Adam, config: TrainConfig,
               rng: np.random.Generator | None = None, step: int = 0) -> StepStats:
    """One update on ``CE + lambda * L_mono`` (both normalized per target token)."""
    fwd = model.forward_teacher_forced(batch, rng)
    mono_node, report = score_batch(fwd.attention, batch, config.mono)
    lam = config.lam_at(step)
    weighted = nd.scale(mono_node, lam)
    total = fwd.ce if lam == 0 else nd.add(fwd.ce, weighted)
    ce, mono = float(fwd.ce.value), float(mono_node.value)
    if not np.isfinite(total.value).all():
        raise NonFiniteLossError(step, batch, ce, mono)
    grads = nd.backward(total)
    optimizer.step(grads)
    return StepStats(step, ce, mono, float(weighted.value), float(total.value), report)


def evaluate(model: Seq2Seq, corpus: Corpus, vocabs: tuple[Vocab, Vocab], mono: MonoConfig,
             metric_names: Sequence[str] = ("acc",), max_len: int | None = None,
             batch_size: int = 256) -> EvalResult:
    """Greedy-decode ``corpus`` and score outputs and decoded attention."""
    src_v, tgt_v = vocabs
    src_ids, _ = encode_corpus(corpus, vocabs)
    records, pairs = [], []
    for start in range(0, len(src_ids), batch_size):
        chunk = src_ids[start:start + batch_size]
        limit = max_len or max(len(s) for s in chunk) + 10
        for k, (hyp, attn) in enumerate(model.greedy_decode(chunk, limit)):
            i = start + k
            src, ref = corpus.pairs[i]
            hyp_tokens = tgt_v.decode(hyp)
            records.append({
                "id": i, "src": list(src) + [src_v.itos[EOS]], "tgt": hyp_tokens, "ref": list(ref),
                "sep": src.index("<sep>") if "<sep>" in src else None,
                "heads": [{"layer": l, "head": h, "weights": w.tolist()} for l, h, w in attn],
            })
            pairs.append(M.EvalPair(hyp_tokens, corpus.references(i)))
    mono_report = report_from_examples(records, mono)
    report = M.MetricReport(M.compute(pairs, metric_names), mono_report.loss, mono_report.pct_mono)
    return EvalResult(report, mono_report, records)


def _better(a: float, b: float, metric: str) -> bool:
    return a > b if MAXIMIZE[metric] else a < b


def fit(splits: Splits, config: TrainConfig, on_checkpoint: Callable[[TraceRow], None] | None = None) -> FitResult:
    """Train until ``patience`` consecutive checkpoints fail to improve the dev
    metric (or ``max_steps``); returns the best-dev model and the full trace."""
    if not splits.train.pairs or not splits.dev.pairs:
        raise TrainingError("train and dev splits must be nonempty")
    vocabs = splits.train.build_vocabs()
    model_kw = dict(config.model)
    model_kw.setdefault("seed", config.seed)
    mcfg = ModelConfig(src_vocab=len(vocabs[0]), tgt_vocab=len(vocabs[1]), **model_kw)
    config.mono.validate_heads(mcfg.dec_layers, mcfg.heads)
    model = Seq2Seq(mcfg)
    opt = Adam(model.params, config.lr, config.beta1, config.beta2, config.eps)
    order_rng = np.random.default_rng([config.seed, 10])
    drop_rng = np.random.default_rng([config.seed, 11])
    src_ids, tgt_ids = encode_corpus(splits.train, vocabs)
    n = len(src_ids)

    trace: list[TraceRow] = []
    best_metric, best_step, best_state = None, 0, None
    bad = 0
    acc_ce, acc_mono, acc_zero, acc_pairs, seen = 0.0, 0.0, 0.0, 0, 0
    order, cursor = order_rng.permutation(n), 0
    step = 0
    while step < config.max_steps:
        if cursor >= n:
            order, cursor = order_rng.permutation(n), 0
        idx = order[cursor:cursor + config.batch_size]
        cursor += config.batch_size
        batch = Batch.from_ids([src_ids[i] for i in idx], [tgt_ids[i] for i in idx])
        step += 1
        stats = train_step(model, batch, opt, config, drop_rng, step)
        acc_ce += stats.ce
        acc_mono += stats.report.loss
        acc_zero += stats.report.pct_mono * stats.report.pairs
        acc_pairs += stats.report.pairs
        seen += 1
        if step % config.checkpoint_interval and step != config.max_steps:
            continue

        ev = evaluate(model, splits.dev, vocabs, config.mono, (config.dev_metric,))
        value = ev.report.metrics[config.dev_metric]
        row = TraceRow(step, acc_ce / seen, acc_mono / seen, acc_zero / acc_pairs if acc_pairs else 1.0,
                       value, ev.mono.loss, ev.mono.pct_mono,
                       {k: (r.loss, r.with_loss) for k, r in ev.mono.per_head.items()})
        trace.append(row)
        acc_ce, acc_mono, acc_zero, acc_pairs, seen = 0.0, 0.0, 0.0, 0, 0
        log.info("step %d ce %.4f mono %.3g dev %s %.2f dev mono %.3g (%.1f%%)", step, row.train_ce,
                 row.train_mono, config.dev_metric, value, row.dev_mono, 100 * row.dev_pctmono)
        if on_checkpoint:
            on_checkpoint(row)
        if best_metric is None or _better(value, best_metric, config.dev_metric):
            best_metric, best_step, best_state, bad = value, step, model.state_dict(), 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    model.load_state(best_state)
    return FitResult(model, vocabs, trace, best_step, best_metric, step)


def write_trace(trace: Sequence[TraceRow], path) -> None:
    heads = sorted(trace[0].per_head) if trace else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "train_ce", "train_mono", "train_pctmono", "dev_metric", "dev_mono", "dev_pctmono"]
                   + [f"mono_l{l}h{h}_{'with' if trace[0].per_head[(l, h)][1] else 'without'}"
                      for l, h in heads])
        for r in trace:
            w.writerow([r.step, repr(r.train_ce), repr(r.train_mono), repr(r.train_pctmono), repr(r.dev_metric),
                        repr(r.dev_mono), repr(r.dev_pctmono)] + [repr(r.per_head[k][0]) for k in heads])


def best_row(result: FitResult) -> TraceRow:
    return next(r for r in result.trace if r.step == result.best_step)


@dataclass
class SweepRow:
    lam: float
    dev_metric: float
    dev_mono: float
    dev_pctmono: float
    result: FitResult | None = None


def sweep_lambda(splits: Splits, config: TrainConfig, lambdas: Sequence[float],
                 on_result: Callable[[SweepRow], None] | None = None) -> list[SweepRow]:
    """Independent runs per lambda, same seed; rows ascend in lambda."""
    if len(lambdas) < 2:
        raise ValueError("a sweep needs at least two lambda values")
    rows = []
    for lam in sorted(lambdas):
        cfg = replace(config, mono=replace(config.mono, lam=lam))
        res = fit(splits, cfg)
        b = best_row(res)
        row = SweepRow(lam, b.dev_metric, b.dev_mono, b.dev_pctmono, res)
        if on_result:
            on_result(row)
        rows.append(row)
    return rows


def write_sweep(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "dev_metric", "dev_mono", "dev_pctmono"])
        for r in rows:
            w.writerow([repr(r.lam), repr(r.dev_metric), repr(r.dev_mono), repr(r.dev_pctmono)])
