"""Monotonicity loss over soft attention.

For each decoder step the mean attended source position is the expectation of
the (1-based) source index under the attention row.  The loss penalizes every
consecutive pair of steps whose mean position fails to increase by the margin
``delta * |X| / |Y|``, scaled by ``1 / |X|`` so the worst-case cost of one step
does not grow with source length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import ndgrad as nd
from .attention import AttentionWeights

INCREASING = "increasing"
DECREASING = "decreasing"
ALL = "all"
NONE = "none"


class MonoConfigError(ValueError):
    pass


def parse_head_mask(text: str):
    """``all``, ``none`` or a comma list of ``layer:head`` pairs."""
    text = text.strip().lower()
    if text in (ALL, NONE):
        return text
    pairs = set()
    for item in text.split(","):
        try:
            layer, head = item.split(":")
            pairs.add((int(layer), int(head)))
        except ValueError:
            raise MonoConfigError(f"bad head spec {item!r}; expected layer:head") from None
    return frozenset(pairs)


def format_head_mask(mask) -> str:
    if isinstance(mask, str):
        return mask
    return ",".join(f"{l}:{h}" for l, h in sorted(mask))


@dataclass
class MonoConfig:
    lam: float = 0.1
    delta: float = 0.0
    direction: str = INCREASING
    head_mask: object = ALL
    separator_masking: bool = False
    renormalize: bool = True

    def __post_init__(self):
        if isinstance(self.head_mask, str) and self.head_mask not in (ALL, NONE):
            self.head_mask = parse_head_mask(self.head_mask)
        elif not isinstance(self.head_mask, str):
            self.head_mask = frozenset(tuple(p) for p in self.head_mask)
        if self.direction in ("inc", "dec"):
            self.direction = INCREASING if self.direction == "inc" else DECREASING
        if self.lam < 0:
            raise MonoConfigError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.delta <= 1.0:
            raise MonoConfigError(f"delta must be in [0, 1], got {self.delta}")
        if self.direction not in (INCREASING, DECREASING):
            raise MonoConfigError(f"unknown direction {self.direction!r}")
        if self.lam > 0 and self.head_mask == NONE:
            raise MonoConfigError("lambda > 0 with an empty head mask is contradictory")

    def selects(self, layer: int, head: int) -> bool:
        if self.head_mask == ALL:
            return True
        if self.head_mask == NONE:
            return False
        return (layer, head) in self.head_mask

    def validate_heads(self, n_layers: int, n_heads: int) -> None:
        if isinstance(self.head_mask, str):
            return
        for layer, head in self.head_mask:
            if not (0 <= layer < n_layers and 0 <= head < n_heads):
                raise MonoConfigError(
                    f"head {layer}:{head} does not exist ({n_layers} layers x {n_heads} heads)")


@dataclass
class HeadReport:
    loss: float
    pct_mono: float
    pairs: int
    with_loss: bool


@dataclass
class MonoReport:
    """Monotonicity statistics.  ``loss`` and ``pct_mono`` pool every mechanism;
    ``per_head`` separates mechanisms inside and outside the head mask."""

    loss: float
    pct_mono: float
    pairs: int
    per_head: dict = field(default_factory=dict)

    def _group(self, flag: bool):
        heads = [r for r in self.per_head.values() if r.with_loss == flag]
        if not heads:
            return None, None
        pairs = sum(r.pairs for r in heads)
        zero = sum(r.pct_mono * r.pairs for r in heads)
        return float(np.mean([r.loss for r in heads])), (zero / pairs if pairs else 1.0)

    @property
    def with_loss(self):
        return self._group(True)

    @property
    def without_loss(self):
        return self._group(False)


# ---------------------------------------------------------------------------
# Scalar formulas
# ---------------------------------------------------------------------------

def mean_attended_position(row: Sequence[float]) -> float:
    row = np.asarray(row, dtype=float)
    if row.sum() == 0:
        raise ValueError("attention row has no mass")
    return float(np.dot(row, np.arange(1, len(row) + 1)))


def pairwise_terms(positions: Sequence[float], n_src: int, delta: float = 0.0,
                   direction: str = INCREASING) -> list[float]:
    a = [float(p) for p in positions]
    margin = delta * n_src / len(a) if a else 0.0
    terms = []
    for i in range(len(a) - 1):
        first, second = (a[i], a[i + 1]) if direction == INCREASING else (a[i + 1], a[i])
        terms.append(max((first - second + margin) / n_src, 0.0))
    return terms


def mono_loss(positions: Sequence[float], n_src: int, delta: float = 0.0,
              direction: str = INCREASING) -> float:
    # fsum: the result must not depend on summation order
    return math.fsum(pairwise_terms(positions, n_src, delta, direction))


def mono_loss_grad(positions: Sequence[float], n_src: int, delta: float = 0.0,
                   direction: str = INCREASING) -> np.ndarray:
    a = [float(p) for p in positions]
    grad = np.zeros(len(a))
    margin = delta * n_src / len(a) if a else 0.0
    for i in range(len(a) - 1):
        hi, lo = (i, i + 1) if direction == INCREASING else (i + 1, i)
        if a[hi] - a[lo] + margin > 0:
            grad[hi] += 1.0 / n_src
            grad[lo] -= 1.0 / n_src
    return grad


def percent_mono(positions: Sequence[float], n_src: int, n_tgt: int | None = None,
                 delta: float = 0.0, direction: str = INCREASING) -> float:
    """Fraction of consecutive steps whose mean position advances by at least
    the margin (equality counts)."""
    a = [float(p) for p in positions]
    n_tgt = len(a) if n_tgt is None else n_tgt
    if len(a) <= 1:
        return 1.0
    margin = delta * n_src / n_tgt
    good = 0
    for i in range(len(a) - 1):
        first, second = (a[i], a[i + 1]) if direction == INCREASING else (a[i + 1], a[i])
        good += (first - second + margin) <= 0
    return good / (len(a) - 1)


# ---------------------------------------------------------------------------
# Separator scope
# ---------------------------------------------------------------------------

def separator_scope(batch, example: int, separator_masking: bool = True) -> tuple[range, int]:
    """Source columns (0-based) scored for one example and their count.

    With masking on, only columns strictly right of the separator are scored;
    they are re-indexed 1..n inside the loss.
    """
    src_len = int(batch.src_lengths[example])
    if not separator_masking:
        return range(0, src_len), src_len
    sep = None if batch.sep is None else int(batch.sep[example])
    return _lemma_range(sep, src_len)


def _lemma_range(sep, src_len: int) -> tuple[range, int]:
    if sep is None or sep < 0:
        raise ValueError("separator masking is on but the example has no separator")
    if sep >= src_len - 1:
        raise ValueError("separator is the last source token; empty lemma region")
    cols = range(sep + 1, src_len)
    return cols, len(cols)


def _scope_arrays(batch, width: int, config: MonoConfig):
    n = len(batch.src_lengths)
    region = np.zeros((n, width))
    pos = np.zeros((n, width))
    n_src = np.zeros(n)
    for b in range(n):
        cols, size = separator_scope(batch, b, config.separator_masking)
        region[b, cols.start:cols.stop] = 1.0
        pos[b, cols.start:cols.stop] = np.arange(1, size + 1)
        n_src[b] = size
    return region, pos, n_src


# ---------------------------------------------------------------------------
# Batched loss
# ---------------------------------------------------------------------------

def score_batch(attn: Sequence[AttentionWeights], batch, config: MonoConfig):
    """Differentiable batch loss and its report.

    Each mechanism in the head mask contributes the summed pairwise loss over
    the batch divided by the number of scored target tokens; the loss node is
    the mean over those mechanisms.  Mechanisms outside the mask are scored
    for the report only.
    """
    if config.lam > 0 and config.head_mask == NONE:
        raise MonoConfigError("lambda > 0 with an empty head mask is contradictory")
    if not attn:
        raise ValueError("no attention mechanisms to score")
    rows = np.asarray(batch.score_rows)
    _, ty, tx = attn[0].weights.shape
    region, pos, n_src = _scope_arrays(batch, tx, config)
    pair_mask = (np.arange(ty - 1)[None, :] < (rows - 1)[:, None]).astype(float)
    margin = (config.delta * n_src / rows)[:, None]
    n_tokens = float(rows.sum())
    row_valid = np.arange(ty)[None, :] < rows[:, None]

    selected, per_head = [], {}
    total_pairs = int(pair_mask.sum())
    zero_pairs = 0
    for rec in attn:
        alpha = rec.weights
        if config.separator_masking:
            alpha = nd.mul(alpha, region[:, None, :])
            if config.renormalize:
                # padded rows get a unit denominator so they stay finite
                denom = nd.add(nd.sum(alpha, axis=-1, keepdims=True), (~row_valid)[..., None] * 1.0)
                alpha = nd.div(alpha, denom)
        abar = nd.sum(nd.mul(alpha, pos[:, None, :]), axis=-1)
        first, second = abar[:, :-1], abar[:, 1:]
        if config.direction == DECREASING:
            first, second = second, first
        arg = nd.div(nd.add(nd.sub(first, second), margin), n_src[:, None])
        terms = nd.mul(nd.max_with_zero(arg), pair_mask)
        head_loss = nd.scale(nd.sum(terms), 1.0 / n_tokens)

        zeros = int(((terms.value == 0) & (pair_mask > 0)).sum())
        zero_pairs += zeros
        inside = config.selects(rec.layer, rec.head)
        per_head[(rec.layer, rec.head)] = HeadReport(
            float(head_loss.value), zeros / total_pairs if total_pairs else 1.0, total_pairs, inside)
        if inside:
            selected.append(head_loss)

    if selected:
        loss = nd.scale(selected[0] if len(selected) == 1 else _sum_nodes(selected), 1.0 / len(selected))
    else:
        loss = nd.tensor(0.0)
    report = MonoReport(
        float(np.mean([r.loss for r in per_head.values()])),
        zero_pairs / (total_pairs * len(attn)) if total_pairs else 1.0,
        total_pairs * len(attn),
        per_head,
    )
    return loss, report


def _sum_nodes(nodes):
    out = nodes[0]
    for n in nodes[1:]:
        out = nd.add(out, n)
    return out


# ---------------------------------------------------------------------------
# Report from plain attention matrices (decoded output, JSONL dumps)
# ---------------------------------------------------------------------------

def example_terms(weights: np.ndarray, sep, config: MonoConfig) -> tuple[list[float], list[float], int]:
    """Mean positions, pairwise terms and scored source length for one
    [rows x src_len] attention matrix."""
    weights = np.asarray(weights, dtype=float)
    src_len = weights.shape[1]
    if config.separator_masking:
        cols, n_src = _lemma_range(sep, src_len)
        weights = weights[:, cols.start:cols.stop]
        if config.renormalize:
            weights = weights / weights.sum(axis=1, keepdims=True)
    else:
        n_src = src_len
    positions = [float(np.dot(r, np.arange(1, n_src + 1))) for r in weights]
    return positions, pairwise_terms(positions, n_src, config.delta, config.direction), n_src


def report_from_examples(examples: Iterable[Mapping], config: MonoConfig) -> MonoReport:
    """Score examples shaped like attention-dump records:
    ``{"sep": int|None, "heads": [{"layer", "head", "weights"}]}``."""
    sums: dict = {}
    tokens = 0
    for ex in examples:
        rows = None
        for h in ex["heads"]:
            w = np.asarray(h["weights"], dtype=float)
            rows = w.shape[0]
            _, terms, _ = example_terms(w, ex.get("sep"), config)
            acc = sums.setdefault((int(h["layer"]), int(h["head"])), [[], 0, 0])
            acc[0].extend(terms)
            acc[1] += len(terms)
            acc[2] += sum(t == 0 for t in terms)
        tokens += rows or 0
    per_head = {}
    for key, (terms, pairs, zeros) in sorted(sums.items()):
        per_head[key] = HeadReport(math.fsum(terms) / tokens if tokens else 0.0,
                                   zeros / pairs if pairs else 1.0, pairs,
                                   config.selects(*key))
    if not per_head:
        return MonoReport(0.0, 1.0, 0, {})
    pairs = sum(r.pairs for r in per_head.values())
    zeros = sum(v[2] for v in sums.values())
    return MonoReport(math.fsum(r.loss for r in per_head.values()) / len(per_head),
                      zeros / pairs if pairs else 1.0, pairs, per_head)
