"""Task metrics for transduction output.  All rates are on the percent scale."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

METRICS = ("wer", "per", "acc", "lev", "mfs")


@dataclass
class EvalPair:
    candidate: list
    references: list

    def __post_init__(self):
        if not self.references:
            raise ValueError("an evaluation pair needs at least one reference")
        self.candidate = list(self.candidate)
        self.references = [list(r) for r in self.references]


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _closest(pair: EvalPair) -> tuple[int, list]:
    best = None
    for r in pair.references:
        d = edit_distance(pair.candidate, r)
        if best is None or d < best[0]:
            best = (d, r)
    return best


def _exact(pair: EvalPair) -> bool:
    return any(pair.candidate == r for r in pair.references)


def wer(pairs: Sequence[EvalPair]) -> float:
    if not pairs:
        raise ValueError("no pairs")
    return 100.0 * sum(not _exact(p) for p in pairs) / len(pairs)


def per(pairs: Sequence[EvalPair], macro: bool = False) -> float:
    """Edit operations over reference length, pooled over the corpus
    (``macro=True`` averages the per-pair ratios instead)."""
    if not pairs:
        raise ValueError("no pairs")
    closest = [_closest(p) for p in pairs]
    if macro:
        if any(len(r) == 0 for _, r in closest):
            raise ValueError("empty reference")
        return 100.0 * sum(d / len(r) for d, r in closest) / len(closest)
    total = sum(len(r) for _, r in closest)
    if total == 0:
        raise ValueError("total reference length is zero")
    return 100.0 * sum(d for d, _ in closest) / total


def accuracy_and_lev(pairs: Sequence[EvalPair]) -> tuple[float, float]:
    if not pairs:
        raise ValueError("no pairs")
    acc = 100.0 * sum(_exact(p) for p in pairs) / len(pairs)
    lev = sum(_closest(p)[0] for p in pairs) / len(pairs)
    return acc, lev


def f_score(candidate: Sequence, reference: Sequence) -> float:
    if not candidate and not reference:
        return 1.0  # identical empty strings
    lcs = 0.5 * (len(candidate) + len(reference) - edit_distance(candidate, reference))
    r = lcs / len(reference) if reference else 0.0
    p = lcs / len(candidate) if candidate else 0.0
    return 2 * r * p / (r + p) if r + p else 0.0


def mfs(pairs: Sequence[EvalPair]) -> float:
    """Character-level mean F-score against the closest reference."""
    if not pairs:
        raise ValueError("no pairs")
    return 100.0 * sum(f_score(p.candidate, _closest(p)[1]) for p in pairs) / len(pairs)


@dataclass
class MetricReport:
    metrics: dict = field(default_factory=dict)
    mono_loss: float | None = None
    pct_mono: float | None = None
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = dict(self.metrics)
        if self.mono_loss is not None:
            out["l_mono"] = self.mono_loss
            out["pct_mono"] = 100.0 * self.pct_mono
        out.update(self.extra)
        return out

    def to_block(self) -> str:
        return "\n".join(f"{k}={_fmt(v)}" for k, v in self.as_dict().items()) + "\n"

    def csv_header(self) -> str:
        return ",".join(self.as_dict())

    def csv_row(self) -> str:
        return ",".join(_fmt(v) for v in self.as_dict().values())


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def compute(pairs: Sequence[EvalPair], names: Sequence[str] = METRICS) -> dict:
    out = {}
    for name in names:
        if name == "wer":
            out["wer"] = wer(pairs)
        elif name == "per":
            out["per"] = per(pairs)
        elif name == "acc":
            out["acc"] = accuracy_and_lev(pairs)[0]
        elif name == "lev":
            out["lev"] = accuracy_and_lev(pairs)[1]
        elif name == "mfs":
            out["mfs"] = mfs(pairs)
        else:
            raise ValueError(f"unknown metric {name!r}")
    return out
