"""Attention dumps (JSON Lines), mean-position paths and grayscale heatmaps."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .monoloss import MonoConfig, MonoReport, example_terms, report_from_examples


class DumpError(ValueError):
    pass


REQUIRED_KEYS = ("id", "src", "tgt", "heads", "sep")


def write_dump(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")


def read_dump(path) -> list[dict]:
    """Read and validate an attention dump; errors name the 0-based record index."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for index, line in enumerate(l for l in fh if l.strip()):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DumpError(f"record {index}: invalid JSON ({exc.msg})") from None
            _validate(rec, index)
            records.append(rec)
    return records


def _validate(rec, index: int) -> None:
    if not isinstance(rec, dict):
        raise DumpError(f"record {index}: expected an object")
    missing = [k for k in REQUIRED_KEYS if k not in rec]
    if missing:
        raise DumpError(f"record {index}: missing keys {missing}")
    if rec["sep"] is not None and not isinstance(rec["sep"], int):
        raise DumpError(f"record {index}: sep must be an integer or null")
    if not isinstance(rec["heads"], list) or not rec["heads"]:
        raise DumpError(f"record {index}: heads must be a nonempty list")
    rows = None
    for h in rec["heads"]:
        if not isinstance(h, dict) or not {"layer", "head", "weights"} <= set(h):
            raise DumpError(f"record {index}: each head needs layer, head and weights")
        try:
            w = np.asarray(h["weights"], dtype=float)
        except (TypeError, ValueError):
            raise DumpError(f"record {index}: weights are not a numeric matrix") from None
        if w.ndim != 2 or w.shape[1] != len(rec["src"]):
            raise DumpError(f"record {index}: weights must be [steps x {len(rec['src'])}]")
        if rows is not None and w.shape[0] != rows:
            raise DumpError(f"record {index}: heads disagree on the number of steps")
        rows = w.shape[0]


def path_rows(records: Sequence[dict], config: MonoConfig) -> list[list]:
    """One row per (example, head, decoder step): mean position and the
    pairwise term between this step and the next (empty on the last step)."""
    out = []
    for rec in records:
        for h in rec["heads"]:
            pos, terms, _ = example_terms(np.asarray(h["weights"], dtype=float), rec.get("sep"), config)
            for step, a in enumerate(pos):
                term = terms[step] if step < len(terms) else ""
                out.append([rec["id"], h["layer"], h["head"], step, a, term])
    return out


def write_paths(rows: Sequence[list], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "layer", "head", "step", "abar", "pair_loss"])
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def to_gray(weights: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(weights, dtype=float), 0.0, 1.0) * 255).astype(int)


def write_pgm(weights: np.ndarray, path) -> None:
    """ASCII PGM (P2), one pixel per weight, rows are target steps; 1.0 is white."""
    gray = to_gray(weights)
    h, w = gray.shape
    with open(path, "w", newline="\n") as fh:
        fh.write(f"P2\n{w} {h}\n255\n")
        for row in gray:
            fh.write(" ".join(str(v) for v in row) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = []
    with open(path) as fh:
        for line in fh:
            tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM")
    w, h, _ = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array(tokens[4:4 + w * h], dtype=int).reshape(h, w)


def write_heatmap_csv(weights: np.ndarray, src: Sequence[str], tgt: Sequence[str], path) -> None:
    weights = np.asarray(weights, dtype=float)
    labels = list(tgt) + ["</s>"] * max(0, weights.shape[0] - len(tgt))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target"] + list(src))
        for label, row in zip(labels, weights):
            w.writerow([label] + [repr(float(v)) for v in row])


def write_heatmaps(records: Sequence[dict], out_dir, limit: int | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in records[:limit]:
        for h in rec["heads"]:
            stem = out / f"ex{rec['id']}_l{h['layer']}h{h['head']}"
            write_pgm(h["weights"], stem.with_suffix(".pgm"))
            write_heatmap_csv(h["weights"], rec["src"], rec["tgt"], stem.with_suffix(".csv"))
            written.append(stem.with_suffix(".pgm"))
    return written


def report(records: Sequence[dict], config: MonoConfig) -> MonoReport:
    return report_from_examples(records, config)


def summary_text(rep: MonoReport) -> str:
    lines = [f"l_mono={rep.loss!r}", f"pct_mono={100.0 * rep.pct_mono!r}", f"pairs={rep.pairs}"]
    for (layer, head), h in sorted(rep.per_head.items()):
        group = "with" if h.with_loss else "without"
        lines.append(f"head_l{layer}h{head}_{group}: l_mono={h.loss!r} pct_mono={100.0 * h.pct_mono!r}")
    return "\n".join(lines) + "\n"
