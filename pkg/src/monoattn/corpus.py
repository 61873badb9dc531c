"""Corpus I/O, vocabularies and synthetic transduction tasks."""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS, SEP, UNK = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<s>", "</s>", "<sep>", "<unk>")
SEP_TOKEN = RESERVED[SEP]

DEFAULT_TAGS = {
    "V": [], "N": [], "SG": ["s"], "PL": ["e", "n"],
    "PST": ["e", "d"], "PRS": [], "1": [], "2": ["t"], "3": [],
}


class CorpusError(ValueError):
    pass


class Vocab:
    def __init__(self, tokens=()):
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.itos[i] if 0 <= i < len(self.itos) else RESERVED[UNK] for i in ids]


@dataclass
class Corpus:
    """Source/target token pairs, optional extra references per pair, and
    (for generated data) the gold source index each target token derives from."""

    pairs: list = field(default_factory=list)
    extra_refs: list | None = None
    alignments: list | None = None

    def __len__(self):
        return len(self.pairs)

    def __eq__(self, other):
        return (isinstance(other, Corpus) and self.pairs == other.pairs
                and (self.extra_refs or [[]] * len(self)) == (other.extra_refs or [[]] * len(other)))

    def references(self, i: int) -> list:
        extra = self.extra_refs[i] if self.extra_refs else []
        return [self.pairs[i][1]] + list(extra)

    def build_vocabs(self) -> tuple[Vocab, Vocab]:
        src, tgt = Vocab(), Vocab()
        for s, t in self.pairs:
            for tok in s:
                src.add(tok)
            for tok in t:
                tgt.add(tok)
        return src, tgt


@dataclass
class Splits:
    train: Corpus
    dev: Corpus
    test: Corpus
    params: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# TSV
# ---------------------------------------------------------------------------

def read_tsv(path) -> Corpus:
    """``source<TAB>target[<TAB>extra reference ...]``, space-separated tokens;
    blank lines and ``#`` lines are skipped."""
    pairs, extra = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) < 2:
                raise CorpusError(f"{path}:{lineno}: expected source<TAB>target")
            pairs.append((cols[0].split(), cols[1].split()))
            extra.append([c.split() for c in cols[2:]])
    return Corpus(pairs, extra if any(extra) else None)


def write_tsv(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, (s, t) in enumerate(corpus.pairs):
            cols = [" ".join(s), " ".join(t)]
            if corpus.extra_refs:
                cols += [" ".join(r) for r in corpus.extra_refs[i]]
            fh.write("\t".join(cols) + "\n")


def write_splits(splits: Splits, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "dev", "test"):
        write_tsv(getattr(splits, name), out / f"{name}.tsv")
    with open(out / "generator.txt", "w", encoding="utf-8") as fh:
        for k, v in splits.params.items():
            fh.write(f"{k} = {v}\n")


def read_splits(data_dir) -> Splits:
    d = Path(data_dir)
    parts = {}
    for name in ("train", "dev", "test"):
        p = d / f"{name}.tsv"
        parts[name] = read_tsv(p) if p.exists() else Corpus()
    return Splits(**parts)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def _alphabet(size: int) -> list[str]:
    letters = string.ascii_lowercase + string.digits
    if size > len(letters):
        return [f"c{i}" for i in range(size)]
    return list(letters[:size])


def _unique_sources(rng, total: int, alphabet, len_range) -> list[list[str]]:
    lo, hi = len_range
    if lo < 1 or hi < lo:
        raise CorpusError(f"bad length range {len_range}")
    capacity = sum(len(alphabet) ** k for k in range(lo, hi + 1))
    if capacity < total:
        raise CorpusError(f"only {capacity} distinct sources exist; asked for {total}")
    seen, out = set(), []
    while len(out) < total:
        n = int(rng.integers(lo, hi + 1))
        s = tuple(alphabet[i] for i in rng.integers(0, len(alphabet), n))
        if s not in seen:
            seen.add(s)
            out.append(list(s))
    return out


def _split(items: list, n: int) -> tuple[list, list, list]:
    n_held = n // 10
    return items[:n], items[n:n + n_held], items[n + n_held:n + 2 * n_held]


def _total(n: int) -> int:
    return n + 2 * (n // 10)


def gen_cipher(n: int, vocab_size: int = 20, len_range=(5, 15), seed: int = 1,
               identity: bool = False) -> Splits:
    """Character-wise substitution by a fixed random bijection.

    ``n`` training pairs plus ``n // 10`` dev and test pairs; source strings
    never repeat across splits.
    """
    if vocab_size < 2:
        raise CorpusError("cipher needs a vocabulary of at least 2 symbols")
    alphabet = _alphabet(vocab_size)
    sources = _unique_sources(np.random.default_rng([seed, 0]), _total(n), alphabet, len_range)
    if identity:
        table = dict(zip(alphabet, alphabet))
    else:
        perm = np.random.default_rng([seed, 1]).permutation(vocab_size)
        table = {a: alphabet[p] for a, p in zip(alphabet, perm)}
    parts = []
    for chunk in _split(sources, n):
        pairs = [(s, [table[c] for c in s]) for s in chunk]
        parts.append(Corpus(pairs, alignments=[list(range(len(s))) for s in chunk]))
    params = {"task": "copy" if identity else "cipher", "n": n, "vocab": vocab_size,
              "min_len": len_range[0], "max_len": len_range[1], "seed": seed}
    return Splits(*parts, params=params)


def gen_inflection(n: int, tags: dict | None = None, seed: int = 1, vocab_size: int = 20,
                   len_range=(3, 8), max_tags: int = 3) -> Splits:
    """``tags <sep> lemma`` -> lemma followed by the suffix of each tag in order.

    ``tags`` maps tag symbol to suffix tokens (possibly empty).
    """
    tags = DEFAULT_TAGS if tags is None else tags
    if not tags:
        raise CorpusError("inflection needs at least one tag")
    names = sorted(tags)
    alphabet = _alphabet(vocab_size)
    lemma_rng = np.random.default_rng([seed, 0])
    tag_rng = np.random.default_rng([seed, 1])
    lemmas = _unique_sources(lemma_rng, _total(n), alphabet, len_range)
    parts = []
    for chunk in _split(lemmas, n):
        pairs, aligns = [], []
        for lemma in chunk:
            k = int(tag_rng.integers(1, min(max_tags, len(names)) + 1))
            chosen = sorted(tag_rng.choice(len(names), size=k, replace=False))
            tagseq = [names[i] for i in chosen]
            target = list(lemma)
            for t in tagseq:
                target += list(tags[t])
            pairs.append((tagseq + [SEP_TOKEN] + list(lemma), target))
            base = len(tagseq) + 1
            # suffix tokens have no lemma source; they align to the final lemma char
            aligns.append([base + i for i in range(len(lemma))]
                          + [base + len(lemma) - 1] * (len(target) - len(lemma)))
        parts.append(Corpus(pairs, alignments=aligns))
    params = {"task": "inflection", "n": n, "vocab": vocab_size, "min_len": len_range[0],
              "max_len": len_range[1], "seed": seed,
              "tags": ";".join(f"{t}:{'+'.join(tags[t])}" for t in names)}
    return Splits(*parts, params=params)


def gen_reorder(n: int, swap_prob: float = 0.3, seed: int = 1, vocab_size: int = 20,
                len_range=(5, 15), n_movers: int = 4) -> Splits:
    """Mostly-copy task.  With probability ``swap_prob`` a sentence ends in a
    "mover" token (``V0``..) which the target places second, as a verb-final
    dialect clause becomes verb-second.  At ``swap_prob == 0`` the output equals
    the identity copy task with the same seed.
    """
    if not 0.0 <= swap_prob <= 1.0:
        raise CorpusError("swap probability must be in [0, 1]")
    base = gen_cipher(n, vocab_size, len_range, seed, identity=True)
    rng = np.random.default_rng([seed, 2])
    movers = [f"V{i}" for i in range(n_movers)]
    parts = []
    for part in (base.train, base.dev, base.test):
        pairs, aligns = [], []
        for s, _ in part.pairs:
            if rng.random() < swap_prob:
                v = movers[int(rng.integers(len(movers)))]
                src = s + [v]
                tgt = [s[0], v] + s[1:]
                last = len(src) - 1
                aligns.append([0, last] + list(range(1, last)))
                pairs.append((src, tgt))
            else:
                pairs.append((list(s), list(s)))
                aligns.append(list(range(len(s))))
        parts.append(Corpus(pairs, alignments=aligns))
    params = dict(base.params, task="reorder", swap=swap_prob, movers=n_movers)
    return Splits(*parts, params=params)
