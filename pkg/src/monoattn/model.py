"""Tiny post-norm transformer encoder-decoder over character tokens."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .attention import AttentionWeights, MultiHeadAttention, sample_drophead
from .corpus import BOS, EOS, PAD, SEP

CHECKPOINT_FORMAT = "monoattn-checkpoint/1"
VANILLA = "vanilla"
SEP_CENTERED = "sep-centered"


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    dim: int = 64
    heads: int = 4
    enc_layers: int = 1
    dec_layers: int = 1
    ff_dim: int = 128
    drophead: float = 0.0
    pos_mode: str = VANILLA
    tie_target_softmax: bool = True
    seed: int = 1
    attention_dropout: float = 0.0

    def __post_init__(self):
        if self.pos_mode == "separator-centered":
            self.pos_mode = SEP_CENTERED
        for name in ("src_vocab", "tgt_vocab", "dim", "heads", "enc_layers", "dec_layers", "ff_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"{self.heads} heads do not divide model dim {self.dim}")
        if self.pos_mode not in (VANILLA, SEP_CENTERED):
            raise ValueError(f"unknown positional mode {self.pos_mode!r}")
        if not 0.0 <= self.drophead < 1.0:
            raise ValueError("drophead rate must be in [0, 1)")
        if self.attention_dropout:
            # it drives attention to a constant source position under the monotonicity loss
            raise ValueError("attention dropout is not supported; use drophead")


@dataclass
class Batch:
    """Padded id matrices.  ``tgt`` holds the gold output without BOS/EOS;
    ``sep`` holds the 0-based separator index per example (-1 if absent)."""

    src: np.ndarray
    src_lengths: np.ndarray
    tgt: np.ndarray
    tgt_lengths: np.ndarray
    sep: np.ndarray | None = None
    pad_id: int = PAD

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.tgt = np.asarray(self.tgt, dtype=np.int64)
        self.src_lengths = np.asarray(self.src_lengths, dtype=np.int64)
        self.tgt_lengths = np.asarray(self.tgt_lengths, dtype=np.int64)
        if self.sep is not None:
            self.sep = np.asarray(self.sep, dtype=np.int64)
            if np.any(self.sep >= self.src_lengths):
                raise ValueError("separator position beyond source length")
        if np.any(self.src_lengths > self.src.shape[1]) or np.any(self.tgt_lengths > self.tgt.shape[1]):
            raise ValueError("length exceeds padded extent")

    def __len__(self):
        return len(self.src_lengths)

    @property
    def score_rows(self) -> np.ndarray:
        """Decoder steps per example: every target token plus end-of-sequence."""
        return self.tgt_lengths + 1

    @property
    def src_mask(self) -> np.ndarray:
        return np.arange(self.src.shape[1])[None, :] < self.src_lengths[:, None]

    @classmethod
    def from_ids(cls, src_ids, tgt_ids, sep_id: int = SEP, append_eos: bool = True) -> "Batch":
        """Pad id sequences; the encoder input gets a trailing EOS by default."""
        if append_eos:
            src_ids = [list(s) + [EOS] for s in src_ids]
        n = len(src_ids)
        sx = max(len(s) for s in src_ids)
        ty = max(max((len(t) for t in tgt_ids), default=0), 1)
        src = np.full((n, sx), PAD, dtype=np.int64)
        tgt = np.full((n, ty), PAD, dtype=np.int64)
        sep = np.full(n, -1, dtype=np.int64)
        for i, (s, t) in enumerate(zip(src_ids, tgt_ids)):
            src[i, :len(s)] = s
            tgt[i, :len(t)] = t
            if sep_id in s:
                sep[i] = list(s).index(sep_id)
        return cls(src, [len(s) for s in src_ids], tgt, [len(t) for t in tgt_ids], sep)


def positional_encoding(length: int, dim: int, sep_position: int | None = None,
                        mode: str = VANILLA) -> tuple[np.ndarray, np.ndarray]:
    """Integer positions and their sinusoidal features [length, dim].

    The separator-centered mode puts the separator at 0, tags at negative
    positions and the lemma at positive ones.
    """
    if mode in (SEP_CENTERED, "separator-centered"):
        if sep_position is None:
            raise ValueError("separator-centered positions need a separator index")
        positions = np.arange(length) - max(int(sep_position), 0)
    else:
        positions = np.arange(length)
    return positions, sinusoid(positions, dim)


def sinusoid(positions: np.ndarray, dim: int) -> np.ndarray:
    i = np.arange(dim // 2 + dim % 2)
    angles = np.asarray(positions, dtype=float)[..., None] / np.power(10000.0, 2 * i / dim)
    out = np.zeros(np.shape(positions) + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles[..., : dim // 2])
    return out


@dataclass
class ForwardResult:
    logits: nd.Tensor
    attention: list
    ce: nd.Tensor
    ce_sum: nd.Tensor
    n_tokens: int
    self_attention: list = field(default_factory=list)


class Seq2Seq:
    def __init__(self, config: ModelConfig, params: dict | None = None):
        self.config = config
        shapes = self.param_shapes(config)
        if params is None:
            params = self._init(shapes, np.random.default_rng(config.seed))
        else:
            for name, shape in shapes.items():
                if name not in params or tuple(params[name].shape) != shape:
                    raise CheckpointError(f"parameter {name} missing or not of shape {shape}")
            params = {n: p if isinstance(p, nd.Tensor) else nd.tensor(p, requires_grad=True)
                      for n, p in params.items() if n in shapes}
        self.params = params

    # -- parameters ---------------------------------------------------------

    @staticmethod
    def param_shapes(c: ModelConfig) -> dict:
        d, f = c.dim, c.ff_dim
        shapes = {"src_emb": (c.src_vocab, d), "tgt_emb": (c.tgt_vocab, d), "out_bias": (c.tgt_vocab,)}
        if not c.tie_target_softmax:
            shapes["out_proj"] = (d, c.tgt_vocab)

        def ln(p):
            return {f"{p}.g": (d,), f"{p}.b": (d,)}

        def ff(p):
            return {f"{p}.w1": (d, f), f"{p}.b1": (f,), f"{p}.w2": (f, d), f"{p}.b2": (d,)}

        for l in range(c.enc_layers):
            shapes.update(MultiHeadAttention.param_shapes(f"enc{l}.self", d))
            shapes.update(ln(f"enc{l}.ln1"), **ff(f"enc{l}.ff"), **ln(f"enc{l}.ln2"))
        for l in range(c.dec_layers):
            shapes.update(MultiHeadAttention.param_shapes(f"dec{l}.self", d))
            shapes.update(ln(f"dec{l}.ln1"))
            shapes.update(MultiHeadAttention.param_shapes(f"dec{l}.cross", d))
            shapes.update(ln(f"dec{l}.ln2"), **ff(f"dec{l}.ff"), **ln(f"dec{l}.ln3"))
        return shapes

    @staticmethod
    def _init(shapes: dict, rng: np.random.Generator) -> dict:
        params = {}
        for name, shape in shapes.items():
            if name.endswith("_emb"):
                # small so untied-or-tied output logits start near uniform
                value = rng.normal(0.0, 0.02, shape)
            elif name.endswith(".g"):
                value = np.ones(shape)
            elif len(shape) == 1:
                value = np.zeros(shape)
            else:
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                value = rng.uniform(-limit, limit, shape)
            params[name] = nd.tensor(value, requires_grad=True)
        return params

    def state_dict(self) -> dict:
        return {n: p.value.copy() for n, p in self.params.items()}

    def load_state(self, state: dict) -> None:
        for n, v in state.items():
            self.params[n] = nd.tensor(np.array(v), requires_grad=True)

    # -- layers -------------------------------------------------------------

    def _ln(self, x, prefix):
        return nd.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _ff(self, x, prefix):
        p = self.params
        h = nd.relu(nd.add(x @ p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return nd.add(h @ p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _mha(self, prefix, layer):
        return MultiHeadAttention(self.params, prefix, self.config.dim, self.config.heads, layer)

    def _plan(self, rng):
        if rng is None or self.config.drophead == 0:
            return None
        return sample_drophead(self.config.heads, self.config.drophead, rng)

    def _check_ids(self, ids, vocab, side):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise ValueError(f"{side} token id out of range for vocabulary of {vocab}")

    def encode(self, src: np.ndarray, src_lengths: np.ndarray, sep: np.ndarray | None = None, rng=None):
        c = self.config
        self._check_ids(src, c.src_vocab, "source")
        src_mask = np.arange(src.shape[1])[None, :] < np.asarray(src_lengths)[:, None]
        if c.pos_mode == SEP_CENTERED:
            if sep is None:
                sep = np.zeros(len(src), dtype=np.int64)
            pe = np.stack([positional_encoding(src.shape[1], c.dim, max(int(s), 0), SEP_CENTERED)[1]
                           for s in sep])
        else:
            pe = positional_encoding(src.shape[1], c.dim)[1][None]
        x = nd.add(nd.scale(nd.embedding(self.params["src_emb"], src), np.sqrt(c.dim)), pe)
        for l in range(c.enc_layers):
            a, _ = self._mha(f"enc{l}.self", l)(x, x, src_mask, self._plan(rng), target_mask=src_mask)
            x = self._ln(nd.add(x, a), f"enc{l}.ln1")
            x = self._ln(nd.add(x, self._ff(x, f"enc{l}.ff")), f"enc{l}.ln2")
        return x, src_mask

    def decode(self, tgt_in: np.ndarray, tgt_mask: np.ndarray, memory, src_mask, rng=None):
        c = self.config
        self._check_ids(tgt_in, c.tgt_vocab, "target")
        pe = positional_encoding(tgt_in.shape[1], c.dim)[1][None]
        y = nd.add(nd.scale(nd.embedding(self.params["tgt_emb"], tgt_in), np.sqrt(c.dim)), pe)
        cross, selfs = [], []
        for l in range(c.dec_layers):
            # one DropHead sample per layer, shared by its self- and cross-attention
            plan = self._plan(rng)
            a, recs = self._mha(f"dec{l}.self", l)(y, y, tgt_mask, plan, causal=True, target_mask=tgt_mask)
            selfs.extend(recs)
            y = self._ln(nd.add(y, a), f"dec{l}.ln1")
            a, recs = self._mha(f"dec{l}.cross", l)(y, memory, src_mask, plan, target_mask=tgt_mask)
            cross.extend(recs)
            y = self._ln(nd.add(y, a), f"dec{l}.ln2")
            y = self._ln(nd.add(y, self._ff(y, f"dec{l}.ff")), f"dec{l}.ln3")
        if c.tie_target_softmax:
            logits = y @ nd.transpose(self.params["tgt_emb"], (1, 0))
        else:
            logits = y @ self.params["out_proj"]
        return nd.add(logits, self.params["out_bias"]), cross, selfs

    # -- public passes --------------------------------------------------------

    def forward_teacher_forced(self, batch: Batch, rng: np.random.Generator | None = None) -> ForwardResult:
        """Teacher-forced pass.  Passing ``rng`` switches on training-time DropHead."""
        n, ty = batch.tgt.shape
        tgt_in = np.full((n, ty + 1), PAD, dtype=np.int64)
        tgt_out = np.full((n, ty + 1), PAD, dtype=np.int64)
        tgt_in[:, 0] = BOS
        tgt_in[:, 1:] = batch.tgt
        tgt_out[:, :ty] = batch.tgt
        rows = batch.score_rows
        tgt_out[np.arange(n), rows - 1] = EOS
        tgt_mask = np.arange(ty + 1)[None, :] < rows[:, None]
        tgt_in[~tgt_mask] = PAD

        memory, src_mask = self.encode(batch.src, batch.src_lengths, batch.sep, rng)
        logits, cross, selfs = self.decode(tgt_in, tgt_mask, memory, src_mask, rng)
        n_tokens = int(rows.sum())
        ce_sum = nd.cross_entropy(logits, tgt_out, tgt_mask.astype(float))
        return ForwardResult(logits, cross, nd.scale(ce_sum, 1.0 / n_tokens), ce_sum, n_tokens, selfs)

    def greedy_decode(self, src_ids, max_len: int, sep_id: int = SEP):
        """Argmax decoding (ties go to the lowest id) for a list of source id
        sequences.  Returns, per example, the output ids without EOS and the
        cross-attention matrices [(layer, head, weights[steps x src_len])]."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        batch = Batch.from_ids(src_ids, [[] for _ in src_ids], sep_id)
        n = len(src_ids)
        with nd.no_grad():
            memory, src_mask = self.encode(batch.src, batch.src_lengths, batch.sep)
            seq = np.full((n, 1), BOS, dtype=np.int64)
            done = np.zeros(n, dtype=bool)
            steps = np.full(n, max_len, dtype=np.int64)
            cross = None
            for t in range(max_len):
                tgt_mask = np.ones(seq.shape, dtype=bool)
                logits, cross, _ = self.decode(seq, tgt_mask, memory, src_mask)
                nxt = np.argmax(logits.value[:, -1, :], axis=-1)
                nxt = np.where(done, PAD, nxt)
                newly = (~done) & (nxt == EOS)
                steps[newly] = t + 1
                done |= newly
                seq = np.concatenate([seq, nxt[:, None]], axis=1)
                if done.all():
                    break
        outputs = []
        for i in range(n):
            k = int(steps[i])
            toks = [int(t) for t in seq[i, 1:k + 1]]
            if toks and toks[-1] == EOS:
                toks = toks[:-1]
            src_len = int(batch.src_lengths[i])
            attn = [(r.layer, r.head, r.values[i, :k, :src_len].copy()) for r in cross]
            outputs.append((toks, attn))
        return outputs


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: Seq2Seq, extra: dict | None = None) -> None:
    """Write a ``.npz`` archive: one array per named parameter plus a
    ``__meta__`` JSON string holding the format tag, model config and ``extra``."""
    meta = {"format": CHECKPOINT_FORMAT, "config": asdict(model.config), "extra": extra or {}}
    arrays = {f"param/{n}": v for n, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[Seq2Seq, dict]:
    path = Path(path)
    try:
        data = np.load(path, allow_pickle=False)
        meta = json.loads(str(data["__meta__"]))
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    config = ModelConfig(**meta["config"])
    params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    extra_names = set(params) - set(Seq2Seq.param_shapes(config))
    if extra_names:
        raise CheckpointError(f"{path}: parameters not in config: {sorted(extra_names)}")
    return Seq2Seq(config, params), meta["extra"]
