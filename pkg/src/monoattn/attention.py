"""Scaled dot-product soft attention, multihead wrapping and DropHead."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

MASK_ENERGY = -1e9


class AttentionError(ValueError):
    pass


@dataclass
class AttentionWeights:
    """Target-to-source weights of one attention mechanism.

    ``weights`` is a graph node of shape [B, |Y|, |X|] (or [|Y|, |X|]); the
    masks mark real (non-padding) source columns and target rows.
    """

    layer: int
    head: int
    weights: Tensor
    source_mask: np.ndarray
    target_mask: np.ndarray | None = None

    @property
    def values(self) -> np.ndarray:
        return self.weights.value


@dataclass
class DropHeadPlan:
    rate: float
    keep: np.ndarray
    rescale: float = field(init=False)

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)
        kept = int(self.keep.sum())
        if kept == 0:
            raise AttentionError("DropHead plan must keep at least one head")
        self.rescale = len(self.keep) / kept

    @property
    def factors(self) -> np.ndarray:
        return self.keep * self.rescale


def sample_drophead(n_heads: int, p: float, rng: np.random.Generator) -> DropHeadPlan:
    """Drop each head independently with probability ``p``; resample if all drop."""
    if not 0.0 <= p < 1.0:
        raise AttentionError(f"DropHead rate must be in [0, 1), got {p}")
    while True:
        keep = rng.random(n_heads) >= p
        if keep.any():
            return DropHeadPlan(p, keep)


def _additive_mask(source_mask: np.ndarray, extra: np.ndarray | None = None) -> np.ndarray:
    allowed = np.asarray(source_mask, dtype=bool)[..., None, :]
    if extra is not None:
        allowed = allowed & extra
    return np.where(allowed, 0.0, MASK_ENERGY), allowed


def scaled_dot_product(q: Tensor, k: Tensor, v: Tensor, additive: np.ndarray) -> tuple[Tensor, Tensor]:
    d = q.shape[-1]
    if k.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise nd.ShapeError("attend", q.shape, k.shape, v.shape)
    energies = nd.scale(q @ nd.transpose(k, _swap_last(k.ndim)), 1.0 / np.sqrt(d))
    alpha = nd.softmax(nd.add(energies, additive))
    return alpha @ v, alpha


def _swap_last(ndim: int) -> tuple:
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


def _check_rows(allowed: np.ndarray, target_mask) -> None:
    empty = ~allowed.any(axis=-1)
    if target_mask is not None:
        empty = empty & np.asarray(target_mask, dtype=bool)
    if empty.any():
        raise AttentionError("every source position is masked for a valid target row")


def attend(queries, keys, values, source_mask=None, target_mask=None,
           layer: int = 0, head: int = 0) -> tuple[Tensor, AttentionWeights]:
    """Single attention mechanism: softmax-normalized scaled dot products and
    the weighted average of ``values``.

    Shapes are [..., |Y|, d] for queries and [..., |X|, d] for keys/values;
    ``source_mask`` is a boolean [..., |X|] marking real source positions.
    """
    queries, keys, values = nd.constant(queries), nd.constant(keys), nd.constant(values)
    if source_mask is None:
        source_mask = np.ones(keys.shape[:-1], dtype=bool)
    additive, allowed = _additive_mask(source_mask)
    _check_rows(np.broadcast_to(allowed, queries.shape[:-1] + (keys.shape[-2],)), target_mask)
    ctx, alpha = scaled_dot_product(queries, keys, values, additive)
    return ctx, AttentionWeights(layer, head, alpha, np.asarray(source_mask, dtype=bool), target_mask)


class MultiHeadAttention:
    """Per-head learned projections, one scaled dot-product per head, and an
    output projection over the concatenated head contexts."""

    def __init__(self, params: dict, prefix: str, dim: int, n_heads: int, layer: int = 0):
        if n_heads < 1 or dim % n_heads:
            raise AttentionError(f"{n_heads} heads do not divide model dim {dim}")
        self.dim, self.n_heads, self.layer = dim, n_heads, layer
        self.wq = params[f"{prefix}.wq"]
        self.wk = params[f"{prefix}.wk"]
        self.wv = params[f"{prefix}.wv"]
        self.wo = params[f"{prefix}.wo"]

    @staticmethod
    def param_shapes(prefix: str, dim: int) -> dict:
        return {f"{prefix}.{n}": (dim, dim) for n in ("wq", "wk", "wv", "wo")}

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return nd.transpose(nd.reshape(x, (b, t, self.n_heads, self.dim // self.n_heads)), (0, 2, 1, 3))

    def __call__(self, q_in: Tensor, kv_in: Tensor, source_mask: np.ndarray,
                 drop_plan: DropHeadPlan | None = None, causal: bool = False,
                 target_mask: np.ndarray | None = None) -> tuple[Tensor, list[AttentionWeights]]:
        b, ty, _ = q_in.shape
        tx = kv_in.shape[1]
        q = self._split(q_in @ self.wq)
        k = self._split(kv_in @ self.wk)
        v = self._split(kv_in @ self.wv)
        extra = np.tril(np.ones((ty, tx), dtype=bool)) if causal else None
        additive, allowed = _additive_mask(source_mask, extra)
        _check_rows(allowed, target_mask)
        # [B, 1, Ty|1, Tx] so the mask broadcasts over heads
        ctx, alpha = scaled_dot_product(q, k, v, additive[:, None])
        if drop_plan is not None:
            if len(drop_plan.keep) != self.n_heads:
                raise AttentionError("DropHead plan head count does not match")
            ctx = nd.mul(ctx, drop_plan.factors.reshape(1, -1, 1, 1))
        merged = nd.reshape(nd.transpose(ctx, (0, 2, 1, 3)), (b, ty, self.dim))
        records = [AttentionWeights(self.layer, h, alpha[:, h], np.asarray(source_mask, dtype=bool), target_mask)
                   for h in range(self.n_heads)]
        return merged @ self.wo, records


def multihead_attend(params: dict, queries, keys_values, n_heads: int, source_mask,
                     drop_plan: DropHeadPlan | None = None, prefix: str = "attn",
                     layer: int = 0) -> tuple[Tensor, list[AttentionWeights]]:
    dim = nd.constant(queries).shape[-1]
    mha = MultiHeadAttention(params, prefix, dim, n_heads, layer)
    return mha(nd.constant(queries), nd.constant(keys_values), source_mask, drop_plan)
