import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from monoattn import ndgrad as nd
from monoattn.attention import AttentionWeights
from monoattn.model import Batch
from monoattn.monoloss import (DECREASING, INCREASING, MonoConfig, MonoConfigError, example_terms,
                               mean_attended_position, mono_loss, mono_loss_grad, pairwise_terms,
                               parse_head_mask, percent_mono, report_from_examples, score_batch,
                               separator_scope)


class FakeBatch:
    """Just the fields score_batch reads."""

    def __init__(self, src_lengths, score_rows, sep=None):
        self.src_lengths = np.asarray(src_lengths)
        self.score_rows = np.asarray(score_rows)
        self.sep = None if sep is None else np.asarray(sep)


def _weights(alpha, layer=0, head=0):
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim == 2:
        alpha = alpha[None]
    return AttentionWeights(layer, head, nd.tensor(alpha, requires_grad=True),
                            np.ones(alpha.shape[::2], bool))


def _rows_with_positions(abar, n_src):
    """Attention rows (two-point mixtures) whose mean positions are ``abar``."""
    out = np.zeros((len(abar), n_src))
    for i, a in enumerate(abar):
        lo = min(int(math.floor(a)), n_src - 1)
        frac = a - lo
        out[i, lo - 1] += 1 - frac
        out[i, lo] += frac
    return out


# --- mean attended position -------------------------------------------------

@pytest.mark.parametrize("row,expected", [
    ([0, 0, 1, 0], 3.0),
    ([0.25, 0.25, 0.25, 0.25], 2.5),
    ([0.5, 0.3, 0.2], 1.7),
])
def test_mean_attended_position(row, expected):
    assert mean_attended_position(row) == pytest.approx(expected, abs=1e-15)


# --- closed-form loss values ------------------------------------------------

def test_weakly_increasing_positions_cost_nothing():
    assert mono_loss([1, 2, 3], 3, 0.0) == 0.0


def test_single_decrease():
    assert abs(mono_loss([2, 1], 4, 0.0) - 0.25) < 1e-12


def test_diagonal_meets_unit_margin():
    assert mono_loss([2, 4, 6], 6, 1.0) == 0.0


def test_constant_positions_under_unit_margin():
    assert abs(mono_loss([1, 1, 1], 5, 1.0) - 2 / 3) < 1e-12


def test_gradient_examples():
    np.testing.assert_array_equal(mono_loss_grad([1, 2, 3], 3, 0.0), [0, 0, 0])
    np.testing.assert_array_equal(mono_loss_grad([2, 1], 4, 0.0), [0.25, -0.25])


@pytest.mark.parametrize("delta", [0.0, 0.5, 1.0])
def test_gradient_matches_finite_differences(delta):
    rng = np.random.default_rng(int(delta * 10))
    checked = 0
    while checked < 50:
        n_src = int(rng.integers(2, 11))
        abar = rng.uniform(1, n_src, size=int(rng.integers(2, 9)))
        margin = delta * n_src / len(abar)
        if np.min(np.abs(abar[:-1] - abar[1:] + margin)) < 1e-4:
            continue
        eps = 1e-6
        fd = np.array([(mono_loss(abar + eps * e, n_src, delta) - mono_loss(abar - eps * e, n_src, delta))
                       / (2 * eps) for e in np.eye(len(abar))])
        np.testing.assert_allclose(mono_loss_grad(abar, n_src, delta), fd, atol=1e-5)
        checked += 1


# --- percent mono -----------------------------------------------------------

def test_percent_mono_examples():
    assert percent_mono([1, 2, 3], 3) == 1.0
    assert percent_mono([3, 2, 4], 4) == 0.5
    assert percent_mono([2, 4, 6], 6, 3, delta=1.0) == 1.0


# --- properties ---------------------------------------------------------------

positions = st.lists(st.floats(1.0, 50.0, allow_nan=False), min_size=1, max_size=12)


@given(positions, st.integers(1, 50), st.sampled_from([0.0, 0.3, 1.0]))
def test_direction_symmetry(abar, n_src, delta):
    assert mono_loss(abar, n_src, delta, INCREASING) == mono_loss(abar[::-1], n_src, delta, DECREASING)


@given(positions, st.integers(1, 50), st.sampled_from([0.0, 0.5, 1.0]))
def test_percent_mono_counts_zero_terms(abar, n_src, delta):
    terms = pairwise_terms(abar, n_src, delta)
    expected = sum(t == 0 for t in terms) / len(terms) if terms else 1.0
    assert percent_mono(abar, n_src, delta=delta) == expected


@given(st.lists(st.floats(1.0, 50.0, allow_nan=False), min_size=1, max_size=12), st.integers(1, 50))
def test_zero_loss_iff_weakly_increasing(abar, n_src):
    increasing = all(a <= b for a, b in zip(abar, abar[1:]))
    assert (mono_loss(abar, n_src) == 0.0) == increasing


@given(st.integers(2, 12), st.integers(0, 10), st.floats(0.01, 5.0), st.integers(2, 40))
def test_injected_decrease_adds_d_over_x(length, where, d, n_src):
    abar = list(np.arange(1.0, length + 1) * 10)
    k = where % (length - 1)
    # shift the tail down so exactly one pair decreases, by d
    bumped = abar[:k + 1] + [a - (abar[k + 1] - abar[k]) - d for a in abar[k + 1:]]
    assert mono_loss(bumped, n_src) == pytest.approx(d / n_src, rel=1e-12, abs=1e-12)


@settings(max_examples=200)
@given(st.integers(2, 200), st.integers(1, 20), st.sampled_from([0.0, 0.5, 1.0]), st.integers(0, 2**32 - 1))
def test_pairwise_term_bound(n_src, n_tgt, delta, seed):
    rng = np.random.default_rng(seed)
    alpha = rng.dirichlet(np.full(n_src, 0.2), size=n_tgt)
    abar = alpha @ np.arange(1, n_src + 1)
    bound = (n_src - 1) / n_src + delta / n_tgt
    assert max(pairwise_terms(abar, n_src, delta), default=0.0) <= bound + 1e-12


def test_report_zero_loss_implies_all_mono():
    rng = np.random.default_rng(0)
    for _ in range(50):
        abar = np.sort(rng.uniform(1, 6, size=5))
        rec = {"sep": None, "heads": [{"layer": 0, "head": 0, "weights": _rows_with_positions(abar, 6)}]}
        rep = report_from_examples([rec], MonoConfig())
        assert rep.loss == 0.0 and rep.pct_mono == 1.0


# --- config -----------------------------------------------------------------

def test_config_validation():
    with pytest.raises(MonoConfigError):
        MonoConfig(lam=-0.1)
    with pytest.raises(MonoConfigError):
        MonoConfig(delta=1.5)
    with pytest.raises(MonoConfigError):
        MonoConfig(lam=0.1, head_mask="none")
    with pytest.raises(MonoConfigError):
        MonoConfig(head_mask="0:9").validate_heads(1, 4)
    with pytest.raises(MonoConfigError):
        parse_head_mask("zero:one")
    assert MonoConfig(lam=0.0, head_mask="none").selects(0, 0) is False
    assert MonoConfig(direction="dec").direction == DECREASING
    assert parse_head_mask("0:1,0:2") == frozenset({(0, 1), (0, 2)})


# --- batch scoring ----------------------------------------------------------

def test_single_head_single_sequence_is_loss_over_rows():
    rng = np.random.default_rng(1)
    alpha = rng.dirichlet(np.ones(6), size=4)
    loss, rep = score_batch([_weights(alpha)], FakeBatch([6], [4]), MonoConfig())
    abar = alpha @ np.arange(1, 7)
    assert float(loss.value) == pytest.approx(mono_loss(abar, 6) / 4, abs=1e-15)
    assert rep.pct_mono == percent_mono(abar, 6)


def test_head_mask_restricts_loss_to_one_head():
    rng = np.random.default_rng(2)
    alphas = [rng.dirichlet(np.ones(5), size=4) for _ in range(4)]
    cfg = MonoConfig(head_mask="0:1")
    recs = [_weights(a, 0, h) for h, a in enumerate(alphas)]
    loss, rep = score_batch(recs, FakeBatch([5], [4]), cfg)
    assert float(loss.value) == pytest.approx(mono_loss(alphas[1] @ np.arange(1, 6), 5) / 4, abs=1e-15)
    grads = nd.backward(loss)
    for h, r in enumerate(recs):
        assert (r.weights.id in grads) == (h == 1)
    assert [rep.per_head[(0, h)].with_loss for h in range(4)] == [False, True, False, False]


def test_two_sequences_token_weighted():
    rng = np.random.default_rng(3)
    a1 = rng.dirichlet(np.ones(7), size=5)
    a2 = np.zeros((5, 7))
    a2[:3, :4] = rng.dirichlet(np.ones(4), size=3)
    a2[3:, 0] = 1.0  # padding rows, must not count
    loss, rep = score_batch([_weights(np.stack([a1, a2]))], FakeBatch([7, 4], [5, 3]), MonoConfig(delta=0.5))
    pos7, pos4 = np.arange(1, 8), np.arange(1, 5)
    expected = (mono_loss(a1 @ pos7, 7, 0.5) + mono_loss(a2[:3, :4] @ pos4, 4, 0.5)) / 8
    assert float(loss.value) == pytest.approx(expected, abs=1e-15)
    assert rep.pairs == 4 + 2


def test_score_batch_gradient_three_heads():
    rng = np.random.default_rng(4)
    batch = FakeBatch([7, 6], [5, 4])
    mask = np.arange(7)[None, :] < batch.src_lengths[:, None]
    for _ in range(20):
        e = rng.uniform(-2, 2, size=(3, 2, 5, 7))

        def f(t):
            alpha = nd.softmax(nd.add(t, np.where(mask, 0.0, -1e9)[None, :, None, :]))
            recs = [AttentionWeights(0, h, alpha[h], mask) for h in range(3)]
            return nd.scale(score_batch(recs, batch, MonoConfig(lam=0.1, delta=0.5))[0], 0.1)

        assert nd.grad_check(f, e) < 1e-4


def test_doubling_lambda_doubles_contribution():
    rng = np.random.default_rng(5)
    alpha = rng.dirichlet(np.ones(6), size=5)
    node, _ = score_batch([_weights(alpha)], FakeBatch([6], [5]), MonoConfig())
    assert float(nd.scale(node, 0.2).value) == 2 * float(nd.scale(node, 0.1).value)


# --- separator scope --------------------------------------------------------

def test_separator_scope_example():
    src = "V SG 3 PRS <sep> u s e".split()
    batch = Batch.from_ids([[10 + i if t != "<sep>" else 3 for i, t in enumerate(src)]], [[5, 6, 7]],
                           append_eos=False)
    cols, size = separator_scope(batch, 0)
    # 1-based columns 6..8
    assert [c + 1 for c in cols] == [6, 7, 8] and size == 3
    cols, size = separator_scope(batch, 0, separator_masking=False)
    assert list(cols) == list(range(8)) and size == 8


def test_separator_last_is_error():
    batch = Batch.from_ids([[10, 11, 3]], [[5]], append_eos=False)
    with pytest.raises(ValueError, match="empty lemma"):
        separator_scope(batch, 0)


def test_masked_scoring_ignores_tag_region():
    # tags region (cols 0-3) anti-monotone, lemma region (cols 5-7) diagonal
    alpha = np.zeros((3, 8))
    for row, (tag, lemma) in enumerate([(3, 5), (2, 6), (1, 7)]):
        alpha[row, tag], alpha[row, lemma] = 0.7, 0.3
    batch = FakeBatch([8], [3], sep=[4])
    cfg = MonoConfig(separator_masking=True)
    loss, rep = score_batch([_weights(alpha)], batch, cfg)
    assert float(loss.value) == 0.0 and rep.pct_mono == 1.0
    assert float(score_batch([_weights(alpha)], batch, MonoConfig())[0].value) > 0
    pos, terms, n = example_terms(alpha, 4, cfg)
    assert pos == [1.0, 2.0, 3.0] and n == 3 and terms == [0.0, 0.0]


def test_batch_and_plain_reports_agree():
    rng = np.random.default_rng(6)
    alpha = np.stack([rng.dirichlet(np.ones(6), size=4) for _ in range(2)])
    cfg = MonoConfig(delta=0.3)
    loss, rep = score_batch([_weights(alpha)], FakeBatch([6, 6], [4, 4]), cfg)
    plain = report_from_examples(
        [{"sep": None, "heads": [{"layer": 0, "head": 0, "weights": alpha[i]}]} for i in range(2)], cfg)
    assert plain.loss == pytest.approx(rep.loss, abs=1e-15)
    assert plain.pct_mono == rep.pct_mono
