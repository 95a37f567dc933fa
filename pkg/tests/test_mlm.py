import math

import numpy as np
import pytest

from deskbert import tensor as T
from deskbert.mlm import (ANNEAL_POLICY, KEEP, MASKED, PRETRAIN_POLICY, RANDOM, MaskingPolicy, apply_masking,
                          mlm_loss, selection_count)
from deskbert.tensor import EmptySelectionError, Tensor, backward
from deskbert.tokenizer import BYTE_OFFSET, MASK


def test_preset_ratios():
    assert PRETRAIN_POLICY.ratio == 0.5 and ANNEAL_POLICY.ratio == 0.1


def test_exact_counts():
    assert apply_masking(np.arange(5, 105), MaskingPolicy(0.5), 200).n_selected == 50
    assert apply_masking(np.arange(5, 15), MaskingPolicy(0.1), 200).n_selected == 1


def test_rounding_rule():
    assert selection_count(0.5, 3) == 2 and selection_count(0.1, 4) == 0 and selection_count(0.1, 5) == 1


def test_policy_validation():
    with pytest.raises(ValueError):
        MaskingPolicy(1.0)
    with pytest.raises(ValueError):
        MaskingPolicy(0.5, strategy="span")


def test_no_eligible_tokens():
    with pytest.raises(ValueError, match="no maskable"):
        apply_masking(np.array([[2, 3, 0]]), MaskingPolicy(0.5), 50)


def test_specials_and_padding_never_selected():
    rng = np.random.default_rng(0)
    ids = rng.integers(0, 60, size=(32, 24))
    ids[:, 0] = 2
    pad = rng.random(ids.shape) < 0.2
    pad[:, 1] = False
    ids[:, 1] = 9
    for step in range(20):
        b = apply_masking(ids, MaskingPolicy(0.5, seed=3), 60, pad, step=step)
        assert not (b.selected & (pad | (ids < BYTE_OFFSET))).any()


def test_category_semantics():
    ids = np.arange(5, 1005)[None]
    b = apply_masking(ids, MaskingPolicy(0.5, seed=1), 2000)
    sel = b.selected
    assert np.all(b.input_ids[sel & (b.category == MASKED)] == MASK)
    assert np.all(b.input_ids[sel & (b.category == KEEP)] == ids[sel & (b.category == KEEP)])
    rand = b.input_ids[sel & (b.category == RANDOM)]
    assert rand.min() >= BYTE_OFFSET and rand.max() < 2000
    assert np.all(b.input_ids[~sel] == ids[~sel])


def test_mask_only():
    b = apply_masking(np.arange(5, 45), MaskingPolicy(0.5, strategy="mask-only"), 100)
    assert np.all(b.input_ids[b.selected] == MASK)


def test_determinism_and_seed_sensitivity():
    ids = np.arange(5, 45)[None].repeat(4, 0)
    a = apply_masking(ids, MaskingPolicy(0.5, seed=7), 100)
    b = apply_masking(ids, MaskingPolicy(0.5, seed=7), 100)
    np.testing.assert_array_equal(a.input_ids, b.input_ids)
    diffs = sum(not np.array_equal(a.selected, apply_masking(ids, MaskingPolicy(0.5, seed=s), 100).selected)
                for s in range(100, 200))
    assert diffs >= 1


def test_rows_independent_of_batching():
    ids = np.arange(5, 85).reshape(4, 20)
    whole = apply_masking(ids, MaskingPolicy(0.3, seed=2), 100, step=5)
    first = apply_masking(ids[:1], MaskingPolicy(0.3, seed=2), 100, step=5)
    np.testing.assert_array_equal(whole.selected[0], first.selected[0])


def test_zero_logits_give_ln_v():
    V = 257
    b = apply_masking(np.arange(5, 45)[None], MaskingPolicy(0.5), V)
    loss = mlm_loss(Tensor(np.zeros((1, 40, V))), b).item()
    assert abs(loss - math.log(V)) < 1e-4


def test_margin_one_hot(f64):
    ids = np.arange(5, 25)[None]
    b = apply_masking(ids, MaskingPolicy(0.5), 30)
    logits = np.zeros((1, 20, 30))
    logits[0, np.arange(20), ids[0]] = 30.0
    assert mlm_loss(Tensor(logits), b).item() < 1e-9 * 30 + 3e-12  # 29 e^-30 ~ 2.7e-12


def test_log_sum_exp_oracle(f64):
    rng = np.random.default_rng(0)
    ids = rng.integers(5, 40, size=(3, 10))
    b = apply_masking(ids, MaskingPolicy(0.4, seed=4), 40)
    logits = rng.normal(size=(3, 10, 40))
    terms = [math.log(sum(math.exp(v) for v in logits[i, j])) - logits[i, j, ids[i, j]]
             for i, j in zip(*np.nonzero(b.selected))]
    assert abs(mlm_loss(Tensor(logits), b).item() - sum(terms) / len(terms)) < 1e-6


def test_unselected_zero_gradient(f64):
    rng = np.random.default_rng(1)
    ids = rng.integers(5, 40, size=(2, 12))
    b = apply_masking(ids, MaskingPolicy(0.3), 40)
    logits = Tensor(rng.normal(size=(2, 12, 40)), requires_grad=True)
    backward(mlm_loss(logits, b))
    assert np.all(logits.grad[~b.selected] == 0.0)


def test_empty_selection():
    b = apply_masking(np.arange(5, 9)[None], MaskingPolicy(0.1), 20)  # round(0.4) = 0
    assert b.n_selected == 0
    with pytest.raises(EmptySelectionError):
        mlm_loss(Tensor(np.zeros((1, 4, 20))), b)
