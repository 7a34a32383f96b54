import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpcompress.model import ModelDims, random_model
from dpcompress.pruning import (ImpConfig, block_of_prunable, choose_block_to_drop, cumulative_mask, magnitude_mask,
                                percent_count, prunable_vector, smallest_k, w_min)
from oracles import bottom_k_by_magnitude


def test_four_weight_example():
    keep = magnitude_mask(np.array([1.0, -3.0, 0.5, 2.0]), 50)
    assert keep.tolist() == [False, True, False, True]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=40), st.floats(0, 100))
def test_selection_matches_brute_force(values, percent):
    v = np.array(values, dtype=np.float64)
    k = percent_count(percent, v.size)
    assert set(smallest_k(v, k).tolist()) == bottom_k_by_magnitude(list(v), k)


def test_rounds():
    assert ImpConfig(10, sparsity=50).rounds == 5
    assert ImpConfig(7, sparsity=50).rounds == 8
    assert ImpConfig(0.1, sparsity=0.3).rounds == 3
    assert ImpConfig(10, layers_to_drop=3).rounds == 3


def test_config_validation():
    with pytest.raises(ValueError):
        ImpConfig(10)
    with pytest.raises(ValueError):
        ImpConfig(10, sparsity=50, layers_to_drop=1)
    with pytest.raises(ValueError):
        ImpConfig(0, sparsity=50)
    with pytest.raises(ValueError):
        ImpConfig(10, sparsity=100)


def test_cumulative_masks_are_monotone_and_exact():
    m = random_model(ModelDims(4, 7, 3), 3, 0)
    rng = np.random.default_rng(0)
    prev = None
    total = prunable_vector(m).size
    for i, pct in enumerate([10, 20, 30, 40, 50], start=1):
        mask = cumulative_mask(m, pct, i)
        assert mask.pruned == percent_count(pct, total)
        assert abs(mask.sparsity - pct / 100) <= 1 / total
        if prev is not None:
            assert mask.contains_pruned_of(prev)
        m.apply_mask(mask)
        # perturb survivors so the next round's order differs
        for n in m.prunable_names():
            m.params[n] = np.where(m.masks[n], m.params[n] + rng.standard_normal(m.params[n].shape), 0.0)
        prev = mask


def test_w_min_ignores_pruned_weights():
    m = random_model(ModelDims(4, 5, 3), 2, 1)
    m.masks["blocks.0.W1"][:] = False
    m.apply_mask(m.masks)
    picked = w_min(m, 20)
    keep = np.concatenate([m.masks[n].reshape(-1) for n in m.prunable_names()])
    assert keep[picked].all()
    assert picked.size == percent_count(20, int(keep.sum()))


def test_small_block_is_chosen():
    m = random_model(ModelDims(4, 8, 3), 4, 0)
    for p in ("W1", "W2"):
        m.params[f"blocks.2.{p}"] = m.params[f"blocks.2.{p}"] * 0.1
    d = choose_block_to_drop(m, 10)
    assert d.block == 2 and d.origin == 2
    assert sum(d.counts) == d.w_min_size


def test_block_ties_go_low():
    m = random_model(ModelDims(4, 2, 3), 2, 0)
    for n in m.prunable_names():
        m.params[n] = np.ones_like(m.params[n])
    assert choose_block_to_drop(m, 50).block == 0
    assert block_of_prunable(m).tolist() == [0] * 8 + [1] * 8
