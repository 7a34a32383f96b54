import numpy as np
import pytest

from dpcompress.data import make_synthetic
from dpcompress.dpsgd import DPSGD, DpSgdConfig
from dpcompress.model import (LayeredClassifier, ModelDims, Random, ZeroShotFT, ZeroShotPT, choose_layers,
                              init_student, random_model)


def _same_bits(a, b):
    return np.array_equal(np.asarray(a).view(np.uint64), np.asarray(b).view(np.uint64))


def test_zero_input_zero_biases_gives_zero_logits():
    m = random_model(ModelDims(5, 8, 3), 3, 0)
    assert np.array_equal(m.logits(np.zeros((4, 5))), np.zeros((4, 3)))


def test_all_false_mask_equals_explicit_zero():
    rng = np.random.default_rng(0)
    m = random_model(ModelDims(5, 8, 3), 2, 1)
    m.params["blocks.0.b2"] = rng.standard_normal(8)
    x = rng.standard_normal((6, 5))
    masked = m.copy()
    masked.masks["blocks.1.W2"] = np.zeros((8, 8), dtype=bool)
    zeroed = m.copy()
    zeroed.params["blocks.1.W2"] = np.zeros((8, 8))
    assert np.array_equal(masked.logits(x), zeroed.logits(x))


def test_block_with_zero_branch_is_identity():
    rng = np.random.default_rng(2)
    m = random_model(ModelDims(4, 6, 3), 3, 2)
    m.params["blocks.1.W2"] = np.zeros((6, 6))
    x = rng.standard_normal((5, 4))
    dropped = m.copy()
    dropped.drop_block(1)
    assert np.array_equal(m.logits(x), dropped.logits(x))
    assert dropped.n_blocks == 2 and dropped.block_origin == [0, 2]


def test_drop_block_validates_index():
    m = random_model(ModelDims(), 2, 0)
    with pytest.raises(IndexError):
        m.drop_block(2)


def test_zeroshot_copies_even_blocks_bit_identically():
    teacher = random_model(ModelDims(4, 6, 3), 12, 5)
    student = init_student(teacher, 6, ZeroShotPT())
    assert student.block_origin == [0, 2, 4, 6, 8, 10]
    for k, i in enumerate([0, 2, 4, 6, 8, 10]):
        for p in ("W1", "b1", "W2", "b2"):
            assert _same_bits(student.params[f"blocks.{k}.{p}"], teacher.params[f"blocks.{i}.{p}"])
    for name in ("input_proj", "head", "head_b"):
        assert _same_bits(student.params[name], teacher.params[name])


def test_random_init_is_deterministic():
    teacher = random_model(ModelDims(), 4, 0)
    a = init_student(teacher, 2, Random(7))
    b = init_student(teacher, 2, Random(7))
    assert _same_bits(a.flat_params(), b.flat_params())


def test_zeroshot_ft_uses_post_step_teacher():
    data = make_synthetic(3, 64, 4, seed=0)
    pre = random_model(ModelDims(4, 6, 3), 4, 0)
    post = pre.copy()
    DPSGD(DpSgdConfig(1.0, 1.0, 0.5, 16), data.n).step(post, data.features, data.labels)
    student = init_student(pre, 2, ZeroShotFT(post))
    for k, i in enumerate([0, 2]):
        assert _same_bits(student.params[f"blocks.{k}.W1"], post.params[f"blocks.{i}.W1"])
        assert not _same_bits(student.params[f"blocks.{k}.W1"], pre.params[f"blocks.{i}.W1"])
    with pytest.raises(ValueError):
        init_student(pre, 2, ZeroShotFT())


def test_choose_layers_rules():
    assert choose_layers(4, 2) == [0, 2]
    assert choose_layers(4, 3, "first") == [0, 1, 2]
    assert choose_layers(6, 3, "spread") == [0, 2, 4]
    with pytest.raises(ValueError):
        choose_layers(4, 3, "even")
    with pytest.raises(ValueError):
        choose_layers(2, 3)


def test_apply_mask_all_true_and_all_false():
    m = random_model(ModelDims(4, 6, 3), 2, 0)
    before = m.flat_params()
    m.apply_mask({n: np.ones_like(m.masks[n]) for n in m.prunable_names()})
    assert _same_bits(before, m.flat_params())
    m.apply_mask({n: np.zeros_like(m.masks[n]) for n in m.prunable_names()})
    assert m.sparsity() == 1.0 and m.mask_sparsity() == 1.0
    with pytest.raises(ValueError):
        m.apply_mask({"blocks.0.W1": np.ones((6, 6), dtype=bool)})


def test_masked_weights_stay_zero_through_training():
    data = make_synthetic(3, 128, 4, seed=0)
    m = random_model(ModelDims(4, 6, 3), 2, 0)
    rng = np.random.default_rng(0)
    m.apply_mask({n: rng.random(m.masks[n].shape) > 0.5 for n in m.prunable_names()})
    DPSGD(DpSgdConfig(1.0, 1.0, 0.5, 32), data.n).run(m, data.features, data.labels, 10)
    for n in m.prunable_names():
        assert np.all(m.params[n][~m.masks[n]] == 0.0)


def test_checkpoint_round_trip(tmp_path):
    m = random_model(ModelDims(4, 6, 3), 3, 0)
    m.masks["blocks.2.W1"][0, :3] = False
    m.drop_block(1)
    m.save(tmp_path / "m.json")
    back = LayeredClassifier.load(tmp_path / "m.json")
    assert _same_bits(back.flat_params(), m.flat_params())
    assert all(np.array_equal(back.masks[n], m.masks[n]) for n in m.prunable_names())
    assert back.block_origin == [0, 2] and back.dims == m.dims


def test_bad_checkpoint_version(tmp_path):
    doc = random_model(ModelDims(), 1, 0).to_dict()
    doc["format_version"] = 99
    with pytest.raises(ValueError):
        LayeredClassifier.from_dict(doc)


def test_forward_rejects_wrong_width():
    with pytest.raises(ValueError):
        random_model(ModelDims(4, 6, 3), 1, 0).logits(np.zeros((2, 5)))
