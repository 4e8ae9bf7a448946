import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptpsi.prompts import (Prompt, PromptBank, PromptNotFound, TaskDescriptor, binomial_ci,
                               cosine, init_bank, match, match_indices, psi_patch_features,
                               task_grid)
from promptpsi.tensor import Tensor

GRID = task_grid((0.125, 0.25, 0.5), (10.0, 15.0), ("LoS", "NLoS"))


def _bank(seed=0, d_p=16):
    return init_bank(GRID, d_p, np.random.default_rng(seed))


def test_grid_has_twelve_tasks():
    assert len(GRID) == 12
    assert len(set(GRID)) == 12


def test_descriptor_parse_and_equality():
    t = TaskDescriptor.parse("0.25, 12, nlos")
    assert t == TaskDescriptor(0.25, 12.0, "NLoS")
    assert t.label() == "cr0.25_snr12_NLoS"


@pytest.mark.parametrize("text", ["0.25,12", "0.25,12,Rayleigh", "0,12,LoS", "1.5,12,LoS"])
def test_descriptor_rejects(text):
    with pytest.raises(ValueError):
        TaskDescriptor.parse(text)


def test_lookup_exact_and_missing():
    bank = _bank()
    t = TaskDescriptor(0.25, 15.0, "NLoS")
    assert bank.lookup(t).key_meta == t
    with pytest.raises(PromptNotFound):
        bank.lookup(TaskDescriptor(0.25, 12.0, "NLoS"))


def test_bank_rejects_duplicates_and_bad_dims():
    p = _bank().prompts[0]
    with pytest.raises(ValueError, match="duplicate"):
        PromptBank([p, p.copy()], 16)
    with pytest.raises(ValueError, match="dimension"):
        PromptBank([p], 8)


def test_match_selects_planted_key():
    bank = _bank()
    target = 7
    e = bank.prompts[target].key_vec.data * 3.0
    assert match(bank, e) is bank.prompts[target]


def test_match_ties_go_to_lowest_index():
    d = 4
    prompts = [Prompt(t, Tensor(np.array([1.0, 0, 0, 0])), Tensor(np.zeros(d))) for t in GRID[:3]]
    bank = PromptBank(prompts, d)
    assert match_indices(bank, np.array([2.0, 0, 0, 0]))[0] == 0


def test_match_zero_embedding_rejected():
    with pytest.raises(ValueError):
        match_indices(_bank(), np.zeros(16))


@pytest.mark.parametrize("scale", [1e-3, 1.0, 1e3])
def test_match_invariant_under_positive_scaling(scale):
    bank = _bank(1)
    e = np.random.default_rng(2).normal(size=(200, 16))
    np.testing.assert_array_equal(match_indices(bank, e), match_indices(bank, e * scale))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-6, 1e6))
def test_match_scale_invariance_property(seed, scale):
    bank = _bank(seed % 7)
    e = np.random.default_rng(seed).normal(size=(5, 16))
    np.testing.assert_array_equal(match_indices(bank, e), match_indices(bank, e * scale))


def test_cosine_bounds():
    assert cosine([1, 0], [2, 0]) == pytest.approx(1.0)
    assert cosine([1, 0], [-1, 0]) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        cosine([0, 0], [1, 0])


def test_copy_and_extended_leave_original_untouched():
    bank = _bank()
    before = bank.key_matrix().copy()
    other = bank.copy()
    other.prompts[0].key_vec.data += 1.0
    np.testing.assert_array_equal(bank.key_matrix(), before)
    new = Prompt(TaskDescriptor(0.25, 12.0, "NLoS"), Tensor(np.ones(16)), Tensor(np.ones(16)))
    ext = bank.extended(new)
    assert len(ext) == len(bank) + 1 and len(bank) == 12
    assert TaskDescriptor(0.25, 12.0, "NLoS") not in bank


def test_json_roundtrip(tmp_path):
    bank = _bank(3)
    path = tmp_path / "bank.json"
    bank.export_json(path)
    back = PromptBank.from_json(json.loads(path.read_text()))
    assert back.tasks == bank.tasks
    np.testing.assert_array_equal(back.key_matrix(), bank.key_matrix())
    with pytest.raises(ValueError):
        PromptBank.from_json({"version": 99})


def test_init_bank_values_finite_and_seeded():
    a, b = _bank(5), _bank(5)
    np.testing.assert_array_equal(a.key_matrix(), b.key_matrix())
    assert all(np.isfinite(p.value.data).all() for p in a)


def test_patch_features_shape_and_range():
    psi = np.random.default_rng(0).random((3, 16, 16))
    f = psi_patch_features(psi, 4)
    assert f.shape == (3, 48)
    assert (f[:, 16:] <= 0.5).all() and (f >= 0).all()


def test_patch_features_constant_input_has_zero_differences():
    f = psi_patch_features(np.full((1, 8, 8), 0.3), 4)
    np.testing.assert_allclose(f[0, :4], 0.3)
    np.testing.assert_array_equal(f[0, 4:], 0.0)


def test_binomial_ci_covers_half_at_chance():
    lo, hi = binomial_ci(505, 1000)
    assert lo < 0.5 < hi
    assert binomial_ci(0, 0) == (0.0, 1.0)
