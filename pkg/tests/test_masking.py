import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointmask.linguistic import Alignment, PhonemeSeq, uniform_alignment
from jointmask.masking import MaskError, MaskPlan, apply_masks, mask_counts, plan_masks


def random_alignment(rng, P):
    return Alignment.from_lengths(rng.integers(1, 6, P))


def test_paper_example_counts():
    plan = plan_masks(uniform_alignment(100, 10), 10, 0.8, seed=0)
    assert len(plan.speech_phonemes) == 8
    assert len(plan.text_phonemes) == 1
    assert not plan.speech_phonemes & plan.text_phonemes


def test_lambda_zero():
    plan = plan_masks(uniform_alignment(100, 10), 10, 0.0, seed=0)
    assert plan.speech_phonemes == frozenset()
    assert len(plan.text_phonemes) == 5
    assert plan.speech_frame_ranges == ()


def test_single_phoneme_full_mask():
    plan = plan_masks(uniform_alignment(7, 1), 1, 1.0, seed=0)
    assert plan.speech_phonemes == {0}
    assert plan.text_phonemes == frozenset()
    assert plan.speech_frame_ranges == ((0, 7),)


def test_determinism():
    aln = uniform_alignment(300, 40)
    assert plan_masks(aln, 40, 0.8, seed=9) == plan_masks(aln, 40, 0.8, seed=9)


def test_seeds_differ():
    aln = uniform_alignment(300, 40)
    plans = {plan_masks(aln, 40, 0.5, seed=s).speech_phonemes for s in range(20)}
    assert len(plans) > 15


@pytest.mark.parametrize("lam", [-0.1, 1.5])
def test_lambda_out_of_range(lam):
    with pytest.raises(MaskError):
        plan_masks(uniform_alignment(10, 5), 5, lam)


def test_alignment_mismatch():
    with pytest.raises(MaskError):
        plan_masks(uniform_alignment(10, 5), 6, 0.5)


def test_text_masking_off():
    plan = plan_masks(uniform_alignment(100, 20), 20, 0.5, seed=1, text_masking=False)
    assert plan.text_phonemes == frozenset()
    assert len(plan.speech_phonemes) == 10


def test_round_half_up():
    assert mask_counts(5, 0.5) == (3, 1)
    assert mask_counts(3, 0.5) == (2, 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 120), st.floats(0, 1), st.integers(0, 2**31), st.integers(1, 6))
def test_speech_runs_are_contiguous_and_ranges_match(P, lam, seed, mean_span):
    rng = np.random.default_rng(seed)
    aln = random_alignment(rng, P)
    plan = plan_masks(aln, P, lam, mean_span, seed)
    # ranges are the union of the masked phonemes' spans
    expected = np.zeros(aln.num_frames, bool)
    for p in plan.speech_phonemes:
        _, s, e = aln.spans[p]
        expected[s:e] = True
    assert np.array_equal(plan.frame_mask(aln.num_frames), expected)
    # ranges are maximal and disjoint
    r = plan.speech_frame_ranges
    assert all(r[k][1] < r[k + 1][0] for k in range(len(r) - 1))


def test_plan_json():
    plan = plan_masks(uniform_alignment(30, 6), 6, 0.5, seed=4)
    d = json.loads(plan.to_json())
    assert set(d) == {"lambda", "seed", "speech_phonemes", "text_phonemes", "speech_frame_ranges"}
    assert d["lambda"] == 0.5 and d["seed"] == 4


# ------------------------------------------------------------------ apply


def test_apply_empty_plan_is_identity():
    rng = np.random.default_rng(0)
    spec = rng.normal(size=(12, 80))
    text = PhonemeSeq((0, 1, 2))
    pair = apply_masks(spec, text, MaskPlan.empty(), mask_id=9)
    assert np.array_equal(pair.masked_spec, spec)
    assert pair.masked_ids.tolist() == [0, 1, 2]
    assert not pair.frame_mask.any() and not pair.text_mask.any()


def test_apply_first_phoneme():
    rng = np.random.default_rng(1)
    spec = rng.normal(size=(20, 4))
    aln = Alignment.from_lengths([8, 12])
    plan = MaskPlan.from_speech_phonemes([0], aln)
    pair = apply_masks(spec, PhonemeSeq((3, 4)), plan, mask_id=9)
    assert pair.frame_mask[:8].all() and not pair.frame_mask[8:].any()
    assert np.all(pair.masked_spec[:8] == 0)
    assert np.array_equal(pair.masked_spec[8:], spec[8:])


def test_apply_text_mask():
    aln = Alignment.from_lengths([2, 2, 2])
    plan = MaskPlan.from_speech_phonemes([0], aln, text_phonemes=[2])
    pair = apply_masks(np.ones((6, 3)), PhonemeSeq((5, 6, 7)), plan, mask_id=11)
    assert pair.masked_ids.tolist() == [5, 6, 11]


def test_apply_length_mismatch():
    aln = Alignment.from_lengths([5, 5])
    plan = MaskPlan.from_speech_phonemes([1], aln)
    with pytest.raises(MaskError):
        apply_masks(np.zeros((8, 3)), PhonemeSeq((0, 1)), plan, 9)


def test_overlapping_plan_rejected():
    aln = Alignment.from_lengths([1, 1])
    with pytest.raises(MaskError):
        MaskPlan.from_speech_phonemes([0], aln, text_phonemes=[0])


def test_apply_preserves_unmasked_randomized():
    rng = np.random.default_rng(5)
    for trial in range(200):
        P = int(rng.integers(1, 40))
        aln = random_alignment(rng, P)
        spec = rng.normal(size=(aln.num_frames, 8))
        ids = tuple(rng.integers(0, 20, P).tolist())
        plan = plan_masks(aln, P, float(rng.uniform()), seed=trial)
        pair = apply_masks(spec, PhonemeSeq(ids), plan, mask_id=21)
        for f in range(aln.num_frames):
            if pair.frame_mask[f]:
                assert np.all(pair.masked_spec[f] == 0)
            else:
                assert np.array_equal(pair.masked_spec[f], spec[f])
        for k in range(P):
            assert pair.masked_ids[k] == (21 if k in plan.text_phonemes else ids[k])
