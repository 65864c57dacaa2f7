"""
Log-mel features and joint speech/text masks
============================================

Render a synthetic utterance, turn it into normalized log-mel frames and
draw the two masks used in pretraining.
"""

import numpy as np

from jointmask import features, masking
from jointmask.linguistic import encode_phonemes, merge_vocabs
from jointmask.synthetic import make_inventories, make_speakers, make_utterance

rng = np.random.default_rng(0)
zh, en = make_inventories()
vocab = merge_vocabs(zh, en)
print(f"{len(zh)} + {len(en)} symbols, {len(vocab)} after merging, table size {vocab.size}")

# Two seconds of harmonic "speech" whose formants follow the phoneme sequence
utt = make_utterance("zh_demo", zh, make_speakers("zh", 1, rng)[0], rng, seconds=2.0)
spec = features.compute_log_mel(utt.audio)
print("frames x mels:", spec.frames.shape, "phonemes:", len(utt.symbols))

# 80% of the phonemes lose their frames; half of the rest lose their symbol
plan = masking.plan_masks(utt.alignment, len(utt.symbols), lam=0.8, seed=1)
print(plan.to_json())

text = encode_phonemes(utt.symbols, vocab)
pair = masking.apply_masks(spec, text, plan, vocab.mask_id)
print("masked frames:", int(pair.frame_mask.sum()), "of", spec.num_frames)
print("masked ids:", pair.masked_ids.tolist())

# Unmasked frames pass through untouched
keep = ~pair.frame_mask
assert np.array_equal(pair.masked_spec[keep], spec.frames[keep])

# A quick listen: Griffin-Lim on the original frames
wav = features.invert_mel_preview(spec, iterations=30)
print("preview samples:", len(wav.samples), "peak", float(np.abs(wav.samples).max()))
