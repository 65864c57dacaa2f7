"""
Voice cloning, speech editing and the phoneme map
=================================================

Continue from a short pretraining run: append a target-language sentence
to a prompt, replace a phoneme in place, and compare the learned phoneme
embeddings across the two languages.
"""

from pathlib import Path

import numpy as np

from jointmask import (
    CloneRequest,
    EditRequest,
    ModelConfig,
    PhonemeSeq,
    TrainConfig,
    clone_voice,
    edit_speech,
    export_plot_data,
    phoneme_similarity,
    run_pretraining,
    train_duration_model,
)
from jointmask.features import LogMelSpectrogram
from jointmask.synthetic import featurize_corpus, make_corpus

out_dir = Path("demo_out")
out_dir.mkdir(exist_ok=True)

vocab, synth = make_corpus(n_per_lang=3, seed=1, seconds=1.5)
stats, utts = featurize_corpus(synth, vocab)
corpus = {}
for u in utts:
    corpus.setdefault(u.lang, []).append(u)
ckpt = run_pretraining(TrainConfig(warmup_steps=400, max_steps=600, batch_bins=800),
                       ModelConfig.micro(vocab.size), corpus, vocab, stats)
dur = train_duration_model(utts, vocab, steps=300)

zh_utt = corpus["zh"][0]
en_utt = corpus["en"][0]
prompt = LogMelSpectrogram(zh_utt.frames * stats.std + stats.mean)

# Cross-lingual cloning: Mandarin-style prompt, English-style target text
clone = clone_voice(CloneRequest(prompt, zh_utt.text, zh_utt.alignment, PhonemeSeq(en_utt.text.ids[:6])),
                    ckpt, dur)
print("clone:", clone.report()["output_frames"], "frames, new region", clone.masked_ranges)

# Replace the third phoneme with two phonemes from the other language
edit = edit_speech(EditRequest(prompt, zh_utt.text, zh_utt.alignment, "replace", (2, 3),
                               PhonemeSeq(en_utt.text.ids[:2])), ckpt, dur)
start = zh_utt.alignment.spans[2][1]
assert np.array_equal(edit.spec.frames[:start], prompt.frames[:start])
print("edit:", prompt.num_frames, "->", edit.spec.num_frames, "frames, regenerated", edit.masked_ranges)

# Which English phoneme sits closest to each Mandarin one?
rows = [s for s in vocab.symbols if "zh" in vocab.languages_of(s)]
cols = [s for s in vocab.symbols if "en" in vocab.languages_of(s)]
matrix = phoneme_similarity(ckpt, rows, cols)
export_plot_data(matrix, out_dir / "phoneme_map.csv", out_dir / "phoneme_map.png")
export_plot_data(edit.spec, out_dir / "edit_spec.csv", out_dir / "edit_spec.png")
for r, c in list(matrix.nearest.items())[:5]:
    print(f"{r} ~ {c}")
