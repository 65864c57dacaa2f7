"""Synthetic bilingual speech corpus for tests and demos.

Each phoneme owns a set of formant frequencies; a speaker owns a pitch and
a formant scale. Utterances are rendered as harmonic waveforms whose
spectral envelope follows the phoneme sequence, so the exact alignment is
known by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import AudioClip, FeatureConfig, compute_log_mel, compute_stats, save_audio
from .linguistic import (
    Alignment,
    PhonemeVocab,
    encode_phonemes,
    merge_vocabs,
    write_alignment_file,
)
from .pipeline import Utterance


@dataclass(frozen=True)
class Speaker:
    name: str
    lang: str
    f0: float
    formant_scale: float
    gain: float


@dataclass(frozen=True)
class SyntheticUtterance:
    id: str
    lang: str
    speaker: Speaker
    symbols: tuple[str, ...]
    alignment: Alignment
    audio: AudioClip


def make_inventories(n_a: int = 10, n_b: int = 10, n_shared: int = 2,
                     langs=("zh", "en")) -> tuple[PhonemeVocab, PhonemeVocab]:
    """Two inventories of sizes ``n_a`` and ``n_b`` sharing ``n_shared`` symbols."""
    shared = [f"x{i}" for i in range(n_shared)]
    a = shared + [f"{langs[0]}{i}" for i in range(n_a - n_shared)]
    b = [f"{langs[1]}{i}" for i in range(n_b - n_shared)] + shared
    return PhonemeVocab.from_inventory(a, langs[0]), PhonemeVocab.from_inventory(b, langs[1])


def phoneme_formants(symbol: str) -> np.ndarray:
    rng = np.random.default_rng(abs(hash_str(symbol)))
    return np.array([rng.uniform(250, 900), rng.uniform(900, 2400), rng.uniform(2400, 4500)])


def hash_str(s: str) -> int:
    h = 1469598103934665603
    for ch in s.encode():
        h = ((h ^ ch) * 1099511628211) % (1 << 63)
    return h


def make_speakers(lang: str, n: int, rng) -> list[Speaker]:
    return [
        Speaker(f"{lang}_spk{i}", lang, float(rng.uniform(90, 240)),
                float(rng.uniform(0.88, 1.15)), float(rng.uniform(0.25, 0.5)))
        for i in range(n)
    ]


def render(symbols, lengths, speaker: Speaker, cfg: FeatureConfig, rng, noise: float = 1e-3) -> np.ndarray:
    """Harmonic waveform with one spectral envelope per phoneme segment."""
    hop, sr = cfg.hop_samples, cfg.sample_rate
    n_samples = (sum(lengths) - 1) * hop
    t = np.arange(n_samples) / sr
    n_harm = int(min(6000, sr / 2 - 100) // speaker.f0)
    harm_freqs = speaker.f0 * np.arange(1, n_harm + 1)

    seg_amps = []
    for sym in symbols:
        formants = phoneme_formants(sym) * speaker.formant_scale
        env = sum(np.exp(-0.5 * ((harm_freqs - f) / (0.08 * f + 60)) ** 2) * w
                  for f, w in zip(formants, (1.0, 0.6, 0.3)))
        seg_amps.append(env + 0.01)
    seg_amps = np.array(seg_amps)
    seg_index = np.repeat(np.arange(len(symbols)), np.array(lengths) * hop)[:n_samples]
    amps = seg_amps[seg_index]
    # short crossfade between segments
    k = int(0.01 * sr)
    kernel = np.ones(k) / k
    amps = np.apply_along_axis(lambda a: np.convolve(a, kernel, mode="same"), 0, amps)
    vibrato = 1 + 0.01 * np.sin(2 * np.pi * 5 * t)
    phase = 2 * np.pi * np.cumsum(speaker.f0 * vibrato) / sr
    wav = np.einsum("th,th->t", amps, np.sin(phase[:, None] * np.arange(1, n_harm + 1)[None, :]))
    wav = wav / (np.abs(wav).max() + 1e-9) * speaker.gain
    wav += noise * rng.standard_normal(n_samples)
    return np.clip(wav, -1, 1)


def make_utterance(uid: str, inventory: PhonemeVocab, speaker: Speaker, rng,
                   seconds: float = 3.0, cfg: FeatureConfig = FeatureConfig(),
                   min_frames: int = 6, max_frames: int = 16, noise: float = 1e-3) -> SyntheticUtterance:
    target = int(seconds * cfg.frames_per_second)
    symbols, lengths = [], []
    while sum(lengths) < target:
        symbols.append(inventory.symbols[int(rng.integers(len(inventory)))])
        lengths.append(int(rng.integers(min_frames, max_frames + 1)))
    audio = AudioClip(render(symbols, lengths, speaker, cfg, rng, noise), cfg.sample_rate)
    return SyntheticUtterance(uid, speaker.lang, speaker, tuple(symbols),
                              Alignment.from_lengths(lengths), audio)


def make_corpus(n_per_lang: int = 10, seed: int = 0, seconds: float = 3.0,
                speakers_per_lang: int = 3, inventories=None,
                cfg: FeatureConfig = FeatureConfig()):
    """Bilingual corpus: returns ``(vocab, [SyntheticUtterance, ...])``."""
    rng = np.random.default_rng(seed)
    inv_a, inv_b = inventories or make_inventories()
    vocab = merge_vocabs(inv_a, inv_b)
    utts = []
    for inv in (inv_a, inv_b):
        lang = next(iter(inv.languages[0]))
        speakers = make_speakers(lang, speakers_per_lang, rng)
        for i in range(n_per_lang):
            spk = speakers[i % len(speakers)]
            utts.append(make_utterance(f"{lang}_{i:03d}", inv, spk, rng, seconds, cfg))
    return vocab, utts


def featurize_corpus(utts, vocab: PhonemeVocab, cfg: FeatureConfig = FeatureConfig(), stats=None):
    """Log-mel features normalized by corpus statistics: ``(stats, [Utterance])``."""
    specs = [compute_log_mel(u.audio, cfg) for u in utts]
    stats = stats or compute_stats(specs)
    out = []
    for u, spec in zip(utts, specs):
        assert spec.num_frames == u.alignment.num_frames
        frames = (spec.frames - stats.mean) / stats.std
        out.append(Utterance(u.id, u.lang, frames, encode_phonemes(u.symbols, vocab, u.lang),
                             u.alignment))
    return stats, out


def write_corpus(out_dir, vocab: PhonemeVocab, utts, cfg: FeatureConfig = FeatureConfig()) -> Path:
    """Write WAVs, alignment TSVs, the vocabulary file and a manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "align").mkdir(exist_ok=True)
    vocab.save(out / "vocab.txt")
    lines = []
    for u in utts:
        save_audio(out / "wav" / f"{u.id}.wav", u.audio)
        write_alignment_file(out / "align" / f"{u.id}.tsv", u.alignment, u.symbols, cfg)
        lines.append(json.dumps({
            "id": u.id, "audio": f"wav/{u.id}.wav", "lang": u.lang,
            "phonemes": list(u.symbols), "alignment": f"align/{u.id}.tsv",
        }))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
