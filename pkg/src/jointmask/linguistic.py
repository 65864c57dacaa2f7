"""Phoneme inventories, cross-lingual vocabulary and alignments."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .features import FeatureConfig


class VocabError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class PhonemeVocab:
    """Closed phoneme inventory.

    Phonemes occupy ids ``0..n-1``; ``pad_id`` and ``mask_id`` follow, so
    the embedding table size is ``len(vocab) + 2``.
    """

    symbols: tuple[str, ...]
    languages: tuple[frozenset, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.symbols) != len(self.languages):
            raise VocabError("symbols and languages differ in length")
        index = {}
        for i, s in enumerate(self.symbols):
            if s in index:
                raise VocabError(f"duplicate symbol {s!r}")
            index[s] = i
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_inventory(cls, symbols: Iterable[str], language: str) -> "PhonemeVocab":
        symbols = tuple(symbols)
        return cls(symbols, tuple(frozenset([language]) for _ in symbols))

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, symbol):
        return symbol in self._index

    @property
    def pad_id(self) -> int:
        return len(self.symbols)

    @property
    def mask_id(self) -> int:
        return len(self.symbols) + 1

    @property
    def size(self) -> int:
        """Embedding-table rows including the two special ids."""
        return len(self.symbols) + 2

    def id_of(self, symbol: str) -> int:
        return self._index[symbol]

    def languages_of(self, symbol: str) -> frozenset:
        return self.languages[self._index[symbol]]

    def to_text(self) -> str:
        return "".join(
            f"{s}\t{','.join(sorted(langs))}\n" for s, langs in zip(self.symbols, self.languages)
        )

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PhonemeVocab":
        symbols, languages = [], []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) > 2:
                raise VocabError(f"{path}:{lineno}: expected 'symbol<TAB>lang,lang'")
            tags = parts[1].split(",") if len(parts) == 2 else []
            symbols.append(parts[0].strip())
            languages.append(frozenset(t.strip() for t in tags if t.strip()))
        return cls(tuple(symbols), tuple(languages))


def merge_vocabs(a: PhonemeVocab, b: PhonemeVocab) -> PhonemeVocab:
    """Union by symbol: a's order first, then b's novel symbols."""
    symbols = list(a.symbols)
    languages = list(a.languages)
    for sym, langs in zip(b.symbols, b.languages):
        if sym in a:
            i = a.id_of(sym)
            languages[i] = languages[i] | langs
        else:
            symbols.append(sym)
            languages.append(langs)
    return PhonemeVocab(tuple(symbols), tuple(languages))


@dataclass(frozen=True)
class PhonemeSeq:
    ids: tuple[int, ...]
    language: str = ""

    def __len__(self):
        return len(self.ids)


def encode_phonemes(symbols: Sequence[str], vocab: PhonemeVocab, language: str = "") -> PhonemeSeq:
    ids = []
    for pos, sym in enumerate(symbols):
        if sym not in vocab:
            raise VocabError(f"unknown phoneme {sym!r} at position {pos}")
        ids.append(vocab.id_of(sym))
    return PhonemeSeq(tuple(ids), language)


def decode_phonemes(seq: PhonemeSeq, vocab: PhonemeVocab) -> list[str]:
    return [vocab.symbols[i] for i in seq.ids]


@dataclass(frozen=True)
class Alignment:
    """Per-phoneme frame spans ``(phoneme_index, start, end)`` partitioning the utterance."""

    spans: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        pos = 0
        for k, (idx, start, end) in enumerate(self.spans):
            if idx != k:
                raise AlignmentError(f"span {k} has phoneme index {idx}")
            if start != pos:
                raise AlignmentError(f"span {k} starts at {start}, expected {pos}")
            if end <= start:
                raise AlignmentError(f"span {k} is empty ({start}, {end})")
            pos = end

    @classmethod
    def from_lengths(cls, lengths: Iterable[int]) -> "Alignment":
        spans, pos = [], 0
        for k, n in enumerate(lengths):
            spans.append((k, pos, pos + int(n)))
            pos += int(n)
        return cls(tuple(spans))

    @property
    def num_frames(self) -> int:
        return self.spans[-1][2] if self.spans else 0

    @property
    def num_phonemes(self) -> int:
        return len(self.spans)

    def lengths(self) -> list[int]:
        return [end - start for _, start, end in self.spans]

    def frame_to_phoneme(self):
        """Phoneme index for every frame."""
        return np.repeat(np.arange(len(self.spans)), self.lengths())

    def durations(self, cfg: FeatureConfig) -> list[float]:
        return [n / cfg.frames_per_second for n in self.lengths()]


def _to_frame(t: float, cfg: FeatureConfig) -> int:
    return math.floor(t * cfg.sample_rate / cfg.hop_samples + 0.5)


def parse_alignment_file(path, num_frames: int, seq: PhonemeSeq, vocab: PhonemeVocab,
                         cfg: FeatureConfig = FeatureConfig()) -> Alignment:
    """Read a ``symbol<TAB>start_sec<TAB>end_sec`` file into a frame partition.

    Each start is snapped to the previous span's end and the last span is
    stretched or clamped to ``num_frames``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh, delimiter="\t") if r and any(c.strip() for c in r)]
    if len(rows) != len(seq):
        raise AlignmentError(f"{path}: {len(rows)} rows but sequence has {len(seq)} phonemes")

    spans = []
    prev_start = prev_end = -math.inf
    pos = 0
    for k, row in enumerate(rows):
        rowno = k + 1
        if len(row) != 3:
            raise AlignmentError(f"{path}: row {rowno} must have 3 columns")
        sym = row[0].strip()
        try:
            t0, t1 = float(row[1]), float(row[2])
        except ValueError as exc:
            raise AlignmentError(f"{path}: row {rowno} has non-numeric times") from exc
        expected = vocab.symbols[seq.ids[k]]
        if sym != expected:
            raise AlignmentError(f"{path}: row {rowno} symbol {sym!r} does not match {expected!r}")
        if t1 < t0 or t0 < prev_start or t1 < prev_end:
            raise AlignmentError(f"{path}: non-monotonic times at row {rowno}")
        prev_start, prev_end = t0, t1
        end = num_frames if k == len(rows) - 1 else _to_frame(t1, cfg)
        if end <= pos:
            raise AlignmentError(f"{path}: row {rowno} ({sym}) is empty after snapping")
        spans.append((k, pos, end))
        pos = end
    return Alignment(tuple(spans))


def write_alignment_file(path, alignment: Alignment, symbols: Sequence[str],
                         cfg: FeatureConfig = FeatureConfig()) -> None:
    fps = cfg.frames_per_second
    with open(path, "w", encoding="utf-8") as fh:
        for (_, start, end), sym in zip(alignment.spans, symbols):
            fh.write(f"{sym}\t{start / fps:.6f}\t{end / fps:.6f}\n")


def uniform_alignment(num_frames: int, num_phonemes: int) -> Alignment:
    """Spread frames evenly; the first ``num_frames % num_phonemes`` spans get one extra."""
    if num_phonemes < 1:
        raise AlignmentError("need at least one phoneme")
    if num_frames < num_phonemes:
        raise AlignmentError(f"fewer frames ({num_frames}) than phonemes ({num_phonemes})")
    base, extra = divmod(num_frames, num_phonemes)
    return Alignment.from_lengths(base + (k < extra) for k in range(num_phonemes))
