"""Non-overlapping speech-span / text-phoneme masking."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .features import LogMelSpectrogram
from .linguistic import Alignment, PhonemeSeq


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class MaskPlan:
    speech_phonemes: frozenset
    speech_frame_ranges: tuple[tuple[int, int], ...]
    text_phonemes: frozenset
    lam: float = 0.8
    seed: int | None = None

    @classmethod
    def empty(cls, lam: float = 0.0, seed: int | None = None) -> "MaskPlan":
        return cls(frozenset(), (), frozenset(), lam, seed)

    @classmethod
    def from_speech_phonemes(cls, phonemes, alignment: Alignment, text_phonemes=(),
                             lam: float = 0.0, seed: int | None = None) -> "MaskPlan":
        speech = frozenset(int(p) for p in phonemes)
        text = frozenset(int(p) for p in text_phonemes)
        if speech & text:
            raise MaskError("speech and text mask sets overlap")
        return cls(speech, frame_ranges(speech, alignment), text, lam, seed)

    @property
    def num_masked_frames(self) -> int:
        return sum(e - s for s, e in self.speech_frame_ranges)

    def frame_mask(self, num_frames: int) -> np.ndarray:
        mask = np.zeros(num_frames, dtype=bool)
        for s, e in self.speech_frame_ranges:
            mask[s:e] = True
        return mask

    def text_mask(self, num_phonemes: int) -> np.ndarray:
        mask = np.zeros(num_phonemes, dtype=bool)
        mask[sorted(self.text_phonemes)] = True
        return mask

    def to_json(self) -> str:
        return json.dumps({
            "lambda": self.lam,
            "seed": self.seed,
            "speech_phonemes": sorted(self.speech_phonemes),
            "text_phonemes": sorted(self.text_phonemes),
            "speech_frame_ranges": [list(r) for r in self.speech_frame_ranges],
        })


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def mask_counts(num_phonemes: int, lam: float) -> tuple[int, int]:
    """Number of speech-masked and text-masked phonemes for ``P`` phonemes."""
    n_speech = min(num_phonemes, round_half_up(lam * num_phonemes))
    return n_speech, (num_phonemes - n_speech) // 2


def frame_ranges(phonemes, alignment: Alignment) -> tuple[tuple[int, int], ...]:
    """Merge the aligned spans of ``phonemes`` into maximal frame intervals."""
    ranges = []
    for p in sorted(phonemes):
        _, start, end = alignment.spans[p]
        if ranges and ranges[-1][1] == start:
            ranges[-1][1] = end
        else:
            ranges.append([start, end])
    return tuple((s, e) for s, e in ranges)


def _span_lengths(rng, total: int, mean_span: int) -> list[int]:
    lengths = []
    remaining = total
    while remaining > 0:
        n = int(rng.integers(1, 2 * mean_span))
        n = min(n, remaining)
        lengths.append(n)
        remaining -= n
    return lengths


def _place_spans(rng, lengths: list[int], num_phonemes: int) -> list[int]:
    """Scatter spans over ``num_phonemes`` positions with gaps between them."""
    free = num_phonemes - sum(lengths)
    # interior gaps need one unmasked phoneme each; merge spans when short
    while len(lengths) - 1 > free:
        i = int(rng.integers(0, len(lengths) - 1))
        lengths[i:i + 2] = [lengths[i] + lengths[i + 1]]
    k = len(lengths)
    extra = free - max(k - 1, 0)
    # stars and bars: distribute the leftover unmasked phonemes over k+1 gaps
    cuts = np.sort(rng.choice(extra + k, size=k, replace=False)) if k else np.array([], int)
    gaps = np.diff(np.concatenate([[-1], cuts, [extra + k]])) - 1
    masked = []
    pos = 0
    for i, n in enumerate(lengths):
        pos += int(gaps[i]) + (1 if i > 0 else 0)
        masked.extend(range(pos, pos + n))
        pos += n
    return masked


def plan_masks(alignment: Alignment, num_phonemes: int, lam: float = 0.8, mean_span: int = 3,
               seed: int = 0, text_masking: bool = True) -> MaskPlan:
    """Draw a non-overlapping speech/text mask plan.

    Exactly ``round(lam * P)`` phonemes are covered by contiguous spans
    whose lengths are uniform on ``[1, 2 * mean_span - 1]``; their frames
    are speech-masked. Half of the remaining phonemes (rounded down) are
    then text-masked, unless ``text_masking`` is off.
    """
    if not 0.0 <= lam <= 1.0:
        raise MaskError(f"lambda must lie in [0, 1], got {lam}")
    if num_phonemes < 1:
        raise MaskError("num_phonemes must be >= 1")
    if mean_span < 1:
        raise MaskError("mean_span must be >= 1")
    if alignment.num_phonemes != num_phonemes:
        raise MaskError(
            f"alignment covers {alignment.num_phonemes} phonemes, expected {num_phonemes}"
        )
    rng = np.random.default_rng(seed)
    n_speech, n_text = mask_counts(num_phonemes, lam)
    speech = _place_spans(rng, _span_lengths(rng, n_speech, mean_span), num_phonemes)
    text = []
    if text_masking and n_text:
        rest = np.setdiff1d(np.arange(num_phonemes), speech)
        text = rng.choice(rest, size=n_text, replace=False).tolist()
    return MaskPlan.from_speech_phonemes(speech, alignment, text, lam, seed)


@dataclass(frozen=True)
class MaskedPair:
    """Spectrogram and phoneme ids after masking.

    Masked frames are zeroed and flagged in ``frame_mask``; masked
    phonemes carry ``mask_id``. The originals are kept for loss targets.
    """

    masked_spec: np.ndarray
    frame_mask: np.ndarray
    masked_ids: np.ndarray
    text_mask: np.ndarray
    plan: MaskPlan
    spec: np.ndarray
    ids: np.ndarray = field(repr=False)


def apply_masks(spec, text: PhonemeSeq, plan: MaskPlan, mask_id: int) -> MaskedPair:
    frames = spec.frames if isinstance(spec, LogMelSpectrogram) else np.asarray(spec)
    num_frames, num_phonemes = len(frames), len(text)
    if plan.speech_frame_ranges and plan.speech_frame_ranges[-1][1] > num_frames:
        raise MaskError(
            f"plan masks up to frame {plan.speech_frame_ranges[-1][1]} but spectrogram has {num_frames}"
        )
    if (plan.speech_phonemes | plan.text_phonemes) and \
            max(plan.speech_phonemes | plan.text_phonemes) >= num_phonemes:
        raise MaskError(f"plan references phonemes beyond the {num_phonemes} in the text")
    fmask = plan.frame_mask(num_frames)
    tmask = plan.text_mask(num_phonemes)
    ids = np.asarray(text.ids, dtype=np.int64)
    masked = frames.copy()
    masked[fmask] = 0.0
    masked_ids = ids.copy()
    masked_ids[tmask] = mask_id
    return MaskedPair(masked, fmask, masked_ids, tmask, plan, frames, ids)
