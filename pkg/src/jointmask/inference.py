"""Prompt-based voice cloning, mask-and-infill speech editing, and the duration predictor."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .features import FeatureConfig, LogMelSpectrogram
from .linguistic import Alignment, PhonemeSeq, PhonemeVocab
from .masking import MaskedPair, MaskPlan, apply_masks
from .model import collate
from .pipeline import Checkpoint, Utterance


class InferenceError(ValueError):
    pass


# ---------------------------------------------------------- duration model


class DurationModel(nn.Module):
    """Phoneme embedding, two 1-D convolutions and a linear head predicting log-seconds."""

    def __init__(self, vocab: PhonemeVocab, dim: int = 64, kernel: int = 3):
        super().__init__()
        self.vocab = vocab
        self.dim, self.kernel = dim, kernel
        self.embedding = nn.Embedding(vocab.size, dim)
        self.conv1 = nn.Conv1d(dim, dim, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(dim, dim, kernel, padding=kernel // 2)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, 1)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        x = self.embedding(ids)
        x = self.norm1(F.relu(self.conv1(x.transpose(1, 2)).transpose(1, 2)))
        x = self.norm2(F.relu(self.conv2(x.transpose(1, 2)).transpose(1, 2)))
        return self.head(x).squeeze(-1)

    def save(self, path) -> None:
        path = Path(path)
        torch.save(self.state_dict(), path)
        meta = {
            "dim": self.dim,
            "kernel": self.kernel,
            "vocab_hash": self.vocab.hash,
            "vocab": [[s, sorted(l)] for s, l in zip(self.vocab.symbols, self.vocab.languages)],
        }
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> "DurationModel":
        meta = json.loads(Path(str(path) + ".json").read_text())
        vocab = PhonemeVocab(tuple(s for s, _ in meta["vocab"]),
                             tuple(frozenset(l) for _, l in meta["vocab"]))
        model = cls(vocab, meta["dim"], meta["kernel"])
        model.load_state_dict(torch.load(path, weights_only=True))
        return model.eval()


def train_duration_model(utts: Sequence[Utterance], vocab: PhonemeVocab,
                         cfg: FeatureConfig = FeatureConfig(), steps: int = 500,
                         lr: float = 3e-3, seed: int = 0, dim: int = 64) -> DurationModel:
    """Fit log-durations taken from the alignments with a mean squared error."""
    torch.manual_seed(seed)
    model = DurationModel(vocab, dim)
    X = max(len(u.text) for u in utts)
    ids = torch.full((len(utts), X), vocab.pad_id, dtype=torch.long)
    target = torch.zeros(len(utts), X)
    valid = torch.zeros(len(utts), X, dtype=torch.bool)
    for b, u in enumerate(utts):
        n = len(u.text)
        ids[b, :n] = torch.tensor(u.text.ids)
        target[b, :n] = torch.log(torch.tensor(u.alignment.durations(cfg), dtype=torch.float32))
        valid[b, :n] = True
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for _ in range(steps):
        pred = model(ids)
        loss = ((pred - target) ** 2)[valid].mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model.eval()


def predict_durations(phonemes: PhonemeSeq, model: DurationModel) -> np.ndarray:
    """Per-phoneme durations in seconds, all strictly positive."""
    if len(phonemes) == 0:
        raise InferenceError("cannot predict durations for an empty phoneme sequence")
    ids = np.asarray(phonemes.ids)
    if ids.min() < 0 or ids.max() >= len(model.vocab):
        raise InferenceError(f"phoneme id out of range for a {len(model.vocab)}-symbol vocabulary")
    with torch.no_grad():
        log_d = model(torch.as_tensor(ids, dtype=torch.long)[None])[0]
    return np.exp(log_d.double().numpy())


def durations_to_frames(durations: Sequence[float], cfg: FeatureConfig = FeatureConfig()) -> list[int]:
    """``max(1, round(d * sample_rate / hop_samples))`` per phoneme, rounding half up exactly."""
    out = []
    for d in durations:
        if not d > 0:
            raise InferenceError(f"durations must be positive, got {d}")
        num, den = float(d).as_integer_ratio()
        num *= cfg.sample_rate
        den *= cfg.hop_samples
        out.append(max(1, (2 * num + den) // (2 * den)))
    return out


class OracleDurations(DurationModel):
    """Fixed per-phoneme durations; handy for tests and controlled edits."""

    def __init__(self, vocab: PhonemeVocab, seconds):
        super().__init__(vocab, dim=2)
        self.seconds = seconds

    def forward(self, ids):
        if callable(self.seconds):
            vals = [[math.log(self.seconds(int(i))) for i in row] for row in ids]
        else:
            vals = [[math.log(self.seconds)] * ids.shape[1]] * ids.shape[0]
        return torch.tensor(vals, dtype=torch.float64)


def _bridge_ids(ids, vocab: PhonemeVocab, dur: DurationModel) -> PhonemeSeq:
    if dur.vocab.hash == vocab.hash:
        return PhonemeSeq(tuple(ids))
    try:
        return PhonemeSeq(tuple(dur.vocab.id_of(vocab.symbols[i]) for i in ids))
    except KeyError as exc:
        raise InferenceError(f"duration model does not know phoneme {exc.args[0]!r}") from exc


# ------------------------------------------------------------------- infill


def _infill(ckpt: Checkpoint, frames: np.ndarray, frame_mask: np.ndarray, ids, text_mask,
            alignment: Alignment) -> np.ndarray:
    """Normalized frames in, model's refined prediction (normalized) out."""
    ids = np.asarray(ids, dtype=np.int64)
    masked = frames.copy()
    masked[frame_mask] = 0.0
    masked_ids = ids.copy()
    masked_ids[text_mask] = ckpt.vocab.mask_id
    pair = MaskedPair(masked, frame_mask, masked_ids, text_mask, None, frames, ids)
    model = ckpt.model
    was_training = model.training
    model.eval()
    try:
        params = list(model.parameters())
        dtype = params[0].dtype if params else torch.float32
        with torch.no_grad():
            out = model(collate([(pair, alignment)], ckpt.vocab.pad_id).to(dtype))
    finally:
        model.train(was_training)
    return out.refined[0, : len(frames)].double().numpy()


def _normalize(frames, ckpt):
    return (frames - ckpt.stats.mean) / ckpt.stats.std


def _denormalize(frames, ckpt):
    return frames * ckpt.stats.std + ckpt.stats.mean


def _splice(original: np.ndarray, predicted: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = original.copy()
    out[mask] = predicted[mask]
    return out


def _ranges(mask: np.ndarray) -> list[tuple[int, int]]:
    edges = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))


@dataclass
class SynthesisResult:
    spec: LogMelSpectrogram
    masked_ranges: list
    durations: list
    text: PhonemeSeq
    alignment: Alignment

    def report(self) -> dict:
        return {
            "output_frames": self.spec.num_frames,
            "masked_ranges": [list(r) for r in self.masked_ranges],
            "durations": [float(d) for d in self.durations],
        }


def reconstruct_masked(spec: LogMelSpectrogram, text: PhonemeSeq, alignment: Alignment,
                       plan: MaskPlan, ckpt: Checkpoint) -> LogMelSpectrogram:
    """Original frames where unmasked, the model's refined prediction where masked."""
    if alignment.num_frames != spec.num_frames or alignment.num_phonemes != len(text):
        raise InferenceError("alignment does not match the spectrogram and text")
    norm = _normalize(spec.frames, ckpt)
    pair = apply_masks(norm, text, plan, ckpt.vocab.mask_id)
    if not pair.frame_mask.any():
        return LogMelSpectrogram(spec.frames.copy(), spec.config)
    pred = _infill(ckpt, norm, pair.frame_mask, text.ids, pair.text_mask, alignment)
    return LogMelSpectrogram(_splice(spec.frames, _denormalize(pred, ckpt), pair.frame_mask),
                             spec.config)


# ------------------------------------------------------------------- cloning


@dataclass
class CloneRequest:
    prompt_spec: LogMelSpectrogram
    prompt_text: PhonemeSeq
    prompt_alignment: Alignment
    target_text: PhonemeSeq
    vocab_hash: str | None = None


def clone_voice(req: CloneRequest, ckpt: Checkpoint, dur: DurationModel) -> SynthesisResult:
    """Append mask frames for the target text after the prompt and reconstruct them."""
    if req.vocab_hash is not None and req.vocab_hash != ckpt.vocab.hash:
        raise InferenceError("vocabulary hash of the request does not match the checkpoint")
    if len(req.target_text) == 0:
        raise InferenceError("target phoneme sequence is empty; nothing to synthesize")
    if req.prompt_alignment.num_frames != req.prompt_spec.num_frames or \
            req.prompt_alignment.num_phonemes != len(req.prompt_text):
        raise InferenceError("prompt alignment does not partition the prompt")
    cfg = ckpt.feature_cfg
    durations = predict_durations(_bridge_ids(req.target_text.ids, ckpt.vocab, dur), dur)
    counts = durations_to_frames(durations, cfg)
    n_new = sum(counts)
    prompt = req.prompt_spec.frames
    P = len(prompt)

    frames = np.concatenate([_normalize(prompt, ckpt), np.zeros((n_new, prompt.shape[1]))])
    mask = np.zeros(P + n_new, bool)
    mask[P:] = True
    ids = tuple(req.prompt_text.ids) + tuple(req.target_text.ids)
    aln = Alignment.from_lengths(req.prompt_alignment.lengths() + counts)
    pred = _infill(ckpt, frames, mask, ids, np.zeros(len(ids), bool), aln)
    out = np.concatenate([prompt, _denormalize(pred[P:], ckpt)])
    return SynthesisResult(LogMelSpectrogram(out, req.prompt_spec.config), [(P, P + n_new)],
                           durations.tolist(), PhonemeSeq(ids, req.target_text.language), aln)


# ------------------------------------------------------------------- editing


@dataclass
class EditRequest:
    spec: LogMelSpectrogram
    text: PhonemeSeq
    alignment: Alignment
    op: str
    span: tuple[int, int]
    new_text: PhonemeSeq = field(default_factory=lambda: PhonemeSeq(()))

    def validate(self):
        i, j = self.span
        P = len(self.text)
        if self.op not in ("insert", "delete", "replace"):
            raise InferenceError(f"unknown edit operation {self.op!r}")
        if not 0 <= i <= j <= P:
            raise InferenceError(f"span [{i}, {j}) out of range for {P} phonemes")
        if self.alignment.num_phonemes != P or self.alignment.num_frames != self.spec.num_frames:
            raise InferenceError("alignment does not match the spectrogram and text")
        if self.op == "insert":
            if i != j:
                raise InferenceError("insert requires an empty span (i == j)")
            if not len(self.new_text):
                raise InferenceError("insert requires new phonemes")
        elif self.op == "delete":
            if len(self.new_text):
                raise InferenceError("delete takes no new phonemes")
            if i == j:
                raise InferenceError("delete requires a nonempty span")
            if j - i == P:
                raise InferenceError("cannot delete every phoneme")
        else:
            if i == j:
                raise InferenceError("replace requires a nonempty span")
            if not len(self.new_text):
                raise InferenceError("replace requires new phonemes")


def edit_speech(req: EditRequest, ckpt: Checkpoint, dur: DurationModel,
                boundary_smooth_frames: int = 0) -> SynthesisResult:
    """Insert, delete or replace phonemes by splicing the spectrogram and infilling.

    The aligned frames of ``span`` are cut out; for insert and replace,
    mask frames sized by the duration predictor take their place and are
    reconstructed. Frames outside the edited region are copied unchanged.
    """
    req.validate()
    i, j = req.span
    orig = req.spec.frames
    lens = req.alignment.lengths()
    start = req.alignment.spans[i][1] if i < len(lens) else len(orig)
    end = req.alignment.spans[j - 1][2] if j > i else start
    ids = tuple(req.text.ids[:i]) + tuple(req.new_text.ids) + tuple(req.text.ids[j:])
    n_mels = orig.shape[1]

    if req.op == "delete":
        durations, counts = [], []
        raw = np.concatenate([orig[:start], orig[end:]])
        mask = np.zeros(len(raw), bool)
        k = boundary_smooth_frames
        if k > 0:
            mask[max(0, start - k): min(len(raw), start + k)] = True
    else:
        durations = predict_durations(_bridge_ids(req.new_text.ids, ckpt.vocab, dur), dur).tolist()
        counts = durations_to_frames(durations, ckpt.feature_cfg)
        raw = np.concatenate([orig[:start], np.zeros((sum(counts), n_mels)), orig[end:]])
        mask = np.zeros(len(raw), bool)
        mask[start:start + sum(counts)] = True

    aln = Alignment.from_lengths(lens[:i] + counts + lens[j:])
    if mask.any():
        pred = _infill(ckpt, _normalize(raw, ckpt), mask, ids, np.zeros(len(ids), bool), aln)
        raw = _splice(raw, _denormalize(pred, ckpt), mask)
    return SynthesisResult(LogMelSpectrogram(raw, req.spec.config), _ranges(mask), durations,
                           PhonemeSeq(ids, req.text.language), aln)
