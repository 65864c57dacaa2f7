"""Conformer masked reconstruction model over concatenated speech and text."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .linguistic import Alignment
from .masking import MaskedPair


@dataclass
class ModelConfig:
    vocab_size: int
    n_mels: int = 80
    d_model: int = 384
    n_layers: int = 8
    kernel_sizes: list = field(default_factory=list)
    n_heads: int = 2
    ffn_mult: int = 4
    postnet_layers: int = 5
    postnet_kernel: int = 5
    postnet_channels: int = 256
    dropout: float = 0.1
    max_phonemes: int = 512
    masked_only_speech_loss: bool = False

    def __post_init__(self):
        if not self.kernel_sizes:
            half = self.n_layers // 2
            self.kernel_sizes = [7] * half + [31] * (self.n_layers - half)
        if len(self.kernel_sizes) != self.n_layers:
            raise ValueError("kernel_sizes must have one entry per layer")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @classmethod
    def micro(cls, vocab_size: int, **overrides) -> "ModelConfig":
        base = dict(d_model=32, n_layers=2, n_heads=2, postnet_layers=2, postnet_channels=64)
        base.update(overrides)
        return cls(vocab_size=vocab_size, **base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ------------------------------------------------------------------- batches


@dataclass
class Batch:
    """Padded batch. ``*_mask`` flags masked positions, ``*_len`` true lengths."""

    speech: torch.Tensor        # (B, S, n_mels), masked frames zeroed
    speech_mask: torch.Tensor   # (B, S) bool
    speech_len: torch.Tensor    # (B,)
    frame_phone: torch.Tensor   # (B, S) aligned phoneme index per frame
    text: torch.Tensor          # (B, X) ids, masked ones replaced
    text_mask: torch.Tensor     # (B, X) bool
    text_len: torch.Tensor      # (B,)
    target_speech: torch.Tensor
    target_text: torch.Tensor

    def to(self, dtype=None, device=None) -> "Batch":
        kw = {}
        for name, value in self.__dict__.items():
            if value.is_floating_point():
                value = value.to(device=device, dtype=dtype)
            else:
                value = value.to(device=device)
            kw[name] = value
        return Batch(**kw)

    @property
    def speech_valid(self) -> torch.Tensor:
        return _length_mask(self.speech_len, self.speech.shape[1])

    @property
    def text_valid(self) -> torch.Tensor:
        return _length_mask(self.text_len, self.text.shape[1])


def _length_mask(lengths, size):
    return torch.arange(size, device=lengths.device)[None, :] < lengths[:, None]


def collate(items: Sequence[tuple[MaskedPair, Alignment]], pad_id: int = 0) -> Batch:
    """Pad ``(MaskedPair, Alignment)`` items into a :class:`Batch`."""
    for pair, aln in items:
        if aln.num_frames != len(pair.spec) or aln.num_phonemes != len(pair.ids):
            raise ValueError(
                f"alignment ({aln.num_frames} frames, {aln.num_phonemes} phonemes) does not match "
                f"inputs ({len(pair.spec)} frames, {len(pair.ids)} phonemes)"
            )
    B = len(items)
    S = max(len(p.spec) for p, _ in items)
    X = max(len(p.ids) for p, _ in items)
    n_mels = items[0][0].spec.shape[1]
    speech = np.zeros((B, S, n_mels))
    target = np.zeros((B, S, n_mels))
    smask = np.zeros((B, S), bool)
    fphone = np.zeros((B, S), np.int64)
    text = np.full((B, X), pad_id, np.int64)
    ttarget = np.full((B, X), pad_id, np.int64)
    tmask = np.zeros((B, X), bool)
    for b, (pair, aln) in enumerate(items):
        n, m = len(pair.spec), len(pair.ids)
        speech[b, :n] = pair.masked_spec
        target[b, :n] = pair.spec
        smask[b, :n] = pair.frame_mask
        fphone[b, :n] = aln.frame_to_phoneme()
        text[b, :m] = pair.masked_ids
        ttarget[b, :m] = pair.ids
        tmask[b, :m] = pair.text_mask
    t = torch.from_numpy
    return Batch(
        speech=t(speech).float(),
        speech_mask=t(smask),
        speech_len=torch.tensor([len(p.spec) for p, _ in items]),
        frame_phone=t(fphone),
        text=t(text),
        text_mask=t(tmask),
        text_len=torch.tensor([len(p.ids) for p, _ in items]),
        target_speech=t(target).float(),
        target_text=t(ttarget),
    )


# -------------------------------------------------------------------- layers


def sinusoid_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return table.to(dtype)


class FeedForward(nn.Module):
    def __init__(self, d_model, mult, dropout):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.w1 = nn.Linear(d_model, d_model * mult)
        self.w2 = nn.Linear(d_model * mult, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.dropout(self.w2(self.dropout(F.silu(self.w1(self.norm(x))))))


class SelfAttention(nn.Module):
    def __init__(self, d_model, n_heads, dropout):
        super().__init__()
        self.n_heads = n_heads
        self.norm = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, valid):
        B, L, D = x.shape
        h = self.n_heads
        q, k, v = self.qkv(self.norm(x)).view(B, L, 3, h, D // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(D // h)
        scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
        attn = self.dropout(scores.softmax(-1))
        y = (attn @ v).transpose(1, 2).reshape(B, L, D)
        return self.dropout(self.out(y))


class ConvModule(nn.Module):
    """Pointwise-GLU, depthwise conv, LayerNorm, SiLU, pointwise.

    LayerNorm replaces the usual BatchNorm so utterances in a batch never
    influence one another.
    """

    def __init__(self, d_model, kernel_size, dropout):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.pw1 = nn.Linear(d_model, 2 * d_model)
        self.depthwise = nn.Conv1d(d_model, d_model, kernel_size, padding=kernel_size // 2,
                                   groups=d_model)
        self.mid_norm = nn.LayerNorm(d_model)
        self.pw2 = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, valid):
        y = F.glu(self.pw1(self.norm(x)), dim=-1)
        y = y * valid[..., None]
        y = self.depthwise(y.transpose(1, 2)).transpose(1, 2)
        y = self.pw2(F.silu(self.mid_norm(y)))
        return self.dropout(y)


class ConformerBlock(nn.Module):
    def __init__(self, d_model, n_heads, ffn_mult, kernel_size, dropout):
        super().__init__()
        self.ff1 = FeedForward(d_model, ffn_mult, dropout)
        self.attn = SelfAttention(d_model, n_heads, dropout)
        self.conv = ConvModule(d_model, kernel_size, dropout)
        self.ff2 = FeedForward(d_model, ffn_mult, dropout)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x, valid):
        x = x + 0.5 * self.ff1(x)
        x = x + self.attn(x, valid)
        x = x + self.conv(x, valid)
        x = x + 0.5 * self.ff2(x)
        return self.norm(x)


class PostNet(nn.Module):
    """Residual conv refiner; tanh after every layer but the last."""

    def __init__(self, n_mels, channels, kernel, n_layers, dropout):
        super().__init__()
        dims = [n_mels] + [channels] * (n_layers - 1) + [n_mels]
        self.convs = nn.ModuleList(
            nn.Conv1d(dims[i], dims[i + 1], kernel, padding=kernel // 2) for i in range(n_layers)
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, valid):
        keep = valid[:, None, :].to(x.dtype)
        y = x.transpose(1, 2) * keep
        for i, conv in enumerate(self.convs):
            y = conv(y)
            if i < len(self.convs) - 1:
                y = self.dropout(torch.tanh(y))
            y = y * keep
        return y.transpose(1, 2)


@dataclass
class ModelOutput:
    coarse: torch.Tensor        # (B, S, n_mels)
    refined: torch.Tensor       # (B, S, n_mels)
    text_logits: torch.Tensor   # (B, X, V)
    hidden: torch.Tensor        # (B, S + X, d_model), packed per utterance


class MaskedSpeechTextModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.acoustic = nn.Sequential(nn.Linear(cfg.n_mels, d), nn.SiLU(), nn.Linear(d, d))
        self.phoneme_embedding = nn.Embedding(cfg.vocab_size, d)
        self.alignment_embedding = nn.Embedding(cfg.max_phonemes, d)
        self.speech_mask_vector = nn.Parameter(torch.randn(d) * 0.5)
        self.text_mask_vector = nn.Parameter(torch.randn(d) * 0.5)
        self.input_dropout = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(
            ConformerBlock(d, cfg.n_heads, cfg.ffn_mult, k, cfg.dropout) for k in cfg.kernel_sizes
        )
        self.speech_head = nn.Linear(d, cfg.n_mels)
        self.postnet = PostNet(cfg.n_mels, cfg.postnet_channels, cfg.postnet_kernel,
                               cfg.postnet_layers, cfg.dropout)
        self.text_head = nn.Linear(d, cfg.vocab_size)

    def _check_length(self, batch: Batch):
        if batch.text.shape[1] > self.cfg.max_phonemes or int(batch.frame_phone.max()) >= self.cfg.max_phonemes:
            raise ValueError(f"more than max_phonemes={self.cfg.max_phonemes} phonemes in an utterance")

    def embed_speech(self, batch: Batch) -> torch.Tensor:
        self._check_length(batch)
        content = self.acoustic(batch.speech)
        content = torch.where(batch.speech_mask[..., None],
                              self.speech_mask_vector.expand_as(content), content)
        S = batch.speech.shape[1]
        pos = sinusoid_positions(S, self.cfg.d_model, content.dtype)
        return content + pos + self.alignment_embedding(batch.frame_phone)

    def embed_text(self, batch: Batch) -> torch.Tensor:
        content = self.phoneme_embedding(batch.text)
        content = torch.where(batch.text_mask[..., None],
                              self.text_mask_vector.expand_as(content), content)
        self._check_length(batch)
        X = batch.text.shape[1]
        pos = sinusoid_positions(X, self.cfg.d_model, content.dtype)
        aln = self.alignment_embedding(torch.arange(X))
        return content + pos + aln

    def embed_inputs(self, batch: Batch):
        """Joint input: each utterance's speech block followed by its text block."""
        es, ex = self.embed_speech(batch), self.embed_text(batch)
        rows = [torch.cat([es[b, :s], ex[b, :x]])
                for b, (s, x) in enumerate(zip(batch.speech_len.tolist(), batch.text_len.tolist()))]
        joint = nn.utils.rnn.pad_sequence(rows, batch_first=True)
        valid = _length_mask(batch.speech_len + batch.text_len, joint.shape[1])
        return joint, valid

    def encode(self, joint, valid):
        x = self.input_dropout(joint)
        for block in self.blocks:
            x = block(x, valid)
        return x * valid[..., None]

    def forward(self, batch: Batch) -> ModelOutput:
        joint, valid = self.embed_inputs(batch)
        hidden = self.encode(joint, valid)
        S, X = batch.speech.shape[1], batch.text.shape[1]
        speech_rows, text_rows = [], []
        for b, (s, x) in enumerate(zip(batch.speech_len.tolist(), batch.text_len.tolist())):
            speech_rows.append(F.pad(hidden[b, :s], (0, 0, 0, S - s)))
            text_rows.append(F.pad(hidden[b, s:s + x], (0, 0, 0, X - x)))
        hs = torch.stack(speech_rows)
        hx = torch.stack(text_rows)
        svalid = batch.speech_valid
        coarse = self.speech_head(hs) * svalid[..., None]
        refined = coarse + self.postnet(coarse, svalid)
        logits = self.text_head(hx)
        return ModelOutput(coarse, refined, logits, hidden)


# -------------------------------------------------------------------- losses


def speech_loss(out: ModelOutput, batch: Batch, masked_only: bool = False) -> torch.Tensor:
    """Mean absolute error of the refined and the coarse spectrogram, summed.

    Averaged per element over every valid frame, or over masked frames
    only when ``masked_only`` is set.
    """
    if out.refined.shape != batch.target_speech.shape:
        raise ValueError(f"shape mismatch {tuple(out.refined.shape)} vs {tuple(batch.target_speech.shape)}")
    sel = batch.speech_valid
    if masked_only:
        sel = sel & batch.speech_mask
    n = sel.sum() * out.refined.shape[-1]
    if n == 0:
        return out.refined.sum() * 0.0
    w = sel[..., None].to(out.refined.dtype)
    target = batch.target_speech
    refined = ((out.refined - target).abs() * w).sum() / n
    coarse = ((out.coarse - target).abs() * w).sum() / n
    loss = refined + coarse
    if not math.isfinite(_scalar(loss)):
        raise FloatingPointError("non-finite speech loss")
    return loss


def text_loss(out: ModelOutput, batch: Batch) -> torch.Tensor:
    """Cross-entropy averaged over text-masked positions; zero when none are masked."""
    if out.text_logits.shape[1] == 0:
        raise ValueError("empty text logits")
    sel = batch.text_mask & batch.text_valid
    if not sel.any():
        return out.text_logits.sum() * 0.0
    targets = batch.target_text[sel]
    if targets.max() >= out.text_logits.shape[-1] or targets.min() < 0:
        raise ValueError("target phoneme id out of range")
    return F.cross_entropy(out.text_logits[sel], targets)


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def total_loss(speech, text):
    vs, vx = _scalar(speech), _scalar(text)
    if not (math.isfinite(vs) and math.isfinite(vx)):
        raise FloatingPointError(f"non-finite loss term: speech={vs}, text={vx}")
    return speech + text


def compute_losses(model: MaskedSpeechTextModel, batch: Batch):
    """Forward pass plus the speech, text and total losses."""
    out = model(batch)
    ls = speech_loss(out, batch, model.cfg.masked_only_speech_loss)
    lx = text_loss(out, batch)
    return out, {"speech": ls, "text": lx, "total": total_loss(ls, lx)}


def forward(pair: MaskedPair, alignment: Alignment, model: MaskedSpeechTextModel, pad_id: int = 0):
    """Single-utterance convenience wrapper around :func:`compute_losses`."""
    batch = collate([(pair, alignment)], pad_id)
    dtype = next(model.parameters()).dtype
    return compute_losses(model, batch.to(dtype))
