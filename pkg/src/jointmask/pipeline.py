"""Manifests, batch-bin batching, bilingual scheduling, Noam schedule and the pretraining loop."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from .features import (
    FeatureConfig,
    FeatureStats,
    LogMelSpectrogram,
    compute_log_mel,
    load_audio,
    load_features,
    normalize_features,
)
from .linguistic import (
    Alignment,
    PhonemeSeq,
    PhonemeVocab,
    encode_phonemes,
    parse_alignment_file,
    uniform_alignment,
)
from .masking import apply_masks, plan_masks
from .model import MaskedSpeechTextModel, ModelConfig, _scalar, collate, compute_losses

log = logging.getLogger(__name__)


class ManifestError(ValueError):
    pass


class BatchingError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


# ------------------------------------------------------------------ manifest


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    audio: str
    lang: str
    phonemes: tuple[str, ...]
    alignment: str | None = None


def load_manifest(path, languages: Sequence[str] | None = None, check_paths: bool = True) -> list[ManifestEntry]:
    """Parse a JSON-lines manifest, resolving relative paths against its directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries, seen = [], {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            entry = ManifestEntry(
                id=str(row["id"]),
                audio=str(_resolve(path, row["audio"])),
                lang=str(row["lang"]),
                phonemes=tuple(row["phonemes"]),
                alignment=str(_resolve(path, row["alignment"])) if row.get("alignment") else None,
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}: malformed line {lineno}: {exc}") from exc
        if entry.id in seen:
            raise ManifestError(
                f"{path}: duplicate id {entry.id!r} on line {lineno} (first seen on line {seen[entry.id]})"
            )
        if languages is not None and entry.lang not in languages:
            raise ManifestError(f"{path}: line {lineno} has undeclared language {entry.lang!r}")
        if check_paths:
            for p in (entry.audio, entry.alignment):
                if p is not None and not Path(p).exists():
                    raise ManifestError(f"{path}: line {lineno} references missing file {p}")
        seen[entry.id] = lineno
        entries.append(entry)
    return entries


def _resolve(manifest: Path, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else manifest.parent / p


@dataclass
class Utterance:
    """A featurized training example (features already normalized)."""

    id: str
    lang: str
    frames: np.ndarray
    text: PhonemeSeq
    alignment: Alignment

    @property
    def num_frames(self) -> int:
        return len(self.frames)


def prepare_utterance(entry: ManifestEntry, vocab: PhonemeVocab, stats: FeatureStats,
                      cfg: FeatureConfig = FeatureConfig(), features_dir=None) -> Utterance:
    cached = Path(features_dir) / f"{entry.id}.npz" if features_dir else None
    if cached is not None and cached.exists():
        spec = load_features(cached)
    else:
        spec = compute_log_mel(load_audio(entry.audio, cfg.sample_rate), cfg)
    text = encode_phonemes(entry.phonemes, vocab, entry.lang)
    if entry.alignment:
        aln = parse_alignment_file(entry.alignment, spec.num_frames, text, vocab, cfg)
    else:
        aln = uniform_alignment(spec.num_frames, len(text))
    frames = normalize_features(spec, stats).frames
    return Utterance(entry.id, entry.lang, frames, text, aln)


# ------------------------------------------------------------------ batching


def make_batches(items: Sequence, batch_bins: int, seed: int | None = None,
                 frames: Callable = lambda u: u.num_frames, name: Callable = lambda u: u.id) -> list[list]:
    """Shuffle (unless ``seed`` is None) and greedily pack items under a frame budget."""
    for it in items:
        if frames(it) > batch_bins:
            raise BatchingError(
                f"utterance {name(it)!r} has {frames(it)} frames, more than batch_bins={batch_bins}"
            )
    order = list(items)
    if seed is not None:
        perm = np.random.default_rng(seed).permutation(len(order))
        order = [order[i] for i in perm]
    batches, current, used = [], [], 0
    for it in order:
        n = frames(it)
        if current and used + n > batch_bins:
            batches.append(current)
            current, used = [], 0
        current.append(it)
        used += n
    if current:
        batches.append(current)
    return batches


def derive_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


class BilingualScheduler:
    """Monolingual batches from two languages, chosen by a Bernoulli draw per step.

    The language for step ``t`` depends only on ``(seed, t)``, so a stream
    can be restarted at any step.
    """

    def __init__(self, batches: dict, p: float = 0.5, seed: int = 0):
        if len(batches) != 2:
            raise BatchingError(f"expected exactly two languages, got {sorted(batches)}")
        if not 0.0 <= p <= 1.0:
            raise BatchingError(f"p must lie in [0, 1], got {p}")
        for lang, bl in batches.items():
            if not bl:
                raise BatchingError(f"no batches for language {lang!r}")
        self.languages = tuple(batches)
        self.batches = batches
        self.p = p
        self.seed = seed

    def language_at(self, step: int) -> str:
        u = np.random.default_rng([self.seed, step]).random()
        return self.languages[0] if u < self.p else self.languages[1]

    def stream(self, start_step: int = 1) -> Iterator[tuple[int, str, list]]:
        cursor = dict.fromkeys(self.languages, 0)
        for t in range(1, start_step):
            cursor[self.language_at(t)] += 1
        step = start_step
        while True:
            lang = self.language_at(step)
            bl = self.batches[lang]
            yield step, lang, bl[cursor[lang] % len(bl)]
            cursor[lang] += 1
            step += 1


def _single_language_stream(batches: list, start_step: int = 1):
    step = start_step
    while True:
        yield step, None, batches[(step - 1) % len(batches)]
        step += 1


def noam_lr(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    if step < 1:
        raise ValueError("step must be >= 1")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


# ---------------------------------------------------------------- checkpoint


@dataclass
class TrainConfig:
    lr_scale: float = 1.0
    warmup_steps: int = 4000
    batch_bins: int = 6000
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-9
    max_steps: int = 1000
    seed: int = 0
    lam: float = 0.8
    mean_span: int = 3
    text_mask_enabled: bool = True
    p_lang: float = 0.5
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        self.betas = tuple(self.betas)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Checkpoint:
    model: MaskedSpeechTextModel
    vocab: PhonemeVocab
    stats: FeatureStats
    feature_cfg: FeatureConfig = field(default_factory=FeatureConfig)
    train_cfg: TrainConfig | None = None
    step: int = 0
    optimizer_state: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def model_cfg(self) -> ModelConfig:
        return self.model.cfg

    @property
    def vocab_hash(self) -> str:
        return self.vocab.hash

    def sidecar(self) -> dict:
        return {
            "model_config": self.model_cfg.to_dict(),
            "feature_config": self.feature_cfg.to_dict(),
            "train_config": self.train_cfg.to_dict() if self.train_cfg else None,
            "vocab_hash": self.vocab.hash,
            "vocab": [[s, sorted(l)] for s, l in zip(self.vocab.symbols, self.vocab.languages)],
            "step": self.step,
            "extra": self.extra,
        }

    def save(self, path) -> Path:
        """Write ``<path>`` (weights) and ``<path>.json`` (configs) atomically."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = {
            "model": self.model.state_dict(),
            "optimizer": self.optimizer_state,
            "stats_mean": torch.from_numpy(np.asarray(self.stats.mean)),
            "stats_std": torch.from_numpy(np.asarray(self.stats.std)),
        }
        _atomic_write(path, lambda fh: torch.save(blob, fh))
        text = json.dumps(self.sidecar(), indent=2)
        _atomic_write(Path(str(path) + ".json"), lambda fh: fh.write(text.encode()))
        return path

    @classmethod
    def load(cls, path, expected_vocab_hash: str | None = None) -> "Checkpoint":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        vocab = PhonemeVocab(tuple(s for s, _ in meta["vocab"]),
                             tuple(frozenset(l) for _, l in meta["vocab"]))
        if vocab.hash != meta["vocab_hash"]:
            raise ValueError(f"{path}: vocabulary does not match its recorded hash")
        if expected_vocab_hash is not None and expected_vocab_hash != vocab.hash:
            raise ValueError(f"{path}: vocabulary hash mismatch")
        blob = torch.load(path, weights_only=False)
        model = MaskedSpeechTextModel(ModelConfig.from_dict(meta["model_config"]))
        first = next(iter(blob["model"].values()))
        model.to(first.dtype)
        model.load_state_dict(blob["model"])
        stats = FeatureStats(blob["stats_mean"].numpy(), blob["stats_std"].numpy())
        tc = meta.get("train_config")
        return cls(
            model=model,
            vocab=vocab,
            stats=stats,
            feature_cfg=FeatureConfig.from_dict(meta["feature_config"]),
            train_cfg=TrainConfig.from_dict(tc) if tc else None,
            step=meta["step"],
            optimizer_state=blob["optimizer"],
            extra=meta.get("extra", {}),
        )


def _atomic_write(path: Path, write):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ------------------------------------------------------------------ training


def masked_example(utt: Utterance, vocab: PhonemeVocab, lam: float, seed: int,
                   mean_span: int = 3, text_masking: bool = True):
    plan = plan_masks(utt.alignment, len(utt.text), lam, mean_span, seed, text_masking)
    return apply_masks(utt.frames, utt.text, plan, vocab.mask_id), utt.alignment


def make_training_batch(utts: Sequence[Utterance], vocab: PhonemeVocab, cfg: TrainConfig, step: int):
    items = [
        masked_example(u, vocab, cfg.lam, derive_seed(cfg.seed, step, u.id), cfg.mean_span,
                       cfg.text_mask_enabled)
        for u in utts
    ]
    return collate(items, vocab.pad_id)


def run_pretraining(train_cfg: TrainConfig, model_cfg: ModelConfig, corpus: dict,
                    vocab: PhonemeVocab, stats: FeatureStats,
                    feature_cfg: FeatureConfig = FeatureConfig(), *,
                    resume: Checkpoint | None = None, out_dir=None, log_path=None,
                    history: list | None = None, dtype=torch.float32) -> Checkpoint:
    """Masked speech-text pretraining.

    ``corpus`` maps a language tag to its :class:`Utterance` list. With two
    languages, batches alternate by a seeded Bernoulli draw per step. Each
    utterance gets a fresh mask plan per step, seeded from
    ``(seed, step, utterance id)``. Resuming from a checkpoint reproduces
    the uninterrupted run.
    """
    torch.manual_seed(train_cfg.seed)
    model = MaskedSpeechTextModel(model_cfg).to(dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=0.0, betas=train_cfg.betas, eps=train_cfg.eps)
    start = 0
    if resume is not None:
        if resume.vocab.hash != vocab.hash:
            raise TrainingError("checkpoint vocabulary differs from the training vocabulary")
        model.load_state_dict(resume.model.state_dict())
        if resume.optimizer_state:
            optimizer.load_state_dict(resume.optimizer_state)
        start = resume.step

    def snapshot(step):
        return Checkpoint(model, vocab, stats, feature_cfg, train_cfg, step,
                          optimizer.state_dict(), {})

    if train_cfg.max_steps <= start:
        return snapshot(start)

    langs = sorted(corpus)
    batches = {lang: make_batches(corpus[lang], train_cfg.batch_bins, derive_seed(train_cfg.seed, lang))
               for lang in langs}
    if len(langs) == 2:
        stream = BilingualScheduler(batches, train_cfg.p_lang, train_cfg.seed).stream(start + 1)
    elif len(langs) == 1:
        stream = _single_language_stream(batches[langs[0]], start + 1)
    else:
        raise TrainingError(f"corpus must hold one or two languages, got {langs}")

    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    model.train()
    try:
        for step, lang, utts in stream:
            if step > train_cfg.max_steps:
                break
            batch = make_training_batch(utts, vocab, train_cfg, step).to(dtype)
            torch.manual_seed(derive_seed(train_cfg.seed, "dropout", step))
            _, losses = compute_losses(model, batch)
            if not torch.isfinite(losses["total"]):
                raise TrainingError(
                    f"non-finite loss at step {step} on batch {[u.id for u in utts]}: "
                    f"{ {k: _scalar(v) for k, v in losses.items()} }"
                )
            lr = noam_lr(step, model_cfg.d_model, train_cfg.warmup_steps, train_cfg.lr_scale)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            losses["total"].backward()
            optimizer.step()

            record = {
                "step": step,
                "lr": lr,
                "loss_speech": _scalar(losses["speech"]),
                "loss_text": _scalar(losses["text"]),
                "loss_total": _scalar(losses["total"]),
                "lang": lang if lang is not None else utts[0].lang,
            }
            if history is not None:
                history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
            if train_cfg.log_every and step % train_cfg.log_every == 0:
                log.info("step %d lr %.3g loss %.4f", step, lr, record["loss_total"])
            if out_dir and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
                snapshot(step).save(Path(out_dir) / f"step{step:07d}.pt")
    finally:
        if log_fh:
            log_fh.close()

    ckpt = snapshot(train_cfg.max_steps)
    if out_dir:
        ckpt.save(Path(out_dir) / "final.pt")
    return ckpt
