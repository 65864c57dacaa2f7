import json
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from jointmask.features import FeatureStats
from jointmask.linguistic import merge_vocabs
from jointmask.model import ModelConfig
from jointmask.pipeline import (
    BatchingError,
    BilingualScheduler,
    Checkpoint,
    ManifestError,
    TrainConfig,
    TrainingError,
    derive_seed,
    load_manifest,
    make_batches,
    make_training_batch,
    noam_lr,
    prepare_utterance,
    run_pretraining,
)
from jointmask.synthetic import (
    featurize_corpus,
    make_inventories,
    make_speakers,
    make_utterance,
    write_corpus,
)


def write_lines(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def row(uid, lang="en"):
    return {"id": uid, "audio": f"{uid}.wav", "lang": lang, "phonemes": ["a"]}


# ------------------------------------------------------------------ manifest


def test_manifest_two_lines_in_order(tmp_path):
    path = write_lines(tmp_path / "m.jsonl", [row("u1"), row("u2", "zh")])
    entries = load_manifest(path, check_paths=False)
    assert [e.id for e in entries] == ["u1", "u2"]
    assert entries[0].audio == str(tmp_path / "u1.wav")
    assert entries[1].alignment is None


def test_manifest_duplicate_on_line_3(tmp_path):
    path = write_lines(tmp_path / "m.jsonl", [row("u1"), row("u2"), row("u1")])
    with pytest.raises(ManifestError, match="line 3"):
        load_manifest(path, check_paths=False)


def test_manifest_empty(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert load_manifest(tmp_path / "m.jsonl") == []


def test_manifest_missing_audio(tmp_path):
    path = write_lines(tmp_path / "m.jsonl", [row("u1")])
    with pytest.raises(ManifestError, match="missing file"):
        load_manifest(path)


def test_manifest_undeclared_language(tmp_path):
    path = write_lines(tmp_path / "m.jsonl", [row("u1", "fr")])
    with pytest.raises(ManifestError, match="undeclared language"):
        load_manifest(path, languages=("zh", "en"), check_paths=False)


def test_manifest_malformed(tmp_path):
    (tmp_path / "m.jsonl").write_text('{"id": "x"}\n')
    with pytest.raises(ManifestError, match="line 1"):
        load_manifest(tmp_path / "m.jsonl", check_paths=False)


def test_prepare_from_written_corpus(tmp_path, tiny_vocab):
    rng = np.random.default_rng(0)
    a, b = make_inventories(6, 6, 2)
    utts = [make_utterance("zh_0", a, make_speakers("zh", 1, rng)[0], rng, 1.0)]
    write_corpus(tmp_path, tiny_vocab, utts)
    entries = load_manifest(tmp_path / "manifest.jsonl")
    u = prepare_utterance(entries[0], tiny_vocab, FeatureStats.identity(80))
    assert u.alignment == utts[0].alignment
    assert u.num_frames == utts[0].alignment.num_frames


# ------------------------------------------------------------------ batching


def frames_items(frames):
    return [SimpleNamespace(id=f"u{k}", num_frames=n) for k, n in enumerate(frames)]


def test_greedy_batches():
    items = frames_items([100, 200, 300, 400])
    batches = make_batches(items, 600)
    assert [[u.num_frames for u in b] for b in batches] == [[100, 200, 300], [400]]


def test_single_batch_when_budget_is_large():
    items = frames_items([100, 200, 300, 400])
    assert len(make_batches(items, 1000)) == 1


def test_oversized_utterance_named():
    items = frames_items([100, 700])
    with pytest.raises(BatchingError, match="'u1'"):
        make_batches(items, 600)


def test_shuffled_batches_keep_everything():
    items = frames_items(list(range(10, 200, 10)))
    batches = make_batches(items, 300, seed=4)
    flat = [u.id for b in batches for u in b]
    assert sorted(flat) == sorted(u.id for u in items)
    assert all(sum(u.num_frames for u in b) <= 300 for b in batches)
    assert batches == make_batches(items, 300, seed=4)


# ----------------------------------------------------------------- scheduler


def test_scheduler_p_one():
    s = BilingualScheduler({"zh": [["z"]], "en": [["e"]]}, p=1.0, seed=0)
    stream = s.stream()
    assert {next(stream)[1] for _ in range(200)} == {"zh"}


def test_scheduler_fraction():
    s = BilingualScheduler({"zh": [1], "en": [2]}, p=0.5, seed=11)
    frac = np.mean([s.language_at(t) == "zh" for t in range(1, 10_001)])
    assert 0.48 <= frac <= 0.52


def test_scheduler_deterministic_and_restartable():
    batches = {"zh": [[f"z{k}"] for k in range(3)], "en": [[f"e{k}"] for k in range(5)]}
    a = BilingualScheduler(batches, 0.5, seed=2).stream()
    b = BilingualScheduler(batches, 0.5, seed=2).stream()
    first = [next(a) for _ in range(50)]
    assert first == [next(b) for _ in range(50)]
    restarted = BilingualScheduler(batches, 0.5, seed=2).stream(start_step=31)
    assert [next(restarted) for _ in range(20)] == first[30:]


def test_scheduler_rejects_bad_input():
    with pytest.raises(BatchingError):
        BilingualScheduler({"zh": [1]}, 0.5)
    with pytest.raises(BatchingError):
        BilingualScheduler({"zh": [1], "en": []}, 0.5)
    with pytest.raises(BatchingError):
        BilingualScheduler({"zh": [1], "en": [2]}, 1.5)


# ------------------------------------------------------------------ schedule


def test_noam_closed_form():
    assert abs(noam_lr(4000, 256, 4000) - 9.8821e-4) <= 1e-7
    assert noam_lr(1, 256, 4000, 2.0) == pytest.approx(2 * 256 ** -0.5 * 4000 ** -1.5)
    with pytest.raises(ValueError):
        noam_lr(0, 256, 4000)


def test_derive_seed_stable():
    assert derive_seed(1, "a", 3) == derive_seed(1, "a", 3)
    assert derive_seed(1, "a", 3) != derive_seed(1, "a", 4)
    assert 0 <= derive_seed("x") < 2**63


# ------------------------------------------------------------------ training


@pytest.fixture(scope="module")
def small_corpus():
    rng = np.random.default_rng(5)
    a, b = make_inventories(6, 6, 2)
    vocab = merge_vocabs(a, b)
    synth = [make_utterance(f"{lang}_{i}", inv, make_speakers(lang, 1, rng)[0], rng, 0.8)
             for inv, lang in ((a, "zh"), (b, "en")) for i in range(2)]
    stats, utts = featurize_corpus(synth, vocab)
    corpus = {}
    for u in utts:
        corpus.setdefault(u.lang, []).append(u)
    return vocab, stats, corpus


def test_max_steps_zero_is_initial(small_corpus):
    vocab, stats, corpus = small_corpus
    mcfg = ModelConfig.micro(vocab.size)
    a = run_pretraining(TrainConfig(max_steps=0, seed=1), mcfg, corpus, vocab, stats)
    torch.manual_seed(1)
    from jointmask.model import MaskedSpeechTextModel

    fresh = MaskedSpeechTextModel(mcfg)
    assert a.step == 0
    for (n, p), q in zip(a.model.state_dict().items(), fresh.state_dict().values()):
        assert torch.equal(p, q), n


def test_training_logs_and_checkpoints(small_corpus, tmp_path):
    vocab, stats, corpus = small_corpus
    cfg = TrainConfig(warmup_steps=5, max_steps=6, batch_bins=200, seed=0, checkpoint_every=3)
    log = tmp_path / "log.jsonl"
    ckpt = run_pretraining(cfg, ModelConfig.micro(vocab.size), corpus, vocab, stats,
                           out_dir=tmp_path, log_path=log)
    records = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["step"] for r in records] == list(range(1, 7))
    assert all(r["loss_total"] == pytest.approx(r["loss_speech"] + r["loss_text"]) for r in records)
    assert {r["lang"] for r in records} <= {"zh", "en"}
    for name in ("step0000003.pt", "step0000006.pt", "final.pt"):
        assert (tmp_path / name).exists() and (tmp_path / (name + ".json")).exists()
    assert not list(tmp_path.glob("*.tmp"))
    assert ckpt.step == 6


def test_checkpoint_round_trip_forward(small_corpus, tmp_path):
    vocab, stats, corpus = small_corpus
    cfg = TrainConfig(warmup_steps=5, max_steps=3, batch_bins=200, seed=0)
    ckpt = run_pretraining(cfg, ModelConfig.micro(vocab.size), corpus, vocab, stats)
    ckpt.save(tmp_path / "c.pt")
    back = Checkpoint.load(tmp_path / "c.pt")
    assert back.vocab == vocab and back.train_cfg == cfg and back.step == 3
    np.testing.assert_array_equal(back.stats.mean, stats.mean)
    utts = corpus["zh"]
    batch = make_training_batch(utts, vocab, cfg, 99)
    ckpt.model.eval()
    back.model.eval()
    with torch.no_grad():
        assert torch.equal(ckpt.model(batch).refined, back.model(batch).refined)


def test_checkpoint_vocab_hash_mismatch(small_corpus, tmp_path):
    vocab, stats, corpus = small_corpus
    ckpt = run_pretraining(TrainConfig(max_steps=0), ModelConfig.micro(vocab.size), corpus, vocab, stats)
    ckpt.save(tmp_path / "c.pt")
    with pytest.raises(ValueError, match="hash"):
        Checkpoint.load(tmp_path / "c.pt", expected_vocab_hash="0" * 64)


def test_resume_with_other_vocab_fails(small_corpus):
    vocab, stats, corpus = small_corpus
    ckpt = run_pretraining(TrainConfig(max_steps=0), ModelConfig.micro(vocab.size), corpus, vocab, stats)
    a, b = make_inventories(6, 7, 2)
    other = merge_vocabs(a, b)
    with pytest.raises(TrainingError):
        run_pretraining(TrainConfig(max_steps=2), ModelConfig.micro(vocab.size), corpus, other, stats,
                        resume=ckpt)


def test_single_language_corpus_trains(small_corpus):
    vocab, stats, corpus = small_corpus
    hist = []
    run_pretraining(TrainConfig(warmup_steps=5, max_steps=3, batch_bins=100), ModelConfig.micro(vocab.size),
                    {"zh": corpus["zh"]}, vocab, stats, history=hist)
    assert [h["lang"] for h in hist] == ["zh"] * 3


def test_text_mask_flag(small_corpus):
    vocab, stats, corpus = small_corpus
    utts = corpus["en"]
    on = make_training_batch(utts, vocab, TrainConfig(lam=0.3), 1)
    off = make_training_batch(utts, vocab, TrainConfig(lam=0.3, text_mask_enabled=False), 1)
    assert on.text_mask.any()
    assert not off.text_mask.any()
    assert torch.equal(on.speech_mask, off.speech_mask)
