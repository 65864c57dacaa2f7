"""Command-line entry point: ``jointmask <subcommand> ...``.

Exit status is 0 on success, 2 for invalid input and 3 for runtime or
numerical failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .features import (
    FeatureConfig,
    FeatureStats,
    compute_log_mel,
    compute_stats,
    invert_mel_preview,
    load_audio,
    load_features,
    load_stats,
    save_audio,
    save_features,
    save_stats,
)
from .inference import (
    CloneRequest,
    DurationModel,
    EditRequest,
    clone_voice,
    edit_speech,
    reconstruct_masked,
    train_duration_model,
)
from .linguistic import (
    PhonemeVocab,
    encode_phonemes,
    parse_alignment_file,
    uniform_alignment,
)
from .masking import plan_masks
from .model import ModelConfig
from .pipeline import (
    Checkpoint,
    TrainConfig,
    load_manifest,
    prepare_utterance,
    run_pretraining,
)
from .tools import export_plot_data, phoneme_similarity

log = logging.getLogger("jointmask")


def _feature_cfg(args) -> FeatureConfig:
    return FeatureConfig(sample_rate=args.sr, n_mels=args.n_mels, win_ms=args.win_ms, hop_ms=args.hop_ms)


def _read_symbols(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").split()


def _vocab_from_entries(entries) -> PhonemeVocab:
    order, langs = [], {}
    for e in entries:
        for s in e.phonemes:
            if s not in langs:
                order.append(s)
                langs[s] = set()
            langs[s].add(e.lang)
    return PhonemeVocab(tuple(order), tuple(frozenset(langs[s]) for s in order))


def _write_outputs(out_dir: Path, name: str, result_spec, report: dict, preview_iters: int):
    out_dir.mkdir(parents=True, exist_ok=True)
    save_features(out_dir / f"{name}.npz", result_spec)
    if preview_iters > 0:
        save_audio(out_dir / f"{name}.wav", invert_mel_preview(result_spec, preview_iters))
    (out_dir / f"{name}.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report))


# ---------------------------------------------------------------- commands


def cmd_featurize(args):
    cfg = _feature_cfg(args)
    entries = load_manifest(args.manifest)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = []
    for e in entries:
        spec = compute_log_mel(load_audio(e.audio, cfg.sample_rate), cfg)
        save_features(out / f"{e.id}.npz", spec)
        specs.append(spec)
    if specs:
        save_stats(out / "stats.npz", compute_stats(specs))
    (out / "feature_config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    print(json.dumps({"utterances": len(specs), "frames": int(sum(s.num_frames for s in specs))}))


def _load_train_config(path, no_text_mask: bool):
    path = Path(path)
    conf = json.loads(path.read_text())
    base = path.parent

    def resolve(p):
        return None if p is None else (Path(p) if Path(p).is_absolute() else base / p)

    fcfg = FeatureConfig.from_dict(conf.get("feature", {}))
    tcfg = TrainConfig.from_dict(conf.get("train", {}))
    if no_text_mask:
        tcfg = replace(tcfg, text_mask_enabled=False)
    return conf, resolve(conf["manifest"]), resolve(conf.get("vocab")), resolve(conf.get("features_dir")), fcfg, tcfg


def cmd_train(args):
    conf, manifest, vocab_path, feat_dir, fcfg, tcfg = _load_train_config(args.config, args.no_text_mask)
    entries = load_manifest(manifest)
    vocab = PhonemeVocab.load(vocab_path) if vocab_path else _vocab_from_entries(entries)
    if feat_dir and (feat_dir / "stats.npz").exists():
        stats = load_stats(feat_dir / "stats.npz")
    else:
        stats = compute_stats([compute_log_mel(load_audio(e.audio, fcfg.sample_rate), fcfg) for e in entries])
    utts = [prepare_utterance(e, vocab, stats, fcfg, feat_dir) for e in entries]
    corpus = {}
    for u in utts:
        corpus.setdefault(u.lang, []).append(u)
    mcfg = ModelConfig(vocab_size=vocab.size, n_mels=fcfg.n_mels, **conf.get("model", {}))
    resume = Checkpoint.load(args.resume) if args.resume else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = run_pretraining(tcfg, mcfg, corpus, vocab, stats, fcfg, resume=resume,
                           out_dir=None, log_path=out / "train_log.jsonl")
    ckpt.extra = {"manifest": str(Path(manifest).resolve()),
                  "features_dir": str(feat_dir.resolve()) if feat_dir else None}
    ckpt.save(out / "final.pt")
    print(json.dumps({"checkpoint": str(out / "final.pt"), "step": ckpt.step}))


def cmd_train_duration(args):
    entries = load_manifest(args.manifest)
    vocab = PhonemeVocab.load(args.vocab) if args.vocab else _vocab_from_entries(entries)
    cfg = FeatureConfig()
    utts = [prepare_utterance(e, vocab, FeatureStats.identity(cfg.n_mels), cfg) for e in entries]
    model = train_duration_model(utts, vocab, cfg, steps=args.steps, seed=args.seed)
    model.save(args.out)
    print(json.dumps({"checkpoint": args.out, "utterances": len(utts)}))


def cmd_mask_plan(args):
    aln = uniform_alignment(args.frames, args.phonemes)
    plan = plan_masks(aln, args.phonemes, args.lam, args.mean_span, args.seed)
    print(plan.to_json())


def cmd_reconstruct(args):
    ckpt = Checkpoint.load(args.ckpt)
    manifest = ckpt.extra.get("manifest")
    if not manifest:
        raise ValueError("checkpoint does not record its training manifest")
    entry = next((e for e in load_manifest(manifest) if e.id == args.utt), None)
    if entry is None:
        raise ValueError(f"utterance {args.utt!r} not in {manifest}")
    cfg = ckpt.feature_cfg
    spec = compute_log_mel(load_audio(entry.audio, cfg.sample_rate), cfg)
    text = encode_phonemes(entry.phonemes, ckpt.vocab, entry.lang)
    aln = (parse_alignment_file(entry.alignment, spec.num_frames, text, ckpt.vocab, cfg)
           if entry.alignment else uniform_alignment(spec.num_frames, len(text)))
    plan = plan_masks(aln, len(text), args.lam, seed=args.seed, text_masking=False)
    out = reconstruct_masked(spec, text, aln, plan, ckpt)
    mask = plan.frame_mask(spec.num_frames)
    l1 = float(np.abs(out.frames[mask] - spec.frames[mask]).mean()) if mask.any() else 0.0
    report = {"output_frames": out.num_frames,
              "masked_ranges": [list(r) for r in plan.speech_frame_ranges],
              "masked_l1": l1}
    _write_outputs(Path(args.out_dir), args.utt, out, report, args.preview_iters)


def cmd_clone(args):
    ckpt = Checkpoint.load(args.ckpt)
    dur = DurationModel.load(args.dur)
    cfg = ckpt.feature_cfg
    spec = compute_log_mel(load_audio(args.prompt_audio, cfg.sample_rate), cfg)
    prompt = encode_phonemes(_read_symbols(args.prompt_phonemes), ckpt.vocab)
    aln = (parse_alignment_file(args.prompt_alignment, spec.num_frames, prompt, ckpt.vocab, cfg)
           if args.prompt_alignment else uniform_alignment(spec.num_frames, len(prompt)))
    target = encode_phonemes(_read_symbols(args.target_phonemes), ckpt.vocab)
    result = clone_voice(CloneRequest(spec, prompt, aln, target), ckpt, dur)
    _write_outputs(Path(args.out_dir), "clone", result.spec, result.report(), args.preview_iters)


def cmd_edit(args):
    ckpt = Checkpoint.load(args.ckpt)
    dur = DurationModel.load(args.dur)
    cfg = ckpt.feature_cfg
    req_path = Path(args.request)
    req = json.loads(req_path.read_text())

    def resolve(p):
        return Path(p) if Path(p).is_absolute() else req_path.parent / p

    try:
        spec = compute_log_mel(load_audio(resolve(req["audio"]), cfg.sample_rate), cfg)
        text = encode_phonemes(req["phonemes"], ckpt.vocab)
        aln = (parse_alignment_file(resolve(req["alignment"]), spec.num_frames, text, ckpt.vocab, cfg)
               if req.get("alignment") else uniform_alignment(spec.num_frames, len(text)))
        new = encode_phonemes(req.get("new_phonemes", []), ckpt.vocab)
        edit = EditRequest(spec, text, aln, req["op"], tuple(req["span"]), new)
    except KeyError as exc:
        raise ValueError(f"edit request is missing field {exc.args[0]!r}") from exc
    result = edit_speech(edit, ckpt, dur, args.boundary_frames)
    _write_outputs(Path(args.out_dir), "edit", result.spec, result.report(), args.preview_iters)


def cmd_phoneme_map(args):
    ckpt = Checkpoint.load(args.ckpt)
    matrix = phoneme_similarity(ckpt, _read_symbols(args.rows), _read_symbols(args.cols))
    export_plot_data(matrix, args.out_csv, args.out_png, title="phoneme embedding cosine similarity")
    print(json.dumps({"nearest": matrix.nearest}))


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointmask", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("featurize", help="compute log-mel features and corpus statistics")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--sr", type=int, default=24000)
    s.add_argument("--n-mels", type=int, default=80)
    s.add_argument("--win-ms", type=float, default=50.0)
    s.add_argument("--hop-ms", type=float, default=12.5)
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("train", help="masked speech-text pretraining")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--resume")
    s.add_argument("--no-text-mask", action="store_true", help="mask speech only (ablation)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("train-duration", help="fit the phoneme duration predictor")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--vocab")
    s.add_argument("--steps", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train_duration)

    s = sub.add_parser("mask-plan", help="print a mask plan as JSON")
    s.add_argument("--frames", type=int, required=True)
    s.add_argument("--phonemes", type=int, required=True)
    s.add_argument("--lambda", dest="lam", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mean-span", type=int, default=3)
    s.set_defaults(func=cmd_mask_plan)

    s = sub.add_parser("reconstruct", help="mask and reconstruct a training utterance")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--utt", required=True)
    s.add_argument("--lambda", dest="lam", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--preview-iters", type=int, default=60)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("clone", help="prompt-based voice cloning")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dur", required=True)
    s.add_argument("--prompt-audio", required=True)
    s.add_argument("--prompt-phonemes", required=True)
    s.add_argument("--prompt-alignment")
    s.add_argument("--target-phonemes", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--preview-iters", type=int, default=60)
    s.set_defaults(func=cmd_clone)

    s = sub.add_parser("edit", help="insert, delete or replace phonemes in an utterance")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dur", required=True)
    s.add_argument("--request", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--boundary-frames", type=int, default=0)
    s.add_argument("--preview-iters", type=int, default=60)
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("phoneme-map", help="cross-lingual phoneme similarity heatmap")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--rows", required=True)
    s.add_argument("--cols", required=True)
    s.add_argument("--out-csv", required=True)
    s.add_argument("--out-png", required=True)
    s.set_defaults(func=cmd_phoneme_map)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
