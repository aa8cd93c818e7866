"""Command-line interface for the escalation detection toolkit."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from esk import embeddings as emb_mod
from esk import features as feat_mod
from esk import net as net_mod
from esk import svm as svm_mod
from esk import train as train_mod
from esk import vad as vad_mod
from esk.dataset_io import SynthSpec, load_manifest, read_wav, synth_dataset, write_wav
from esk.fusion import early_fuse, late_fuse_vote
from esk.metrics import evaluate
from esk.pipeline import (
    ExperimentConfig,
    load_config,
    read_predictions,
    run_pipeline,
    write_predictions,
    write_report,
)


def _cmd_synth(args) -> int:
    spec = SynthSpec(args.n_per_class, args.n_classes, args.duration, args.sample_rate, args.seed)
    manifest = synth_dataset(spec, args.out)
    print(f"wrote {len(manifest.entries)} clips and manifest.csv to {args.out}")
    return 0


def _cmd_vad(args) -> int:
    clip = read_wav(getattr(args, "in"))
    cfg = vad_mod.VadConfig(mode=args.mode, frame_ms=args.frame_ms, hangover_frames=args.hangover)
    decisions = vad_mod.classify_frames(clip, cfg)
    filtered = vad_mod.filter_voiced(clip, decisions, cfg.hangover_frames)
    write_wav(args.out, filtered)
    kept = int(decisions.flags.sum())
    print(f"kept {kept}/{decisions.flags.size} voiced frames -> {args.out}")
    return 0


def _cmd_features(args) -> int:
    clip = read_wav(getattr(args, "in"))
    feats = feat_mod.extract(clip, args.kind)
    feat_mod.save_features(args.out, feats)
    print(f"{feats.n_frames} x {feats.n_coeffs} {feats.kind} -> {args.out}")
    return 0


def _load_training_data(cfg: ExperimentConfig, manifest_path: Path):
    manifest = load_manifest(manifest_path)

    def split_feats(name):
        out = []
        for e in manifest.split(name):
            clip = read_wav(e.path)
            if cfg.get_bool("vad_enabled"):
                vad_cfg = cfg.vad_config()
                decisions = vad_mod.classify_frames(clip, vad_cfg)
                clip = vad_mod.filter_voiced(clip, decisions, vad_cfg.hangover_frames)
            out.append((feat_mod.extract(clip, cfg.get("feature_kind"), cfg.feature_config()), e.label))
        return out

    return manifest, split_feats("train"), split_feats("devel")


def _model_meta(cfg: ExperimentConfig) -> dict:
    return {
        "feature_kind": cfg.get("feature_kind"),
        "vad_enabled": cfg.get_bool("vad_enabled"),
        "vad": {
            "mode": cfg.get_int("vad_mode"),
            "frame_ms": cfg.get_int("vad_frame_ms"),
            "hangover_frames": cfg.get_int("vad_hangover"),
        },
        "features": {
            "win_len_s": cfg.get_float("feat_win_len_s"),
            "step_s": cfg.get_float("feat_step_s"),
            "n_mels": cfg.get_int("feat_n_mels"),
            "fmin_hz": cfg.get_float("feat_fmin_hz"),
            "fmax_hz": cfg.get_float("feat_fmax_hz"),
            "preemph": cfg.get_float("feat_preemph"),
            "n_fft": cfg.get_int("feat_n_fft"),
            "n_mfcc": cfg.get_int("feat_n_mfcc"),
        },
    }


def _cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    manifest_path = cfg.path("emotion_manifest")
    if manifest_path is None:
        print("config needs emotion_manifest", file=sys.stderr)
        return 2
    manifest, train_set, devel_set = _load_training_data(cfg, manifest_path)
    counts = np.bincount([y for _, y in train_set], minlength=manifest.n_classes)
    net_cfg = net_mod.make_config(
        cfg.get("net_preset"),
        embed_dim=cfg.get_int("embed_dim"),
        n_classes=manifest.n_classes,
        label_smoothing=cfg.get_float("label_smoothing"),
        seed=cfg.seed,
    )
    model = net_mod.init_model(net_cfg)
    model.meta.update(_model_meta(cfg))
    best, history = train_mod.train(
        model, train_set, devel_set, cfg.train_config("pretrain", manifest.n_classes, counts)
    )
    net_mod.save_model(args.out, best)
    print(
        f"pretrained for {history.stopped_epoch} epochs "
        f"(best epoch {history.best_epoch}, devel UAR "
        f"{history.devel_uar[history.best_epoch - 1]:.3f}) -> {args.out}"
    )
    return 0


def _cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    manifest_path = cfg.path("escalation_manifest")
    if manifest_path is None:
        print("config needs escalation_manifest", file=sys.stderr)
        return 2
    manifest, train_set, devel_set = _load_training_data(cfg, manifest_path)
    counts = np.bincount([y for _, y in train_set], minlength=manifest.n_classes)
    if args.init:
        model = net_mod.swap_head(net_mod.load_model(args.init), manifest.n_classes, seed=cfg.seed)
    else:
        net_cfg = net_mod.make_config(
            cfg.get("net_preset"),
            embed_dim=cfg.get_int("embed_dim"),
            n_classes=manifest.n_classes,
            label_smoothing=cfg.get_float("label_smoothing"),
            seed=cfg.seed,
        )
        model = net_mod.init_model(net_cfg)
        model.meta.update(_model_meta(cfg))
    best, history = train_mod.train(
        model, train_set, devel_set, cfg.train_config("finetune", manifest.n_classes, counts)
    )
    net_mod.save_model(args.out, best)
    print(
        f"fine-tuned for {history.stopped_epoch} epochs "
        f"(best epoch {history.best_epoch}, devel UAR "
        f"{history.devel_uar[history.best_epoch - 1]:.3f}) -> {args.out}"
    )
    return 0


def _clip_features_from_meta(model: net_mod.NetModel, wav_path: Path) -> feat_mod.FeatureMatrix:
    meta = model.meta
    clip = read_wav(wav_path)
    if meta.get("vad_enabled", True):
        vad_meta = meta.get("vad", {})
        vad_cfg = vad_mod.VadConfig(
            mode=vad_meta.get("mode", 2),
            frame_ms=vad_meta.get("frame_ms", 30),
            hangover_frames=vad_meta.get("hangover_frames", 2),
        )
        decisions = vad_mod.classify_frames(clip, vad_cfg)
        clip = vad_mod.filter_voiced(clip, decisions, vad_cfg.hangover_frames)
    feat_cfg = feat_mod.FeatureConfig(**meta.get("features", {}))
    return feat_mod.extract(clip, meta.get("feature_kind", "mfcc"), feat_cfg)


def _cmd_embed(args) -> int:
    model = net_mod.load_model(args.model)
    manifest = load_manifest(args.manifest)
    vectors = [
        emb_mod.extract_embedding(
            model, _clip_features_from_meta(model, e.path), e.utterance_id
        )
        for e in manifest.entries
    ]
    if args.binary:
        emb_mod.save_embeddings_binary(args.out, vectors)
    else:
        emb_mod.save_embeddings_csv(args.out, vectors)
    print(f"{len(vectors)} embeddings of dim {vectors[0].dim} -> {args.out}")
    return 0


def _cmd_svm_train(args) -> int:
    table = emb_mod.load_embeddings_csv(args.embeddings, source="acoustic")
    manifest = load_manifest(args.manifest)
    entries = manifest.split(args.split)
    missing = [e.utterance_id for e in entries if e.utterance_id not in table]
    if missing:
        print(f"embeddings missing for ids {missing[:5]}", file=sys.stderr)
        return 2
    X = np.stack([table[e.utterance_id].values for e in entries])
    y = np.array([e.label for e in entries])
    model = svm_mod.svm_train(X, y, C=args.C, seed=args.seed, standardize=args.standardize)
    svm_mod.save_svm(args.out, model)
    print(f"trained {model.n_classes}-class SVM on {len(y)} embeddings -> {args.out}")
    return 0


def _cmd_predict(args) -> int:
    table = emb_mod.load_embeddings_csv(args.embeddings, source="acoustic")
    model = svm_mod.load_svm(args.model)
    manifest = load_manifest(args.manifest)
    entries = manifest.split(args.split) if args.split else manifest.entries
    pairs = []
    for e in entries:
        label, _ = svm_mod.svm_predict(model, table[e.utterance_id].values)
        pairs.append((e.utterance_id, label))
    write_predictions(Path(args.out), pairs, "-")
    print(f"{len(pairs)} predictions -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    manifest = load_manifest(args.truth)
    preds = read_predictions(args.pred)
    entries = [e for e in manifest.entries if e.utterance_id in preds]
    if not entries:
        print("no overlapping utterances between truth and predictions", file=sys.stderr)
        return 2
    report = evaluate(
        [e.label for e in entries],
        [preds[e.utterance_id] for e in entries],
        args.classes,
    )
    write_report(Path(args.report), report, "-")
    print(
        f"uar={report.uar:.4f} macro_precision={report.macro_precision:.4f} "
        f"macro_f1={report.macro_f1:.4f} -> {args.report}"
    )
    return 0


def _cmd_fuse(args) -> int:
    if args.mode == "vote":
        if not args.pred or len(args.pred) < 2:
            print("vote fusion needs at least two --pred files", file=sys.stderr)
            return 2
        members = [read_predictions(p) for p in args.pred]
        ids = list(members[0])
        for i, m in enumerate(members[1:], start=2):
            if set(m) != set(ids):
                print(f"prediction file {i} covers different utterances", file=sys.stderr)
                return 2
        pairs = [(utt, late_fuse_vote([m[utt] for m in members])) for utt in ids]
        write_predictions(Path(args.out), pairs, "-")
        print(f"vote-fused {len(members)} systems -> {args.out}")
        return 0
    if not args.embeddings or len(args.embeddings) < 2:
        print(f"{args.mode} fusion needs at least two --embeddings files", file=sys.stderr)
        return 2
    systems = [emb_mod.load_embeddings_csv(p, source="acoustic") for p in args.embeddings]
    fused = early_fuse(systems, args.mode)
    first = systems[0]
    ordered = [fused[utt] for utt in first]
    emb_mod.save_embeddings_csv(args.out, ordered)
    print(f"{args.mode}-fused {len(systems)} systems (dim {ordered[0].dim}) -> {args.out}")
    return 0


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.values["out_dir"] = str(Path(args.out).absolute())
    result = run_pipeline(cfg, force=args.force)
    stages = ", ".join(result.executed) if result.executed else "none (all cached)"
    print(f"stages executed: {stages}")
    print(
        f"uar={result.report.uar:.4f} "
        f"macro_precision={result.report.macro_precision:.4f} "
        f"macro_f1={result.report.macro_f1:.4f}"
    )
    print(f"report: {result.artifacts['report']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=5)
    p.add_argument("--n-classes", type=int, default=3)
    p.add_argument("--duration", type=float, default=1.0)
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("vad", help="remove unvoiced segments from a WAV file")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", type=int, default=2)
    p.add_argument("--frame-ms", type=int, default=30)
    p.add_argument("--hangover", type=int, default=2)
    p.set_defaults(fn=_cmd_vad)

    p = sub.add_parser("features", help="extract features from a WAV file")
    p.add_argument("--in", required=True)
    p.add_argument("--kind", choices=["mfcc", "logfbank"], default="mfcc")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_features)

    p = sub.add_parser("pretrain", help="train the network on the emotion task")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune (or train from scratch) on escalation")
    p.add_argument("--config", required=True)
    p.add_argument("--init", help="pretrained model to start from")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_finetune)

    p = sub.add_parser("embed", help="extract acoustic embeddings for a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--binary", action="store_true", help="write the binary bulk format")
    p.set_defaults(fn=_cmd_embed)

    p = sub.add_parser("svm-train", help="train the SVM backend on embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_svm_train)

    p = sub.add_parser("predict", help="predict labels with a trained SVM")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("eval", help="score predictions against a manifest")
    p.add_argument("--truth", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("fuse", help="fuse predictions (vote) or embeddings (concat/mean)")
    p.add_argument("--mode", choices=["vote", "concat", "mean"], required=True)
    p.add_argument("--pred", nargs="*", help="prediction CSVs, priority order")
    p.add_argument("--embeddings", nargs="*", help="embedding CSVs, member order")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_fuse)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override the config out_dir")
    p.add_argument("--force", action="store_true", help="ignore cached stage outputs")
    p.set_defaults(fn=_cmd_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
