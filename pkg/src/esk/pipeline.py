"""Experiment pipeline: features -> (pretrain) -> fine-tune -> embed ->
SVM -> predict -> (vote fusion) -> evaluate.

Driven by a flat `key = value` config file. Stages are skipped when their
outputs already exist, are newer than their inputs, and were produced
under the same effective-config hash (recorded in a stamp file next to
the outputs). The ESK_SEED environment variable overrides the config
seed.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from esk import embeddings as emb_mod
from esk import features as feat_mod
from esk import net as net_mod
from esk import svm as svm_mod
from esk import train as train_mod
from esk import vad as vad_mod
from esk.dataset_io import Manifest, load_manifest, read_wav
from esk.fusion import late_fuse_vote
from esk.metrics import EvalReport, evaluate

STAGE_ORDER = ("features", "pretrain", "finetune", "embed", "svm", "predict", "fuse", "eval")

DEFAULTS: dict[str, str] = {
    "seed": "0",
    "feature_kind": "mfcc",
    "vad_enabled": "true",
    "vad_mode": "2",
    "vad_frame_ms": "30",
    "vad_hangover": "2",
    "feat_win_len_s": "0.025",
    "feat_step_s": "0.01",
    "feat_n_mels": "256",
    "feat_fmin_hz": "50",
    "feat_fmax_hz": "8000",
    "feat_preemph": "0.97",
    "feat_n_fft": "512",
    "feat_n_mfcc": "40",
    "net_preset": "resnet18",
    "embed_dim": "512",
    "label_smoothing": "0.0",
    "pretrain_lr": "0.001",
    "pretrain_weight_decay": "1e-4",
    "pretrain_momentum": "0.8",
    "pretrain_max_epochs": "50",
    "pretrain_patience": "5",
    "pretrain_batch_size": "16",
    "finetune_lr": "0.001",
    "finetune_weight_decay": "1e-4",
    "finetune_momentum": "0.0",
    "finetune_max_epochs": "300",
    "finetune_patience": "5",
    "finetune_batch_size": "16",
    "svm_c": "1.0",
    "svm_standardize": "false",
    "eval_split": "devel",
    "emotion_manifest": "",
    "escalation_manifest": "",
    "text_embeddings": "",
    "fusion_mode": "",
    "fusion_preds": "",
    "out_dir": "",
}

# keys that first become relevant at each stage; a stage's cache hash covers
# its own group and every earlier group, so upstream edits cascade
_STAGE_KEYS = {
    "features": [
        "feature_kind", "vad_enabled", "vad_mode", "vad_frame_ms", "vad_hangover",
        "feat_win_len_s", "feat_step_s", "feat_n_mels", "feat_fmin_hz", "feat_fmax_hz",
        "feat_preemph", "feat_n_fft", "feat_n_mfcc",
        "emotion_manifest", "escalation_manifest",
    ],
    "pretrain": [
        "seed", "net_preset", "embed_dim", "label_smoothing",
        "pretrain_lr", "pretrain_weight_decay", "pretrain_momentum",
        "pretrain_max_epochs", "pretrain_patience", "pretrain_batch_size",
    ],
    "finetune": [
        "finetune_lr", "finetune_weight_decay", "finetune_momentum",
        "finetune_max_epochs", "finetune_patience", "finetune_batch_size",
    ],
    "embed": ["text_embeddings"],
    "svm": ["svm_c", "svm_standardize"],
    "predict": ["eval_split"],
    "fuse": ["fusion_mode", "fusion_preds"],
    "eval": [],
}


class PipelineError(RuntimeError):
    """A stage failed; carries the stage name and the cause."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat `key = value` lines; '#' starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


@dataclass
class ExperimentConfig:
    values: dict[str, str]
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        unknown = set(self.values) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged = dict(DEFAULTS)
        merged.update(self.values)
        if "ESK_SEED" in os.environ:
            merged["seed"] = os.environ["ESK_SEED"]
        self.values = merged

    def get(self, key: str) -> str:
        return self.values[key]

    def get_int(self, key: str) -> int:
        return int(self.values[key])

    def get_float(self, key: str) -> float:
        return float(self.values[key])

    def get_bool(self, key: str) -> bool:
        v = self.values[key].lower()
        if v in ("true", "1", "yes"):
            return True
        if v in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key} has non-boolean value {v!r}")

    def path(self, key: str) -> Path | None:
        v = self.values[key]
        if not v:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_dir(self) -> Path:
        p = self.path("out_dir")
        if p is None:
            raise ValueError("config needs out_dir")
        return p

    @property
    def seed(self) -> int:
        return self.get_int("seed")

    def vad_config(self) -> vad_mod.VadConfig:
        return vad_mod.VadConfig(
            mode=self.get_int("vad_mode"),
            frame_ms=self.get_int("vad_frame_ms"),
            hangover_frames=self.get_int("vad_hangover"),
        )

    def feature_config(self) -> feat_mod.FeatureConfig:
        return feat_mod.FeatureConfig(
            win_len_s=self.get_float("feat_win_len_s"),
            step_s=self.get_float("feat_step_s"),
            n_mels=self.get_int("feat_n_mels"),
            fmin_hz=self.get_float("feat_fmin_hz"),
            fmax_hz=self.get_float("feat_fmax_hz"),
            preemph=self.get_float("feat_preemph"),
            n_fft=self.get_int("feat_n_fft"),
            n_mfcc=self.get_int("feat_n_mfcc"),
        )

    def train_config(self, phase: str, n_classes: int, counts) -> train_mod.TrainConfig:
        weights = tuple(train_mod.class_weights_from_counts(counts))
        return train_mod.TrainConfig(
            lr=self.get_float(f"{phase}_lr"),
            weight_decay=self.get_float(f"{phase}_weight_decay"),
            momentum=self.get_float(f"{phase}_momentum"),
            max_epochs=self.get_int(f"{phase}_max_epochs"),
            early_stop_patience=self.get_int(f"{phase}_patience"),
            batch_size=self.get_int(f"{phase}_batch_size"),
            class_weights=weights,
            seed=self.seed,
        )

    def semantic_items(self) -> list[tuple[str, str]]:
        """Config items that affect results (out_dir excluded)."""
        return sorted((k, v) for k, v in self.values.items() if k != "out_dir")

    def config_hash(self, upto_stage: str | None = None) -> str:
        keys: list[str] = []
        for stage in STAGE_ORDER:
            keys.extend(_STAGE_KEYS[stage])
            if stage == upto_stage:
                break
        if upto_stage is None:
            keys = [k for k, _ in self.semantic_items()]
        payload = "\n".join(f"{k}={self.values[k]}" for k in sorted(set(keys)))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return ExperimentConfig(parse_config_text(path.read_text(encoding="utf-8")), path.parent)


@dataclass
class RunResult:
    report: EvalReport
    executed: list[str]
    artifacts: dict[str, Path]


def _mtime(path: Path) -> float:
    return path.stat().st_mtime


def _stage_fresh(stamp: Path, stage_hash: str, inputs: list[Path], outputs: list[Path]) -> bool:
    if not outputs or not all(p.exists() for p in outputs):
        return False
    if not stamp.exists():
        return False
    try:
        recorded = json.loads(stamp.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return False
    if recorded.get("config_hash") != stage_hash:
        return False
    newest_input = max((_mtime(p) for p in inputs if p.exists()), default=0.0)
    oldest_output = min(_mtime(p) for p in outputs)
    return oldest_output >= newest_input


def _extract_one(wav_path: Path, cfg: ExperimentConfig) -> feat_mod.FeatureMatrix:
    clip = read_wav(wav_path)
    if cfg.get_bool("vad_enabled"):
        vad_cfg = cfg.vad_config()
        decisions = vad_mod.classify_frames(clip, vad_cfg)
        clip = vad_mod.filter_voiced(clip, decisions, vad_cfg.hangover_frames)
    return feat_mod.extract(clip, cfg.get("feature_kind"), cfg.feature_config())


def _training_sets(manifest: Manifest, feat_dir: Path):
    def load_split(name: str):
        return [
            (feat_mod.load_features(feat_dir / f"{e.utterance_id}.feat"), e.label)
            for e in manifest.split(name)
        ]

    return load_split("train"), load_split("devel")


def write_predictions(path: Path, pairs: list[tuple[str, int]], config_hash: str) -> None:
    lines = [f"# config_hash={config_hash}", "id,label"]
    lines += [f"{utt_id},{label}" for utt_id, label in pairs]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_predictions(path: str | Path) -> dict[str, int]:
    lines = [
        ln for ln in Path(path).read_text(encoding="utf-8").splitlines()
        if ln and not ln.startswith("#")
    ]
    if not lines or lines[0] != "id,label":
        raise ValueError(f"{path}: expected 'id,label' header")
    out: dict[str, int] = {}
    for line in lines[1:]:
        utt_id, _, label = line.partition(",")
        if utt_id in out:
            raise ValueError(f"{path}: duplicate id {utt_id!r}")
        out[utt_id] = int(label)
    return out


def write_report(path: Path, report: EvalReport, config_hash: str) -> None:
    lines = [f"# config_hash={config_hash}"]
    lines.append(f"uar,{report.uar!r}")
    lines.append(f"macro_precision,{report.macro_precision!r}")
    lines.append(f"macro_f1,{report.macro_f1!r}")
    for k, row in enumerate(report.confusion):
        lines.append(f"confusion_{k}," + ",".join(str(int(c)) for c in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_pipeline(cfg: ExperimentConfig, force: bool = False) -> RunResult:
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp_dir = out_dir / ".stamps"
    stamp_dir.mkdir(exist_ok=True)
    (out_dir / "config.resolved").write_text(
        "\n".join(f"{k} = {v}" for k, v in cfg.semantic_items()) + "\n", encoding="utf-8"
    )

    executed: list[str] = []
    artifacts: dict[str, Path] = {}

    def run_stage(name: str, inputs: list[Path], outputs: list[Path], fn) -> None:
        stage_hash = cfg.config_hash(upto_stage=name)
        stamp = stamp_dir / f"{name}.json"
        if not force and _stage_fresh(stamp, stage_hash, inputs, outputs):
            return
        try:
            for parent in {p.parent for p in outputs}:
                parent.mkdir(parents=True, exist_ok=True)
            fn()
        except Exception as exc:
            raise PipelineError(name, exc) from exc
        stamp.write_text(json.dumps({"config_hash": stage_hash}), encoding="utf-8")
        executed.append(name)

    escalation_path = cfg.path("escalation_manifest")
    if escalation_path is None:
        raise ValueError("config needs escalation_manifest")
    escalation = load_manifest(escalation_path)
    emotion_path = cfg.path("emotion_manifest")
    emotion = load_manifest(emotion_path) if emotion_path else None

    # ---- features ----------------------------------------------------------
    feature_jobs: list[tuple[Manifest, Path, Path]] = [
        (escalation, escalation_path, out_dir / "features" / "escalation")
    ]
    if emotion is not None:
        feature_jobs.append((emotion, emotion_path, out_dir / "features" / "emotion"))

    feat_inputs = [m_path for _, m_path, _ in feature_jobs]
    feat_inputs += [e.path for m, _, _ in feature_jobs for e in m.entries]
    feat_outputs = [
        d / f"{e.utterance_id}.feat" for m, _, d in feature_jobs for e in m.entries
    ]

    def do_features() -> None:
        for manifest, _, feat_dir in feature_jobs:
            for entry in manifest.entries:
                feat_mod.save_features(
                    feat_dir / f"{entry.utterance_id}.feat", _extract_one(entry.path, cfg)
                )

    run_stage("features", feat_inputs, feat_outputs, do_features)

    model_meta = {
        "feature_kind": cfg.get("feature_kind"),
        "vad_enabled": cfg.get_bool("vad_enabled"),
        "vad": {"mode": cfg.get_int("vad_mode"), "frame_ms": cfg.get_int("vad_frame_ms"),
                "hangover_frames": cfg.get_int("vad_hangover")},
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

    # ---- pretrain ----------------------------------------------------------
    pretrained_path = out_dir / "models" / "pretrained.eskm"
    if emotion is not None:
        def do_pretrain() -> None:
            train_set, devel_set = _training_sets(emotion, out_dir / "features" / "emotion")
            counts = np.bincount(
                [y for _, y in train_set], minlength=emotion.n_classes
            )
            net_cfg = net_mod.make_config(
                cfg.get("net_preset"),
                embed_dim=cfg.get_int("embed_dim"),
                n_classes=emotion.n_classes,
                label_smoothing=cfg.get_float("label_smoothing"),
                seed=cfg.seed,
            )
            model = net_mod.init_model(net_cfg)
            model.meta.update(model_meta)
            best, _ = train_mod.train(
                model, train_set, devel_set, cfg.train_config("pretrain", emotion.n_classes, counts)
            )
            net_mod.save_model(pretrained_path, best)

        run_stage("pretrain", feat_outputs, [pretrained_path], do_pretrain)
        artifacts["pretrained"] = pretrained_path

    # ---- finetune ----------------------------------------------------------
    finetuned_path = out_dir / "models" / "finetuned.eskm"

    def do_finetune() -> None:
        train_set, devel_set = _training_sets(escalation, out_dir / "features" / "escalation")
        counts = np.bincount([y for _, y in train_set], minlength=escalation.n_classes)
        if emotion is not None:
            model = net_mod.swap_head(
                net_mod.load_model(pretrained_path), escalation.n_classes, seed=cfg.seed
            )
        else:
            net_cfg = net_mod.make_config(
                cfg.get("net_preset"),
                embed_dim=cfg.get_int("embed_dim"),
                n_classes=escalation.n_classes,
                label_smoothing=cfg.get_float("label_smoothing"),
                seed=cfg.seed,
            )
            model = net_mod.init_model(net_cfg)
            model.meta.update(model_meta)
        best, _ = train_mod.train(
            model, train_set, devel_set,
            cfg.train_config("finetune", escalation.n_classes, counts),
        )
        net_mod.save_model(finetuned_path, best)

    finetune_inputs = list(feat_outputs)
    if emotion is not None:
        finetune_inputs.append(pretrained_path)
    run_stage("finetune", finetune_inputs, [finetuned_path], do_finetune)
    artifacts["model"] = finetuned_path

    # ---- embed -------------------------------------------------------------
    acoustic_path = out_dir / "embeddings" / "acoustic.csv"
    text_path = cfg.path("text_embeddings")
    fused_path = out_dir / "embeddings" / "fused.csv"
    embed_outputs = [acoustic_path] + ([fused_path] if text_path else [])

    def do_embed() -> None:
        model = net_mod.load_model(finetuned_path)
        feat_dir = out_dir / "features" / "escalation"
        vectors = [
            emb_mod.extract_embedding(
                model, feat_mod.load_features(feat_dir / f"{e.utterance_id}.feat"),
                e.utterance_id,
            )
            for e in escalation.entries
        ]
        emb_mod.save_embeddings_csv(acoustic_path, vectors)
        if text_path:
            textual = emb_mod.load_text_embeddings(text_path, expected_dim=None)
            missing = [v.utterance_id for v in vectors if v.utterance_id not in textual]
            if missing:
                raise ValueError(f"missing textual embeddings for ids {missing[:5]}")
            fused = [emb_mod.fuse_concat(v, textual[v.utterance_id]) for v in vectors]
            emb_mod.save_embeddings_csv(fused_path, fused)

    embed_inputs = [finetuned_path] + ([text_path] if text_path else [])
    run_stage("embed", embed_inputs, embed_outputs, do_embed)
    artifacts["embeddings"] = embed_outputs[-1]

    # ---- svm ----------------------------------------------------------------
    svm_path = out_dir / "models" / "svm.esks"
    embedding_source = fused_path if text_path else acoustic_path

    def do_svm() -> None:
        table = emb_mod.load_embeddings_csv(embedding_source, source="acoustic")
        train_entries = escalation.split("train")
        X = np.stack([table[e.utterance_id].values for e in train_entries])
        y = np.array([e.label for e in train_entries])
        model = svm_mod.svm_train(
            X, y, C=cfg.get_float("svm_c"), seed=cfg.seed,
            standardize=cfg.get_bool("svm_standardize"),
        )
        svm_mod.save_svm(svm_path, model)

    run_stage("svm", [embedding_source], [svm_path], do_svm)
    artifacts["svm"] = svm_path

    # ---- predict -------------------------------------------------------------
    eval_split = cfg.get("eval_split")
    pred_path = out_dir / "predictions" / f"{eval_split}.csv"

    def do_predict() -> None:
        table = emb_mod.load_embeddings_csv(embedding_source, source="acoustic")
        model = svm_mod.load_svm(svm_path)
        pairs = []
        for entry in escalation.split(eval_split):
            label, _ = svm_mod.svm_predict(model, table[entry.utterance_id].values)
            pairs.append((entry.utterance_id, label))
        write_predictions(pred_path, pairs, cfg.config_hash())

    run_stage("predict", [svm_path, embedding_source], [pred_path], do_predict)
    artifacts["predictions"] = pred_path

    # ---- optional late fusion over prior runs' predictions -------------------
    eval_pred_path = pred_path
    if cfg.get("fusion_mode"):
        if cfg.get("fusion_mode") != "vote":
            raise ValueError("only vote fusion is supported inside the pipeline")
        member_paths = [pred_path] + [
            (cfg.base_dir / p if not Path(p).is_absolute() else Path(p))
            for p in cfg.get("fusion_preds").split(",") if p
        ]
        if len(member_paths) < 2:
            raise ValueError("fusion_preds must list at least one other prediction file")
        fused_pred_path = out_dir / "predictions" / "fused.csv"

        def do_fuse() -> None:
            members = [read_predictions(p) for p in member_paths]
            ids = list(members[0])
            for m in members[1:]:
                if set(m) != set(ids):
                    raise ValueError("fusion members cover different utterances")
            pairs = [(i, late_fuse_vote([m[i] for m in members])) for i in ids]
            write_predictions(fused_pred_path, pairs, cfg.config_hash())

        run_stage("fuse", member_paths, [fused_pred_path], do_fuse)
        eval_pred_path = fused_pred_path
        artifacts["fused_predictions"] = fused_pred_path

    # ---- eval -----------------------------------------------------------------
    report_path = out_dir / "report.csv"

    def do_eval() -> None:
        preds = read_predictions(eval_pred_path)
        entries = escalation.split(eval_split)
        y_true = [e.label for e in entries]
        y_pred = [preds[e.utterance_id] for e in entries]
        report = evaluate(y_true, y_pred, escalation.n_classes)
        write_report(report_path, report, cfg.config_hash())

    run_stage("eval", [eval_pred_path], [report_path], do_eval)
    artifacts["report"] = report_path

    preds = read_predictions(eval_pred_path)
    entries = escalation.split(eval_split)
    report = evaluate(
        [e.label for e in entries],
        [preds[e.utterance_id] for e in entries],
        escalation.n_classes,
    )
    return RunResult(report, executed, artifacts)
