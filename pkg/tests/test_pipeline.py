from __future__ import annotations

import os
import time

import numpy as np
import pytest

from esk.dataset_io import SynthSpec, synth_dataset
from esk.pipeline import (
    ExperimentConfig,
    PipelineError,
    load_config,
    parse_config_text,
    read_predictions,
    run_pipeline,
    write_predictions,
)

TINY_PIPELINE = """
# desk-scale pipeline settings
escalation_manifest = {manifest}
out_dir = {out_dir}
seed = 3
net_preset = test
embed_dim = 8
feat_n_mels = 24
feat_n_mfcc = 13
pretrain_max_epochs = 2
finetune_max_epochs = 3
finetune_batch_size = 8
svm_c = 1.0
"""


@pytest.fixture(scope="module")
def synth_manifest(tmp_path_factory):
    data_dir = tmp_path_factory.mktemp("synth")
    synth_dataset(SynthSpec(10, 3, 0.5, 16000, 42), data_dir)
    return data_dir / "manifest.csv"


def write_config(tmp_path, manifest, out_dir, extra=""):
    text = TINY_PIPELINE.format(manifest=manifest, out_dir=out_dir) + extra
    cfg_path = tmp_path / "exp.cfg"
    cfg_path.write_text(text)
    return cfg_path


class TestConfigParsing:
    def test_key_value_and_comments(self):
        values = parse_config_text("a = 1\n# comment\nb=two # trailing\n\n")
        assert values == {"a": "1", "b": "two"}

    def test_malformed_line(self):
        with pytest.raises(ValueError, match="key = value"):
            parse_config_text("just words\n")

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            ExperimentConfig({"not_a_key": "1"})

    def test_defaults_follow_training_setup(self):
        cfg = ExperimentConfig({})
        assert cfg.get("feature_kind") == "mfcc"
        assert cfg.get_int("vad_mode") == 2
        assert cfg.get_float("feat_preemph") == 0.97
        assert cfg.get_int("feat_n_mels") == 256
        assert cfg.get_float("pretrain_lr") == 0.001
        assert cfg.get_float("pretrain_momentum") == 0.8
        assert cfg.get_int("pretrain_max_epochs") == 50
        assert cfg.get_int("pretrain_patience") == 5
        assert cfg.get_float("finetune_momentum") == 0.0
        assert cfg.get_int("finetune_max_epochs") == 300
        assert cfg.get_int("embed_dim") == 512

    def test_esk_seed_env_override(self, monkeypatch):
        monkeypatch.setenv("ESK_SEED", "777")
        cfg = ExperimentConfig({"seed": "3"})
        assert cfg.seed == 777

    def test_out_dir_excluded_from_hash(self):
        a = ExperimentConfig({"out_dir": "/tmp/a", "seed": "1"})
        b = ExperimentConfig({"out_dir": "/tmp/b", "seed": "1"})
        assert a.config_hash() == b.config_hash()
        c = ExperimentConfig({"out_dir": "/tmp/a", "seed": "2"})
        assert a.config_hash() != c.config_hash()


class TestRunPipeline:
    def test_full_run_emits_report(self, tmp_path, synth_manifest):
        cfg = load_config(write_config(tmp_path, synth_manifest, tmp_path / "run"))
        result = run_pipeline(cfg)
        assert 0.0 <= result.report.uar <= 1.0
        assert result.executed == ["features", "finetune", "embed", "svm", "predict", "eval"]
        for name in ("report", "model", "svm", "predictions"):
            assert result.artifacts[name].exists()
        report_text = result.artifacts["report"].read_text()
        assert report_text.startswith("# config_hash=")

    def test_rerun_uses_cache(self, tmp_path, synth_manifest):
        cfg_path = write_config(tmp_path, synth_manifest, tmp_path / "run")
        run_pipeline(load_config(cfg_path))
        second = run_pipeline(load_config(cfg_path))
        assert second.executed == []

    def test_touched_manifest_reruns_downstream(self, tmp_path, synth_manifest):
        cfg_path = write_config(tmp_path, synth_manifest, tmp_path / "run")
        run_pipeline(load_config(cfg_path))
        future = time.time() + 5
        os.utime(synth_manifest, (future, future))
        result = run_pipeline(load_config(cfg_path))
        assert result.executed == ["features", "finetune", "embed", "svm", "predict", "eval"]

    def test_config_change_reruns_affected_stages(self, tmp_path, synth_manifest):
        cfg_path = write_config(tmp_path, synth_manifest, tmp_path / "run")
        run_pipeline(load_config(cfg_path))
        cfg_path2 = write_config(tmp_path, synth_manifest, tmp_path / "run", extra="svm_c = 2.0\n")
        result = run_pipeline(load_config(cfg_path2))
        assert result.executed == ["svm", "predict", "eval"]

    def test_stage_error_names_stage(self, tmp_path, synth_manifest):
        cfg_path = write_config(
            tmp_path, synth_manifest, tmp_path / "run",
            extra="text_embeddings = missing.csv\n",
        )
        with pytest.raises(PipelineError, match="embed"):
            run_pipeline(load_config(cfg_path))

    def test_textual_fusion_path(self, tmp_path, synth_manifest):
        from esk.dataset_io import load_manifest

        manifest = load_manifest(synth_manifest)
        rows = ["id,4"]
        rng = np.random.default_rng(0)
        for e in manifest.entries:
            vals = ",".join(repr(float(v)) for v in rng.normal(size=4))
            rows.append(f"{e.utterance_id},{vals}")
        text_path = tmp_path / "text.csv"
        text_path.write_text("\n".join(rows) + "\n")
        cfg_path = write_config(
            tmp_path, synth_manifest, tmp_path / "run",
            extra=f"text_embeddings = {text_path}\n",
        )
        result = run_pipeline(load_config(cfg_path))
        assert (result.artifacts["embeddings"].parent / "fused.csv").exists()
        from esk.embeddings import load_embeddings_csv

        fused = load_embeddings_csv(result.artifacts["embeddings"], source="fused")
        assert next(iter(fused.values())).dim == 8 + 4

    def test_vote_fusion_stage(self, tmp_path, synth_manifest):
        base_cfg = write_config(tmp_path, synth_manifest, tmp_path / "base")
        base = run_pipeline(load_config(base_cfg))
        preds = read_predictions(base.artifacts["predictions"])
        flipped = [(u, (v + 1) % 3) for u, v in preds.items()]
        write_predictions(tmp_path / "other1.csv", flipped, "-")
        write_predictions(tmp_path / "other2.csv", list(preds.items()), "-")
        fuse_cfg = write_config(
            tmp_path, synth_manifest, tmp_path / "fused",
            extra=f"fusion_mode = vote\nfusion_preds = {tmp_path / 'other1.csv'},{tmp_path / 'other2.csv'}\n",
        )
        result = run_pipeline(load_config(fuse_cfg))
        fused = read_predictions(result.artifacts["fused_predictions"])
        # two of three members agree on the original labels everywhere
        assert fused == preds


class TestPredictionsFile:
    def test_round_trip(self, tmp_path):
        write_predictions(tmp_path / "p.csv", [("a", 0), ("b", 2)], "abc123")
        loaded = read_predictions(tmp_path / "p.csv")
        assert loaded == {"a": 0, "b": 2}
        assert (tmp_path / "p.csv").read_text().startswith("# config_hash=abc123")

    def test_duplicate_rejected(self, tmp_path):
        (tmp_path / "p.csv").write_text("id,label\na,0\na,1\n")
        with pytest.raises(ValueError, match="duplicate"):
            read_predictions(tmp_path / "p.csv")
