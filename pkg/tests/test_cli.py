import json
import subprocess
import sys

import jsonschema
import pytest

from anomaly_expert.cli import main
from anomaly_expert.pipeline import ConfigError, flatten_toml, report_schema, resolve_config

SMALL = [
    "--set", "synth.n_classes=2",
    "--set", "synth.images_per_class=20",
    "--set", "synth.g=4",
    "--set", "synth.d_enc=8",
    "--set", "synth.patch_size=2",
    "--set", "model.d=8",
    "--set", "model.n_heads=2",
    "--set", "train.batch_size=8",
]


def run_json(capsys, argv):
    code = main(argv + ["--json"])
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


@pytest.fixture
def trained(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), *SMALL]) == 0
    assert main(["train", "--manifest", str(data / "train.jsonl"), "--out", str(tmp_path / "run"), *SMALL]) == 0
    capsys.readouterr()
    return data, tmp_path / "run" / "checkpoint.aovc"


class TestConfig:
    def test_defaults_apply_desk_preset(self):
        cfg = resolve_config()
        assert cfg.train.lr0 == 1e-2 and cfg.train.epochs == 2 and cfg.train.batch_size == 32
        assert resolve_config(preset=False).train.lr0 == 1e-4

    def test_seed_is_shared(self):
        cfg = resolve_config(seed=9)
        assert cfg.synth.seed == cfg.model.seed == cfg.train.seed == 9

    def test_model_follows_synth_dims(self):
        cfg = resolve_config({"synth.g": 4, "synth.d_enc": 16})
        assert (cfg.model.g, cfg.model.d_enc) == (4, 16)

    def test_string_values_coerced(self):
        cfg = resolve_config({"tau": "0.2", "lookback_bias": "false", "restart_period": "none"})
        assert cfg.model.tau == 0.2 and cfg.model.lookback_bias is False and cfg.train.restart_period is None

    @pytest.mark.parametrize("flat", [{"nope": 1}, {"train.nope": 1}, {"tau": "abc"}, {"g": 4}, {"train.lr0": -1}])
    def test_rejected(self, flat):
        with pytest.raises(ConfigError):
            resolve_config(flat)

    def test_flatten_toml(self):
        assert flatten_toml({"seed": 1, "train": {"epochs": 3}}) == {"seed": 1, "train.epochs": 3}


class TestExitCodes:
    def test_usage(self, capsys):
        assert main([]) == 1
        assert main(["bogus"]) == 1
        assert main(["score", "--bundle", "x"]) == 1

    def test_unknown_config_key(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--set", "colour=blue"]) == 1

    def test_bad_config_file(self, tmp_path):
        (tmp_path / "c.toml").write_text("[train\nepochs=")
        assert main(["synth", "--out", str(tmp_path / "o"), "--config", str(tmp_path / "c.toml")]) == 1

    def test_data_error(self, tmp_path):
        (tmp_path / "bad.aovf").write_bytes(b"garbage")
        (tmp_path / "c.aovc").write_bytes(b"garbage")
        assert main(["score", "--checkpoint", str(tmp_path / "c.aovc"), "--bundle", str(tmp_path / "bad.aovf")]) == 2
        assert main(["eval", "--manifest", str(tmp_path / "missing.jsonl")]) == 2

    def test_numeric_failure(self, tmp_path, trained, capsys):
        data, ckpt = trained
        from anomaly_expert.params import load_checkpoint, save_checkpoint

        params = load_checkpoint(ckpt)
        params["adapter.1.weight"].data[:] = 0.0
        params["adapter.1.bias"].data[:] = 0.0
        save_checkpoint(params, tmp_path / "broken.aovc")
        bundle = next((data / "bundles").iterdir())
        assert main(["score", "--checkpoint", str(tmp_path / "broken.aovc"), "--bundle", str(bundle)]) == 3


class TestCommands:
    def test_synth_deterministic(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert main(["synth", "--seed", "7", "--out", str(tmp_path / name), *SMALL]) == 0
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

    def test_score_json(self, trained, capsys):
        data, ckpt = trained
        bundle = sorted((data / "bundles").iterdir())[0]
        code, doc = run_json(capsys, ["score", "--checkpoint", str(ckpt), "--bundle", str(bundle)])
        assert code == 0
        assert 0.0 < doc["score"] < 1.0
        assert doc["adverb"] in {"highly", "moderately", "slightly"}
        assert doc["text"] == f"with {doc['adverb']} suspicious feature:"

    def test_bad_thresholds(self, trained):
        data, ckpt = trained
        bundle = sorted((data / "bundles").iterdir())[0]
        assert main(["score", "--checkpoint", str(ckpt), "--bundle", str(bundle), "--thresholds", "0.8,0.2"]) == 1

    def test_eval_perfect_scores(self, tmp_path, capsys):
        recs = [{"id": str(i), "score": float(i % 2), "label": i % 2} for i in range(10)]
        (tmp_path / "r.jsonl").write_text("".join(json.dumps(r) + "\n" for r in recs))
        code, doc = run_json(capsys, ["eval", "--manifest", str(tmp_path / "r.jsonl")])
        assert code == 0 and doc["auroc"] == 1.0

    def test_eval_bundles_and_maps(self, tmp_path, trained, capsys):
        data, ckpt = trained
        code, doc = run_json(capsys, ["eval", "--manifest", str(data / "test.jsonl"), "--checkpoint", str(ckpt), "--out", str(tmp_path / "ev")])
        assert code == 0 and len(doc["per_class"]) == 2
        assert (tmp_path / "ev" / "report.txt").exists()
        bundle = sorted((data / "bundles").iterdir())[0]
        code, doc = run_json(capsys, ["maps", "--checkpoint", str(ckpt), "--bundle", str(bundle), "--out", str(tmp_path / "maps")])
        assert code == 0 and len(doc["maps"]) == 2
        assert all(open(m, "rb").read().startswith(b"P5\n4 4\n255\n") for m in doc["maps"])

    def test_dedup(self, tmp_path, capsys):
        items = [
            {"id": "1", "class_name": "cup", "embedding": [1.0, 0.0]},
            {"id": "2", "class_name": "cup", "embedding": [1.0, 0.001]},
            {"id": "3", "class_name": "bolt", "embedding": [1.0, 0.0]},
        ]
        (tmp_path / "i.jsonl").write_text("".join(json.dumps(r) + "\n" for r in items))
        code, doc = run_json(capsys, ["dedup", "--input", str(tmp_path / "i.jsonl"), "--out", str(tmp_path / "o.jsonl")])
        assert code == 0 and doc["kept_ids"] == ["1", "3"]
        assert len((tmp_path / "o.jsonl").read_text().splitlines()) == 2

    def test_json_mode_single_document_logs_on_stderr(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "anomaly_expert.cli", "synth", "--json", "--out", str(tmp_path / "d"), *SMALL],
            capture_output=True,
            text=True,
            check=True,
        )
        json.loads(proc.stdout)
        assert len(proc.stdout.strip().splitlines()) == 1
        assert "resolved config" in proc.stderr


class TestPipeline:
    def test_untrained_null_and_schema(self, tmp_path, capsys):
        code, doc = run_json(capsys, ["pipeline", "--epochs", "0", "--out", str(tmp_path)])
        assert code == 0
        assert 0.3 < doc["auroc"] < 0.7
        jsonschema.validate(doc, report_schema())
        on_disk = json.loads((tmp_path / "report.json").read_text())
        assert on_disk == doc

    def test_small_run(self, tmp_path, capsys):
        code, doc = run_json(capsys, ["pipeline", "--out", str(tmp_path), *SMALL])
        assert code == 0
        assert len(doc["loss_curve"]) == 2 * 4 and len(doc["maps"]) == 4 * 2
        jsonschema.validate(doc, report_schema())

    def test_stage_name_on_failure(self, tmp_path, monkeypatch):
        from anomaly_expert import pipeline

        def boom(*a, **k):
            raise OSError("disk full")

        monkeypatch.setattr(pipeline, "train_stage1", boom)
        with pytest.raises(OSError) as info:
            pipeline.pipeline_run(resolve_config({"synth.n_classes": 1, "synth.images_per_class": 4}), tmp_path)
        assert info.value.stage == "train"
