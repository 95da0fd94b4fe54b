import json
import os
from pathlib import Path

import pytest

from avloc.cli import default_config, main, resolve_config
from avloc.datasim import load_split
from avloc.detect import load_predictions, save_predictions
from avloc.evalkit import mean_ap

TINY_OVERRIDES = [
    "--set", "data.num_train=6", "--set", "data.num_eval=3",
    "--set", "data.T=16", "--set", "data.d_v=6", "--set", "data.d_a=6",
    "--set", "data.num_classes=3", "--set", "data.duration_min=3",
    "--set", "data.duration_max=8",
    "--set", "model.d=8", "--set", "model.heads=2", "--set", "model.levels=2",
    "--set", "model.n_pool=4", "--set", "model.head_hidden=8",
    "--set", "train.epochs=2", "--set", "train.warmup_epochs=1",
    "--set", "train.batch_size=3", "--set", "train.eval_every=0",
    "--set", "eval.thresholds=[0.5]",
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """generate -> train -> predict -> eval over a tiny config."""
    root = tmp_path_factory.mktemp("pipeline")
    data, run, preds, ev = root / "data", root / "run", root / "preds", root / "eval"
    assert main(["generate", "--out", str(data)] + TINY_OVERRIDES) == 0
    assert main(["train", "--data", str(data), "--out", str(run)] + TINY_OVERRIDES) == 0
    assert main(["predict", "--checkpoint", str(run / "checkpoint.delp"),
                 "--data", str(data), "--split", "eval", "--out", str(preds)]
                + TINY_OVERRIDES) == 0
    assert main(["eval", "--predictions", str(preds / "predictions.json"),
                 "--data", str(data), "--split", "eval", "--out", str(ev)]
                + TINY_OVERRIDES) == 0
    return {"data": data, "run": run, "preds": preds, "eval": ev}


class TestPipeline:
    def test_generate_layout(self, pipeline):
        data = pipeline["data"]
        manifest = json.loads((data / "manifest.json").read_text())
        assert len(manifest["splits"]["train"]) == 6
        assert len(manifest["splits"]["eval"]) == 3
        assert (data / "run_manifest.json").exists()
        some_id = manifest["splits"]["train"][0]
        assert (data / manifest["files"][some_id]["features"]).exists()

    def test_train_artifacts(self, pipeline):
        run = pipeline["run"]
        for name in ("checkpoint.delp", "metrics.csv", "loss_curves.svg",
                     "map_curves.svg", "run_manifest.json"):
            assert (run / name).exists(), name
        header = (run / "metrics.csv").read_text().splitlines()[0]
        for col in ("epoch", "lr", "total", "inter", "intra", "score", "cls", "reg"):
            assert col in header
        svg = (run / "loss_curves.svg").read_text()
        assert svg.lstrip().startswith("<?xml")

    def test_predict_artifacts(self, pipeline):
        preds = load_predictions(pipeline["preds"] / "predictions.json")
        assert len(preds) == 3
        assert all(vid.startswith("eval_") for vid in preds)

    def test_eval_artifacts(self, pipeline):
        ev = pipeline["eval"]
        report = json.loads((ev / "report.json").read_text())
        assert "average_map" in report
        assert 0.0 <= report["average_map"] <= 1.0
        rows = (ev / "report.csv").read_text().splitlines()
        assert rows[0] == "threshold,class,ap,tp,fp"
        assert (ev / "pr_curves.svg").exists()

    def test_manifest_snapshot_reproduces_config(self, pipeline):
        doc = json.loads((pipeline["run"] / "run_manifest.json").read_text())
        assert doc["command"] == "train"
        assert doc["config"]["train"]["epochs"] == 2
        assert doc["seed"] == 7
        assert "started" in doc and "finished" in doc


class TestEvalGroundTruthRoundTrip:
    def test_gt_as_predictions_scores_one(self, pipeline, tmp_path):
        data = pipeline["data"]
        from avloc.detect import LocalizedEvent
        gt_preds = {}
        gts = {}
        for seq, events in load_split(data, "eval"):
            gt_preds[seq.id] = [LocalizedEvent(e.start, e.end, e.label, 1.0) for e in events]
            gts[seq.id] = events
        report = mean_ap(gt_preds, gts, [0.5, 0.7, 0.9])
        assert report.average_map == 1.0

        pred_file = tmp_path / "gt_preds.json"
        save_predictions(gt_preds, pred_file)
        out = tmp_path / "eval_out"
        code = main(["eval", "--predictions", str(pred_file), "--data", str(data),
                     "--split", "eval", "--out", str(out)] + TINY_OVERRIDES)
        assert code == 0
        doc = json.loads((out / "report.json").read_text())
        assert doc["average_map"] == 1.0


class TestConfigHandling:
    def test_defaults_complete(self):
        cfg = default_config()
        for section in ("data", "model", "loss", "train", "decode", "eval"):
            assert section in cfg

    def test_file_merge_and_override(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"epochs": 9}}))
        cfg = resolve_config(str(p), ["train.base_lr=0.5", "model.levels=2"])
        assert cfg["train"]["epochs"] == 9
        assert cfg["train"]["base_lr"] == 0.5
        assert cfg["model"]["levels"] == 2
        assert cfg["data"]["T"] == 64  # untouched default

    def test_env_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DEL_SEED", "123")
        cfg = resolve_config(None, [])
        assert cfg["seed"] == 123

    def test_bad_env_seed(self, monkeypatch):
        monkeypatch.setenv("DEL_SEED", "abc")
        from avloc.cli import CliError
        with pytest.raises(CliError):
            resolve_config(None, [])

    def test_string_override_values(self):
        cfg = resolve_config(None, ["train.modality=A"])
        assert cfg["train"]["modality"] == "A"


class TestExitCodes:
    def test_missing_config_file(self, tmp_path, capsys):
        code = main(["generate", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o")])
        assert code == 3
        assert "not found" in capsys.readouterr().err

    def test_invalid_json_config(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text("{nope")
        code = main(["generate", "--config", str(p), "--out", str(tmp_path / "o")])
        assert code == 3

    def test_bad_set_expression(self, tmp_path):
        code = main(["generate", "--out", str(tmp_path / "o"), "--set", "garbage"])
        assert code == 3

    def test_missing_dataset(self, tmp_path, capsys):
        code = main(["train", "--data", str(tmp_path / "nodata"),
                     "--out", str(tmp_path / "o")])
        assert code == 4
        assert "manifest" in capsys.readouterr().err

    def test_missing_checkpoint(self, pipeline, tmp_path):
        code = main(["predict", "--checkpoint", str(tmp_path / "none.delp"),
                     "--data", str(pipeline["data"]), "--out", str(tmp_path / "o")])
        assert code == 4

    def test_missing_predictions(self, pipeline, tmp_path):
        code = main(["eval", "--predictions", str(tmp_path / "none.json"),
                     "--data", str(pipeline["data"]), "--out", str(tmp_path / "o")])
        assert code == 4

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["generate", "--frobnicate"])
        assert exc.value.code == 2

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            main(["transmogrify"])
        assert exc.value.code == 2


class TestDeterminism:
    def test_same_seed_bit_identical_outputs(self, tmp_path):
        """Same config and seed twice: datasets, metrics, predictions and
        reports are byte-identical (manifests differ only by timestamps)."""
        outs = []
        for tag in ("a", "b"):
            data = tmp_path / f"data_{tag}"
            run = tmp_path / f"run_{tag}"
            preds = tmp_path / f"preds_{tag}"
            ev = tmp_path / f"eval_{tag}"
            assert main(["generate", "--out", str(data)] + TINY_OVERRIDES) == 0
            assert main(["train", "--data", str(data), "--out", str(run)] + TINY_OVERRIDES) == 0
            assert main(["predict", "--checkpoint", str(run / "checkpoint.delp"),
                         "--data", str(data), "--split", "eval", "--out", str(preds)]
                        + TINY_OVERRIDES) == 0
            assert main(["eval", "--predictions", str(preds / "predictions.json"),
                         "--data", str(data), "--split", "eval", "--out", str(ev)]
                        + TINY_OVERRIDES) == 0
            outs.append({"data": data, "run": run, "preds": preds, "eval": ev})

        a, b = outs
        feat = "features/eval_00000.delf"
        assert (a["data"] / feat).read_bytes() == (b["data"] / feat).read_bytes()
        assert (a["run"] / "metrics.csv").read_text() == (b["run"] / "metrics.csv").read_text()
        assert (a["run"] / "checkpoint.delp").read_bytes() == (b["run"] / "checkpoint.delp").read_bytes()
        assert (a["preds"] / "predictions.json").read_text() == (b["preds"] / "predictions.json").read_text()
        assert (a["eval"] / "report.json").read_text() == (b["eval"] / "report.json").read_text()


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "[PASS]" in out and "[FAIL]" not in out
