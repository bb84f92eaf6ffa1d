"""Command-line entry point: exit codes, config resolution and the end-to-end workflow."""
import json
import subprocess
import sys

import pytest

from condenseunet.cli import main
from condenseunet.data import tree_digest

TINY = ["--layers", "1,2,1", "--growth-rate", "8", "--initial-features", "16"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workflow(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth-data", "--cases", 6, "--seed", 1, "--image-size", 32, "--slices", 1,
               "--out", root / "data") == 0
    assert run("train", "--data", root / "data" / "manifest.json", "--out", root / "run", "--epochs", 4,
               "--batch-size", 4, "--patch-size", 32, "--learning-rate", 1e-3, "--dtype", "float64",
               "--stage-boundaries", "1,2,3", *TINY) == 0
    return root


class TestSynthData:
    def test_identical_trees_from_different_cwd(self, tmp_path, monkeypatch):
        for sub in ("a", "b"):
            (tmp_path / sub).mkdir()
            monkeypatch.chdir(tmp_path / sub)
            assert run("synth-data", "--cases", 5, "--seed", 42, "--image-size", 32, "--slices", 1,
                       "--out", "d") == 0
        assert tree_digest(tmp_path / "a" / "d") == tree_digest(tmp_path / "b" / "d")

    def test_resolved_config(self, tmp_path):
        run("synth-data", "--cases", 5, "--image-size", 32, "--slices", 1, "--out", tmp_path)
        cfg = json.loads((tmp_path / "resolved-config.json").read_text())
        assert cfg["command"] == "synth-data"
        assert (cfg["cases"], cfg["seed"], cfg["image_size"], cfg["slices"]) == (5, 0, 32, 1)


class TestExitCodes:
    def test_unknown_flag(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("count-params", "--out", tmp_path, "--bogus")
        assert exc.value.code == 2

    def test_missing_required(self):
        with pytest.raises(SystemExit) as exc:
            run("count-params")
        assert exc.value.code == 2

    def test_missing_path(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("train", "--data", tmp_path / "nope.json", "--out", tmp_path / "o")
        assert exc.value.code == 2

    def test_invalid_network_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("count-params", "--out", tmp_path, "--growth-rate", "6")
        assert exc.value.code == 2

    def test_internal_failure(self, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        assert run("inspect-condense", "--checkpoint", bad, "--out", tmp_path / "o") == 1
        assert "CheckpointError" in capsys.readouterr().err

    def test_eval_needs_one_source(self, workflow, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("eval", "--data", workflow / "data" / "manifest.json", "--out", tmp_path)
        assert exc.value.code == 2

    def test_unknown_gradcheck_case(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("gradcheck", "--cases", "nonexistent", "--out", tmp_path)
        assert exc.value.code == 2


class TestCommands:
    def test_count_params(self, tmp_path):
        assert run("count-params", "--out", tmp_path) == 0
        data = json.loads((tmp_path / "params.json").read_text())
        assert 0.40 <= data["ratio_vs_densenet"] <= 0.60 and data["ratio_vs_unet"] <= 0.12
        assert (tmp_path / "params.csv").read_text().startswith("model,params")
        assert (tmp_path / "layers.csv").exists()

    def test_gradcheck_subset(self, tmp_path):
        assert run("gradcheck", "--cases", "add,conv2d", "--seeds", 2, "--out", tmp_path) == 0
        results = json.loads((tmp_path / "gradcheck.json").read_text())["results"]
        assert len(results) == 4 and all(r["passed"] for r in results)

    def test_train_outputs(self, workflow):
        run_dir = workflow / "run"
        for name in ("train_log.csv", "last.ckpt", "best.ckpt", "train-config.json", "resolved-config.json"):
            assert (run_dir / name).exists(), name

    def test_config_file_reproduces_run(self, workflow, tmp_path):
        resolved = json.loads((workflow / "run" / "resolved-config.json").read_text())
        resolved["out"] = str(tmp_path)
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(resolved))
        assert run("train", "--config", cfg_path) == 0
        assert (tmp_path / "last.ckpt").read_bytes() == (workflow / "run" / "last.ckpt").read_bytes()

    def test_flag_overrides_config_file(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"input_size": 64, "out": str(tmp_path / "from_file")}))
        assert run("count-params", "--config", cfg, "--out", tmp_path / "from_flag") == 0
        resolved = json.loads((tmp_path / "from_flag" / "resolved-config.json").read_text())
        assert resolved["input_size"] == 64
        assert not (tmp_path / "from_file").exists()

    def test_config_for_other_command_rejected(self, workflow, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("count-params", "--config", workflow / "run" / "resolved-config.json", "--out", tmp_path)
        assert exc.value.code == 2

    def test_inspect_condense(self, workflow, tmp_path):
        assert run("inspect-condense", "--checkpoint", workflow / "run" / "last.ckpt", "--out", tmp_path) == 0
        masks = json.loads((tmp_path / "masks.json").read_text())
        assert masks["active_fraction"] == 0.25
        assert all(l["completed_stages"] == 3 for l in masks["layers"])

    def test_predict_then_eval_round_trip(self, workflow, tmp_path):
        manifest = workflow / "data" / "manifest.json"
        ckpt = workflow / "run" / "last.ckpt"
        assert run("predict", "--data", manifest, "--checkpoint", ckpt, "--out", tmp_path / "pred") == 0
        assert list((tmp_path / "pred").glob("*.lbl.png"))
        assert run("eval", "--data", manifest, "--predictions", tmp_path / "pred", "--out", tmp_path / "a") == 0
        assert run("eval", "--data", manifest, "--checkpoint", ckpt, "--out", tmp_path / "b") == 0
        a = json.loads((tmp_path / "a" / "metrics.json").read_text())
        b = json.loads((tmp_path / "b" / "metrics.json").read_text())
        assert a["mean_dice"] == b["mean_dice"]
        assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()


def test_console_script_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "condenseunet.cli", "count-params", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "ratio_vs_unet" in proc.stdout
