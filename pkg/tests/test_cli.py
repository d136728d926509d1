import json
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

from click.testing import CliRunner

from epsam.__main__ import cli
from epsam.stages import PipelineStages
from tests.helpers import TINY


class TestCli(unittest.TestCase):

    def setUp(self):
        self.runner = CliRunner()
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.config = self.root / "config.json"
        self.config.write_text(json.dumps(TINY), encoding="utf-8")

    def tearDown(self):
        self.tmp.cleanup()

    def test_help_lists_subcommands(self):
        result = self.runner.invoke(cli, ["--help"])
        self.assertEqual(result.exit_code, 0)
        for name in ("synth", "train-cam", "extract-cam", "initmask", "prompts", "pretrain-decoder", "selftrain", "infer", "eval", "run"):
            self.assertIn(name, result.output)

    def test_synth_reads_out_dir_from_environment(self):
        out = self.root / "run"
        result = self.runner.invoke(cli, ["--config", str(self.config), "synth"], env={"EPSAM_OUT_DIR": str(out)})
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertTrue((out / "data" / "manifest.json").exists())
        self.assertTrue((out / "run_manifest.json").exists())

    def test_synth_flags(self):
        data = self.root / "data_only"
        result = self.runner.invoke(
            cli,
            ["--config", str(self.config), "--out-dir", str(self.root / "run"), "synth", "--out", str(data),
             "--seed", "3", "--train", "8", "--valid", "4", "--test", "4", "--slides", "6", "--size", "32"],
        )
        self.assertEqual(result.exit_code, 0, result.output)
        manifest = json.loads((data / "manifest.json").read_text())
        self.assertEqual(len(manifest["entries"]), 16)
        self.assertEqual(manifest["generator_seed"], 3)
        self.assertFalse((self.root / "run" / "data").exists())

    def test_paper_preset_is_accepted(self):
        result = self.runner.invoke(
            cli, ["--preset", "paper", "--out-dir", str(self.root / "run"), "synth", "--train", "8", "--valid", "4", "--test", "4", "--slides", "6", "--size", "32"]
        )
        self.assertEqual(result.exit_code, 0, result.output)
        saved = json.loads((self.root / "run" / "run_manifest.json").read_text())
        self.assertEqual(saved[0]["stage"], "synth")

    def _capture(self, args):
        calls = []

        def fake_run_stage(stages, stage, force=False):
            calls.append((stage, dict(stages.inputs), stages.config, stages.layout.root))
            return True

        with patch.object(PipelineStages, "run_stage", fake_run_stage):
            result = self.runner.invoke(cli, ["--config", str(self.config), "--out-dir", str(self.root / "run")] + args)
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertEqual(len(calls), 1)
        return calls[0]

    def test_subcommand_flags_reach_stage_inputs(self):
        weights = self.root / "classifier.ckpt"
        weights.write_bytes(b"")
        prompts = self.root / "prompts.jsonl"
        prompts.write_text("")
        labels = self.root / "iter_1"
        labels.mkdir()

        stage, inputs, _, _ = self._capture(["train-cam", "--weights", str(weights)])
        self.assertEqual((stage, inputs), ("train-cam", {"classifier": weights}))

        stage, inputs, _, _ = self._capture(["extract-cam", "--weights", str(weights)])
        self.assertEqual(inputs, {"classifier": weights})

        stage, inputs, _, _ = self._capture(["initmask", "--weights", str(weights)])
        self.assertEqual((stage, inputs), ("initmask", {"classifier": weights}))

        out = self.root / "p" / "out.jsonl"
        stage, inputs, config, _ = self._capture(["prompts", "--seed", "9", "--k", "4", "--out", str(out)])
        self.assertEqual(inputs, {"prompts": out})
        self.assertEqual((config.pepm.seed, config.pepm.k), (9, 4))

        stage, inputs, _, _ = self._capture(["pretrain-decoder", "--pseudo-labels", str(labels), "--prompts", str(prompts)])
        self.assertEqual((stage, inputs), ("pretrain-decoder", {"pseudo_labels": labels, "prompts": prompts}))

        stage, inputs, _, _ = self._capture(
            ["infer", "--weights", str(weights), "--prompts", str(prompts), "--pseudo-labels", str(labels)]
        )
        self.assertEqual(inputs, {"classifier": weights, "prompts": prompts, "pseudo_labels": labels})

    def test_subcommand_out_dir_overrides_group_option(self):
        _, _, _, root = self._capture(["train-cam", "--out-dir", str(self.root / "elsewhere")])
        self.assertEqual(root, (self.root / "elsewhere").resolve())

    def test_missing_config_exits_2(self):
        result = self.runner.invoke(cli, ["--config", str(self.root / "nope.json"), "--out-dir", str(self.root), "run"])
        self.assertEqual(result.exit_code, 2)

    def test_invalid_threshold_exits_2(self):
        result = self.runner.invoke(cli, ["--config", str(self.config), "--out-dir", str(self.root), "selftrain", "--t", "0"])
        self.assertEqual(result.exit_code, 2)

    def test_stage_failure_exits_3(self):
        data = self.root / "run" / "data"
        data.mkdir(parents=True)
        entries = [
            {"patch_id": f"train-s-{i}", "patch_path": f"patches/{i}.png", "mask_path": f"masks/{i}.png",
             "label": label, "slide_id": "s", "split": "train"}
            for i, label in enumerate(("positive", "negative"))
        ]
        (data / "manifest.json").write_text(json.dumps({"generator_seed": 0, "params": {}, "entries": entries}))
        result = self.runner.invoke(cli, ["--config", str(self.config), "--out-dir", str(self.root / "run"), "train-cam"])
        self.assertEqual(result.exit_code, 3)
        self.assertIn("train-cam", result.output)
        manifest = json.loads((self.root / "run" / "run_manifest.json").read_text())
        self.assertEqual(manifest[0]["status"], "failed")


if __name__ == "__main__":
    unittest.main()
