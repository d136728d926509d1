import shutil
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy.testing as npt

from epsam.errors import StageError
from epsam.main import run_pipeline
from epsam.models.StageManager import STAGES
from epsam.selftrain import IdsScore
from epsam.stages import PipelineStages
from epsam.util import image_io
from tests.helpers import tiny_config


def _always_selected(initial, predicted):
    return IdsScore(1.0)


@patch("epsam.selftrain.ids", side_effect=_always_selected)
class TestPipeline(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.config = tiny_config()

    def tearDown(self):
        self.tmp.cleanup()

    def test_end_to_end_writes_every_artifact(self, _ids):
        report = run_pipeline(self.config, self.root / "run")
        run = self.root / "run"
        self.assertIsNotNone(report)
        self.assertEqual(report.splits["test"].n, 4)
        for name in ("zero_shot_dice", "preliminary_dice", "final_dice", "initmask_dice", "raw_cam_dice"):
            self.assertIn(name, report.comparisons)
        entries = image_io.read_json(run / "run_manifest.json")
        self.assertEqual([e["stage"] for e in entries], list(STAGES))
        self.assertTrue(all(e["status"] == "done" for e in entries))
        for rel in ("config.json", "report/report.txt", "report/trends.png", "selftrain/metrics.csv", "infer/gating.json"):
            self.assertTrue((run / rel).exists(), rel)

    def test_same_config_same_report(self, _ids):
        first = run_pipeline(self.config, self.root / "a")
        second = run_pipeline(self.config, self.root / "b")
        self.assertEqual(first.splits, second.splits)
        self.assertEqual(first.rows, second.rows)
        self.assertEqual(first.comparisons, second.comparisons)
        self.assertEqual((self.root / "a" / "report" / "report.json").read_bytes(), (self.root / "b" / "report" / "report.json").read_bytes())

    def test_resume_after_deleting_report_reruns_only_eval(self, _ids):
        first = run_pipeline(self.config, self.root / "run")
        (self.root / "run" / "report" / "report.json").unlink()
        ran = []
        original = PipelineStages.run_stage

        def tracking(stages, stage, force=False):
            did_run = original(stages, stage, force=force)
            if did_run:
                ran.append(stage)
            return did_run

        with patch.object(PipelineStages, "run_stage", tracking):
            second = run_pipeline(self.config, self.root / "run")
        self.assertEqual(ran, ["eval"])
        self.assertEqual(second, first)

    def test_until_stops_early(self, _ids):
        report = run_pipeline(self.config, self.root / "run", until="initmask")
        self.assertIsNone(report)
        self.assertTrue((self.root / "run" / "initmask").exists())
        self.assertFalse((self.root / "run" / "prompts").exists())
        masks = sorted(p.name for p in (self.root / "run" / "initmask").iterdir())
        self.assertTrue(masks and all(name.endswith("_init.png") for name in masks))

    def test_stage_run_on_other_inputs_is_redone_by_a_plain_run(self, _ids):
        run = self.root / "run"
        run_pipeline(self.config, run, until="initmask")
        other = self.root / "other_cams"
        shutil.copytree(run / "cam" / "fused", other)
        PipelineStages(self.config, run, {"cams": other}).run_stage("initmask", force=True)

        plain = PipelineStages(self.config, run)
        self.assertTrue(plain.manager.is_current("extract-cam"))
        self.assertFalse(plain.manager.is_current("initmask"))
        self.assertTrue(plain.run_stage("initmask"))

    def test_initial_masks_from_weights_match_stored_cams(self, _ids):
        run = self.root / "run"
        run_pipeline(self.config, run, until="initmask")
        from_cams = {p.name: image_io.load_mask(p) for p in (run / "initmask").iterdir()}
        stages = PipelineStages(self.config, run, {"classifier": run / "cam" / "classifier.ckpt"})
        stages.run_stage("initmask", force=True)
        for name, mask in from_cams.items():
            npt.assert_array_equal(image_io.load_mask(run / "initmask" / name), mask)

    def test_pseudo_labels_and_stored_prompts_feed_decoder_and_inference(self, _ids):
        run = self.root / "run"
        run_pipeline(self.config, run, until="selftrain")
        prompts = self.root / "elsewhere" / "prompts.jsonl"
        shutil.copytree(run / "prompts", prompts.parent)

        stages = PipelineStages(self.config, run, {"pseudo_labels": run / "selftrain" / "iter_1", "prompts": prompts})
        stages.run_stage("pretrain-decoder", force=True)
        self.assertTrue((run / "segmenter" / "decoder_preliminary.ckpt").exists())

        stages = PipelineStages(self.config, run, {"prompts": prompts})
        stages.run_stage("infer", force=True)
        gating = image_io.read_json(run / "infer" / "gating.json")
        self.assertEqual(len(gating), 4)

    def test_stage_status_lines(self, _ids):
        with patch("epsam.stages.print_stage_status") as status:
            run_pipeline(self.config, self.root / "run", until="synth")
            run_pipeline(self.config, self.root / "run", until="synth")
        self.assertEqual(
            [c.args[:2] for c in status.call_args_list],
            [("synth", "running"), ("synth", "done"), ("synth", "skipped")],
        )

    def test_missing_pseudo_label_directory(self, _ids):
        run = self.root / "run"
        run_pipeline(self.config, run, until="prompts")
        stages = PipelineStages(self.config, run, {"pseudo_labels": self.root / "missing"})
        with self.assertRaises(StageError):
            stages.run_stage("pretrain-decoder", force=True)


if __name__ == "__main__":
    unittest.main()
