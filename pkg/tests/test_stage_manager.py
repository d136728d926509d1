import tempfile
import unittest
from pathlib import Path

from epsam.errors import ConfigurationError
from epsam.models.StageManager import STAGES, StageManager

SPECS = (
    ("a", (), ("x",)),
    ("b", ("a",), ("y",)),
    ("c", ("b",), ()),
)


class TestStageManager(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _done(self, manager, stage):
        path = self.root / f"{stage}.out"
        path.write_text(stage)
        manager.mark_done(stage, [path])

    def test_default_order(self):
        manager = StageManager(self.root, {})
        self.assertEqual(manager.ordered_stages(), list(STAGES))

    def test_cycle_is_rejected(self):
        with self.assertRaises(ConfigurationError):
            StageManager(self.root, {}, specs=(("a", ("b",), ()), ("b", ("a",), ())))

    def test_completed_stage_is_current_after_reload(self):
        manager = StageManager(self.root, {"x": 1, "y": 2}, specs=SPECS)
        for stage in ("a", "b", "c"):
            self._done(manager, stage)
        reloaded = StageManager(self.root, {"x": 1, "y": 2}, specs=SPECS)
        self.assertTrue(all(reloaded.is_current(s) for s in ("a", "b", "c")))

    def test_config_change_invalidates_downstream_only(self):
        manager = StageManager(self.root, {"x": 1, "y": 2}, specs=SPECS)
        for stage in ("a", "b", "c"):
            self._done(manager, stage)
        changed = StageManager(self.root, {"x": 1, "y": 3}, specs=SPECS)
        self.assertTrue(changed.is_current("a"))
        self.assertFalse(changed.is_current("b"))
        self.assertFalse(changed.is_current("c"))

    def test_deleted_output_invalidates_only_that_stage(self):
        manager = StageManager(self.root, {"x": 1, "y": 2}, specs=SPECS)
        for stage in ("a", "b", "c"):
            self._done(manager, stage)
        (self.root / "c.out").unlink()
        reloaded = StageManager(self.root, {"x": 1, "y": 2}, specs=SPECS)
        self.assertEqual([s for s in ("a", "b", "c") if not reloaded.is_current(s)], ["c"])

    def test_failed_stage_is_not_current(self):
        manager = StageManager(self.root, {"x": 1}, specs=SPECS)
        manager.mark_failed("a", RuntimeError("boom"))
        self.assertFalse(manager.is_current("a"))
        self.assertEqual(manager.get_node("a")["status"], "failed")

    def test_overridden_inputs_change_the_hash(self):
        plain = StageManager(self.root, {"x": 1}, specs=SPECS)
        other = self.root / "other"
        redirected = StageManager(self.root, {"x": 1}, specs=SPECS, overrides={"cams": other})
        self.assertNotEqual(plain.inputs_hash("a"), redirected.inputs_hash("a"))
        self.assertEqual(
            redirected.inputs_hash("a"),
            StageManager(self.root, {"x": 1}, specs=SPECS, overrides={"cams": str(other)}).inputs_hash("a"),
        )

    def test_stage_run_with_overrides_is_stale_for_a_plain_run(self):
        redirected = StageManager(self.root, {"x": 1}, specs=SPECS, overrides={"cams": self.root / "other"})
        self._done(redirected, "a")
        self.assertTrue(StageManager(self.root, {"x": 1}, specs=SPECS, overrides={"cams": self.root / "other"}).is_current("a"))
        self.assertFalse(StageManager(self.root, {"x": 1}, specs=SPECS).is_current("a"))

    def test_outputs_outside_run_dir_stay_absolute(self):
        with tempfile.TemporaryDirectory() as elsewhere:
            outside = Path(elsewhere).resolve() / "prompts.jsonl"
            outside.write_text("{}")
            manager = StageManager(self.root, {"x": 1}, specs=SPECS)
            manager.mark_done("a", [outside])
            self.assertEqual(manager.manifest["a"]["outputs"], [outside.as_posix()])
            self.assertTrue(StageManager(self.root, {"x": 1}, specs=SPECS).is_current("a"))

    def test_manifest_entries_are_relative(self):
        manager = StageManager(self.root, {"x": 1}, specs=SPECS)
        self._done(manager, "a")
        self.assertEqual(manager.manifest["a"]["outputs"], ["a.out"])
        self.assertEqual(manager.downstream("a"), ["b", "c"])


if __name__ == "__main__":
    unittest.main()
