"""
Pipeline stages over one run directory.

Every stage reads its inputs from disk and writes its outputs under the run
directory, so any completed stage can be skipped on resume.
"""
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from epsam.cam import CamExtractor, ClassifierWeights, train_classifier
from epsam.config import PipelineConfig, config_hash
from epsam.errors import ConfigurationError, EpsamError, SamplingError, StageError
from epsam.evaluation import EvalReport, emit_report, eval_masks, load_report, mean_scores
from epsam.models.StageManager import STAGES, StageManager
from epsam.pepm import PointPromptSet, load_prompts, make_prompts, patch_rng, save_prompts
from epsam.postproc import grid_search_q, mask_from_cam, rotate_fuse
from epsam.segmenter import (
    DecoderHyper,
    DecoderWeights,
    PromptableSegmenter,
    TrainingPair,
    finetune_decoder,
    init_decoder,
)
from epsam.selftrain import IterationMetrics, iterate
from epsam.syndata import MANIFEST_NAME, DatasetManifest, ManifestEntry, build_dataset, load_ground_truth, load_patch
from epsam.util import image_io
from epsam.util.parallel import parallel_map
from epsam.util.print import print_stage_status

logger = logging.getLogger(__name__)

GATE_PROBABILITY = 0.5
RAW_CAM_THRESHOLD = 0.5


@dataclass(frozen=True)
class RunLayout:
    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def manifest(self) -> Path:
        return self.data_dir / MANIFEST_NAME

    @property
    def classifier(self) -> Path:
        return self.root / "cam" / "classifier.ckpt"

    @property
    def cam_raw(self) -> Path:
        return self.root / "cam" / "raw"

    @property
    def cam_fused(self) -> Path:
        return self.root / "cam" / "fused"

    @property
    def initmask_dir(self) -> Path:
        return self.root / "initmask"

    @property
    def prompts(self) -> Path:
        return self.root / "prompts" / "prompts.jsonl"

    @property
    def encoder(self) -> Path:
        return self.root / "segmenter" / "encoder.ckpt"

    @property
    def preliminary_decoder(self) -> Path:
        return self.root / "segmenter" / "decoder_preliminary.ckpt"

    @property
    def selftrain_dir(self) -> Path:
        return self.root / "selftrain"

    @property
    def final_decoder(self) -> Path:
        return self.selftrain_dir / "decoder_final.ckpt"

    @property
    def trends(self) -> Path:
        return self.selftrain_dir / "trends.json"

    @property
    def infer_dir(self) -> Path:
        return self.root / "infer"

    @property
    def gating(self) -> Path:
        return self.infer_dir / "gating.json"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"


# Input and output locations a subcommand may point elsewhere. pseudo_labels
# has no default location.
INPUT_KEYS = {
    "data_dir": "data_dir",
    "manifest": "manifest",
    "classifier": "classifier",
    "cams": "cam_fused",
    "raw_cams": "cam_raw",
    "init_masks": "initmask_dir",
    "prompts": "prompts",
    "encoder": "encoder",
    "decoder": "preliminary_decoder",
    "final_decoder": "final_decoder",
    "predictions": "infer_dir",
    "pseudo_labels": None,
}


def _png(directory: Path, patch_id: str) -> Path:
    return directory / f"{patch_id}.png"


def _init_png(directory: Path, patch_id: str) -> Path:
    return directory / f"{patch_id}_init.png"


def _files(directory: Path) -> List[Path]:
    return sorted(p for p in directory.rglob("*") if p.is_file()) if directory.exists() else []


class PipelineStages:
    """
    One method per stage; each returns the paths it wrote. run_stage wraps a
    method with resume bookkeeping and turns failures into StageError.
    """

    def __init__(
        self,
        config: PipelineConfig,
        out_dir: Union[str, Path],
        inputs: Optional[Mapping[str, Union[str, Path]]] = None,
    ):
        config.validate()
        self.config = config
        self.layout = RunLayout(Path(out_dir).resolve())
        unknown = set(inputs or {}) - set(INPUT_KEYS)
        if unknown:
            raise ConfigurationError(f"unknown input override(s): {', '.join(sorted(unknown))}")
        self.inputs = {k: Path(v) for k, v in (inputs or {}).items() if v is not None}
        self.config_hash = config_hash(config)
        sections = {name: config.section(name) for name in ("syndata", "cam", "postproc", "pepm", "segmenter", "selftrain")}
        sections["seed"] = config.seed
        self.manager = StageManager(self.layout.root, sections, overrides=self.inputs)
        self._manifest: Optional[DatasetManifest] = None
        self.methods: Dict[str, Callable[[], List[Path]]] = {
            "synth": self.synth,
            "train-cam": self.train_cam,
            "extract-cam": self.extract_cam,
            "initmask": self.initmask,
            "prompts": self.prompts,
            "pretrain-decoder": self.pretrain_decoder,
            "selftrain": self.selftrain,
            "infer": self.infer,
            "eval": self.evaluate,
        }
        self.report: Optional[EvalReport] = None

    def input_path(self, key: str) -> Path:
        if key in self.inputs:
            return self.inputs[key]
        if key == "manifest":
            return self.input_path("data_dir") / MANIFEST_NAME
        if INPUT_KEYS[key] is None:
            raise ConfigurationError(f"no location given for '{key}'")
        return getattr(self.layout, INPUT_KEYS[key])

    def run_stage(self, stage: str, force: bool = False) -> bool:
        """Runs one stage unless it is current; returns True when it ran."""
        if stage not in self.methods:
            raise ConfigurationError(f"unknown stage '{stage}', expected one of {STAGES}")
        if not force and self.manager.is_current(stage):
            logger.info("stage %s is up to date, skipping", stage)
            self.manager.mark_skipped(stage)
            print_stage_status(stage, "skipped", "up to date")
            if stage == "eval":
                self.report = load_report(self.layout.report_dir / "report.json")
            return False
        logger.info("running stage %s", stage)
        self.manager.mark_running(stage)
        print_stage_status(stage, "running")
        try:
            outputs = self.methods[stage]()
        except EpsamError as e:
            self.manager.mark_failed(stage, e)
            print_stage_status(stage, "failed", str(e))
            raise StageError(stage, e) from e
        except (OSError, ValueError, KeyError, RuntimeError) as e:
            self.manager.mark_failed(stage, e)
            print_stage_status(stage, "failed", str(e))
            raise StageError(stage, e) from e
        self.manager.mark_done(stage, outputs)
        print_stage_status(stage, "done", f"{len(outputs)} output(s)")
        return True

    @property
    def manifest(self) -> DatasetManifest:
        if self._manifest is None:
            path = self.input_path("manifest")
            if not path.exists():
                raise ConfigurationError(f"dataset manifest not found: {path} (run 'synth' first)")
            self._manifest = DatasetManifest.load(path)
        return self._manifest

    def _positives(self, splits: Sequence[str] = ("train", "valid", "test")) -> List[ManifestEntry]:
        return [e for split in splits for e in self.manifest.positives(split)]

    def synth(self) -> List[Path]:
        data_dir = self.input_path("data_dir")
        self._manifest = build_dataset(self.config.syndata, self.config.seed, data_dir, self.config.workers)
        return _files(data_dir)

    def train_cam(self) -> List[Path]:
        weights = train_classifier(self.manifest, self.config.cam.adl, self.config.cam.hyper, self.config.seed)
        logger.info("classifier best epoch %d, valid accuracy %.3f", weights.best_epoch, weights.val_accuracy)
        return [weights.save(self.input_path("classifier"))]

    def _extractor(self) -> CamExtractor:
        return CamExtractor(ClassifierWeights.load(self.input_path("classifier")))

    def extract_cam(self) -> List[Path]:
        """
        Raw single-orientation CAM and the rotate-fused CAM for every positive
        patch, stored as 16-bit maps.
        """
        extractor = self._extractor()
        use_rotation = self.config.postproc.use_rotation

        def _one(entry: ManifestEntry) -> Tuple[Path, Path]:
            patch = load_patch(self.manifest, entry)
            raw = extractor(patch.pixels)
            fused = rotate_fuse(extractor, patch) if use_rotation else raw
            raw_path, fused_path = _png(self.layout.cam_raw, entry.patch_id), _png(self.layout.cam_fused, entry.patch_id)
            image_io.save_map16(raw_path, raw)
            image_io.save_map16(fused_path, fused)
            return raw_path, fused_path

        written = parallel_map(_one, self._positives(), self.config.workers)
        return [p for pair in written for p in pair]

    def _fused_cam(self, entry: ManifestEntry, extractor: Optional[CamExtractor]) -> np.ndarray:
        if extractor is None:
            return image_io.load_map16(_png(self.input_path("cams"), entry.patch_id))
        patch = load_patch(self.manifest, entry)
        fused = rotate_fuse(extractor, patch) if self.config.postproc.use_rotation else extractor(patch.pixels)
        return image_io.quantize16(fused) / 65535.0

    def initmask(self) -> List[Path]:
        """
        Initial masks from the stored fused CAMs, or straight from classifier
        weights when those are given without a CAM directory.
        """
        from_weights = "classifier" in self.inputs and "cams" not in self.inputs
        extractor = self._extractor() if from_weights else None
        outputs = []
        for entry in self._positives():
            mask = mask_from_cam(self._fused_cam(entry, extractor), self.config.postproc)
            path = _init_png(self.layout.initmask_dir, entry.patch_id)
            image_io.save_mask(path, mask)
            outputs.append(path)
        return outputs

    def grid_search(self, qs: Sequence[float]) -> Tuple[float, List[Tuple[float, float]]]:
        """Quantile grid search on the validation positives."""
        cams, truth = {}, {}
        for entry in self.manifest.positives("valid"):
            cams[entry.patch_id] = image_io.load_map16(_png(self.input_path("cams"), entry.patch_id))
            truth[entry.patch_id] = load_ground_truth(self.manifest, entry).mask
        cfg = self.config.postproc
        return grid_search_q(cams, truth, qs, cfg.se_radius, cfg.use_opening)

    def _prompt_for(
        self,
        patch_id: str,
        cam: np.ndarray,
        initial: Optional[np.ndarray],
        truth: Optional[np.ndarray],
    ) -> Optional[PointPromptSet]:
        pepm = self.config.pepm
        try:
            return make_prompts(
                pepm.strategy,
                pepm.k,
                patch_rng(pepm.seed, patch_id),
                cam=cam,
                initial_mask=initial,
                ground_truth=truth,
                patch_id=patch_id,
            )
        except SamplingError as e:
            logger.warning("no prompts for %s: %s", patch_id, e)
            return None

    def prompts(self) -> List[Path]:
        rows = []
        for entry in self._positives():
            pid = entry.patch_id
            cam = image_io.load_map16(_png(self.input_path("raw_cams"), pid))
            initial = image_io.load_mask(_init_png(self.input_path("init_masks"), pid))
            truth = load_ground_truth(self.manifest, entry).mask
            prompts = self._prompt_for(pid, cam, initial, truth)
            if prompts is not None:
                rows.append(prompts)
        out = self.input_path("prompts")
        save_prompts(out, rows)
        logger.info("wrote prompts for %d of %d positive patches", len(rows), len(self._positives()))
        return [out]

    def _hyper(self, seed: int) -> DecoderHyper:
        hyper = self.config.segmenter.hyper
        return DecoderHyper(**{**asdict(hyper), "seed": seed})

    def _initial_masks(self, entries: Sequence[ManifestEntry]) -> Dict[str, np.ndarray]:
        directory = self.input_path("init_masks")
        return {e.patch_id: image_io.load_mask(_init_png(directory, e.patch_id)) for e in entries}

    def _pseudo_labels(self, entries: Sequence[ManifestEntry]) -> Dict[str, np.ndarray]:
        """Masks from a pseudo-label directory (iter_<n>/<patch_id>.png); patches without a file are left out."""
        directory = self.input_path("pseudo_labels")
        if not directory.is_dir():
            raise ConfigurationError(f"pseudo-label directory not found: {directory}")
        return {
            e.patch_id: image_io.load_mask(_png(directory, e.patch_id))
            for e in entries
            if _png(directory, e.patch_id).exists()
        }

    def _training_masks(self, entries: Sequence[ManifestEntry]) -> Dict[str, np.ndarray]:
        if "pseudo_labels" in self.inputs:
            return self._pseudo_labels(entries)
        return self._initial_masks(entries)

    def pretrain_decoder(self) -> List[Path]:
        """
        Fine-tunes a freshly initialized decoder on the initial masks of the
        training positives, or on pseudo-labels when a directory of them is given.
        """
        segmenter = PromptableSegmenter.create(self.config.segmenter)
        prompts = load_prompts(self.input_path("prompts"))
        candidates = [e for e in self.manifest.positives("train") if e.patch_id in prompts]
        masks = self._training_masks(candidates)
        entries = [e for e in candidates if e.patch_id in masks]
        if not entries:
            raise ConfigurationError("no training positive has both prompts and a mask")
        pairs = [TrainingPair(load_patch(self.manifest, e), masks[e.patch_id], prompts[e.patch_id]) for e in entries]
        seg = self.config.segmenter
        seed = self.config.selftrain.base_seed
        decoder = finetune_decoder(pairs, init_decoder(seed, seg.embed_dim, seg.decoder_width), self._hyper(seed), segmenter)
        return [segmenter.save(self.layout.encoder), decoder.save(self.layout.preliminary_decoder)]

    def selftrain(self) -> List[Path]:
        segmenter = PromptableSegmenter.load(self.input_path("encoder"))
        decoder = DecoderWeights.load(self.input_path("decoder"))
        prompts = load_prompts(self.input_path("prompts"))
        result = iterate(
            self.manifest,
            self._initial_masks(self.manifest.positives("train")),
            prompts,
            self.config.selftrain,
            segmenter,
            self.config.segmenter.hyper,
            decoder=decoder,
            out_dir=self.layout.selftrain_dir,
        )
        result.decoder.save(self.layout.final_decoder)
        image_io.write_json(self.layout.trends, [asdict(m) for m in result.metrics])
        return _files(self.layout.selftrain_dir)

    def _infer_prompts(
        self,
        entry: ManifestEntry,
        patch,
        extractor: CamExtractor,
        initial: Optional[np.ndarray],
    ) -> Optional[PointPromptSet]:
        raw = image_io.quantize16(extractor(patch.pixels)) / 65535.0
        strategy = self.config.pepm.strategy
        if strategy == "mask" and initial is None:
            initial = mask_from_cam(self._fused_cam(entry, extractor), self.config.postproc)
        truth = load_ground_truth(self.manifest, entry).mask if strategy == "gt" else None
        return self._prompt_for(entry.patch_id, raw, initial, truth)

    def infer(self) -> List[Path]:
        """
        Classifier-gated inference on the test split: patches scored negative
        get an all-zero mask without touching the segmenter.
        """
        extractor = self._extractor()
        segmenter = PromptableSegmenter.load(self.input_path("encoder"))
        decoder = DecoderWeights.load(self.input_path("final_decoder")).build()
        stored = load_prompts(self.inputs["prompts"]) if "prompts" in self.inputs else {}
        given_masks = {}
        if "pseudo_labels" in self.inputs:
            given_masks = self._pseudo_labels(self.manifest.split("test"))
        elif "init_masks" in self.inputs:
            directory = self.inputs["init_masks"]
            given_masks = {
                e.patch_id: image_io.load_mask(_init_png(directory, e.patch_id))
                for e in self.manifest.split("test")
                if _init_png(directory, e.patch_id).exists()
            }
        gating, outputs = {}, []
        for entry in self.manifest.split("test"):
            patch = load_patch(self.manifest, entry)
            probability = extractor.probability(patch.pixels)
            mask = np.zeros(patch.pixels.shape[:2], dtype=np.uint8)
            prompted = False
            if probability >= GATE_PROBABILITY:
                prompts = stored.get(entry.patch_id)
                if prompts is None:
                    prompts = self._infer_prompts(entry, patch, extractor, given_masks.get(entry.patch_id))
                if prompts is not None:
                    mask = segmenter.predict(patch, prompts, decoder).mask
                    prompted = True
            gating[entry.patch_id] = {"probability": probability, "gated": probability >= GATE_PROBABILITY, "prompted": prompted}
            path = _png(self.layout.infer_dir, entry.patch_id)
            image_io.save_mask(path, mask)
            outputs.append(path)
        image_io.write_json(self.layout.gating, gating)
        outputs.append(self.layout.gating)
        return outputs

    def _decoder_dice(
        self,
        segmenter: PromptableSegmenter,
        decoder: DecoderWeights,
        entries: Sequence[ManifestEntry],
        prompts: Mapping[str, PointPromptSet],
        truth: Mapping[str, np.ndarray],
    ) -> float:
        model = decoder.build()
        predicted = {
            e.patch_id: segmenter.predict(load_patch(self.manifest, e), prompts[e.patch_id], model).mask for e in entries
        }
        return mean_scores(predicted, truth)[0]

    def comparisons(self) -> Dict[str, float]:
        """
        Test-positive Dice of the untrained, preliminary and final decoders
        with the stored prompts, and of initial masks against a 0.5-thresholded raw CAM.
        """
        prompts = load_prompts(self.input_path("prompts"))
        entries = [e for e in self.manifest.positives("test") if e.patch_id in prompts]
        if not entries:
            return {}
        truth = {e.patch_id: load_ground_truth(self.manifest, e).mask for e in entries}
        segmenter = PromptableSegmenter.load(self.input_path("encoder"))
        seg = self.config.segmenter
        decoders = {
            "zero_shot_dice": init_decoder(self.config.selftrain.base_seed, seg.embed_dim, seg.decoder_width),
            "preliminary_dice": DecoderWeights.load(self.input_path("decoder")),
            "final_dice": DecoderWeights.load(self.input_path("final_decoder")),
        }
        result = {name: self._decoder_dice(segmenter, d, entries, prompts, truth) for name, d in decoders.items()}

        initial = self._initial_masks(entries)
        raw = {
            e.patch_id: (image_io.load_map16(_png(self.input_path("raw_cams"), e.patch_id)) > RAW_CAM_THRESHOLD).astype(np.uint8)
            for e in entries
        }
        result["initmask_dice"] = mean_scores(initial, truth)[0]
        result["raw_cam_dice"] = mean_scores(raw, truth)[0]
        return result

    def evaluate(self) -> List[Path]:
        predictions = self.input_path("predictions")
        predicted, truth, splits = {}, {}, {}
        for entry in self.manifest.split("test"):
            predicted[entry.patch_id] = image_io.load_mask(_png(predictions, entry.patch_id))
            truth[entry.patch_id] = load_ground_truth(self.manifest, entry).mask
            splits[entry.patch_id] = entry.split
        report = eval_masks(predicted, truth, splits, self.config_hash)
        report.comparisons = self.comparisons()
        trends = [IterationMetrics(**row) for row in image_io.read_json(self.layout.trends)] if self.layout.trends.exists() else []
        self.report = report
        return emit_report(report, trends, self.layout.report_dir)
