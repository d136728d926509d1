"""
IDS-gated pseudo-label selection and iterative decoder retraining.

The loop is a langgraph state machine: a preliminary node, then
select -> retrain -> record repeated until the iteration budget is spent.
"""
import csv
import logging
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, TypedDict, Union

import numpy as np
from langgraph.graph import END, StateGraph

from epsam.errors import ConfigurationError, SelectionError, ShapeError
from epsam.evaluation import mean_scores
from epsam.pepm import PointPromptSet
from epsam.postproc import InitialMask
from epsam.segmenter import (
    DecoderHyper,
    DecoderWeights,
    PredictedMask,
    PromptableSegmenter,
    TrainingPair,
    finetune_decoder,
    init_decoder,
)
from epsam.syndata import DatasetManifest, Patch, load_ground_truth, load_patch
from epsam.util import image_io

logger = logging.getLogger(__name__)

PRELIMINARY = "preliminary"


@dataclass(frozen=True)
class RetrainConfig:
    threshold: float = 0.9
    iterations: int = 3
    base_seed: int = 0
    seeds: Optional[Tuple[int, ...]] = None
    run_preliminary: bool = True

    def validate(self) -> None:
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigurationError(f"threshold must be in (0, 1], got {self.threshold}")
        if self.iterations < 1:
            raise ConfigurationError(f"iterations must be >= 1, got {self.iterations}")
        if self.seeds is not None and len(self.seeds) != self.iterations:
            raise ConfigurationError(f"expected {self.iterations} per-iteration seeds, got {len(self.seeds)}")

    def seed_for(self, iteration: int) -> int:
        if self.seeds is not None:
            return int(self.seeds[iteration - 1])
        return self.base_seed + iteration


@dataclass
class IdsScore:
    value: float
    degenerate: bool = False


@dataclass
class PseudoLabel:
    mask: np.ndarray
    ids: float
    iteration: int


@dataclass
class PseudoLabelSet:
    records: Dict[str, PseudoLabel] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, patch_id: str) -> bool:
        return patch_id in self.records

    def patch_ids(self) -> List[str]:
        return sorted(self.records)


@dataclass
class IterationMetrics:
    phase: str
    mean_dice: float
    mean_iou: float
    n_selected: int
    valid_dice: Optional[float] = None
    valid_iou: Optional[float] = None


@dataclass
class RetrainResult:
    pseudo_labels: PseudoLabelSet
    decoder: DecoderWeights
    metrics: List[IterationMetrics]
    preliminary: DecoderWeights


def _mask(value) -> np.ndarray:
    return np.asarray(getattr(value, "mask", value)) > 0


def ids(initial, predicted) -> IdsScore:
    """|initial ∩ predicted| / |predicted|; an empty prediction scores 0 and is flagged."""
    a, b = _mask(initial), _mask(predicted)
    if a.shape != b.shape:
        raise ShapeError(f"initial mask {a.shape} and predicted mask {b.shape} differ")
    area = int(b.sum())
    if area == 0:
        return IdsScore(0.0, degenerate=True)
    return IdsScore(float((a & b).sum()) / area)


def _patch_id(initial, predicted) -> str:
    return getattr(predicted, "patch_id", "") or getattr(initial, "patch_id", "")


def score_candidates(
    candidates: Sequence[Tuple[InitialMask, PredictedMask]],
    t: float,
    iteration: int,
) -> List[Dict]:
    rows = []
    for initial, predicted in candidates:
        score = ids(initial, predicted)
        rows.append(
            {
                "patch_id": _patch_id(initial, predicted),
                "ids": score.value,
                "selected": score.value > t,
                "iteration": iteration,
            }
        )
    return rows


def select(
    candidates: Sequence[Tuple[InitialMask, PredictedMask]],
    t: float,
    iteration: int,
    existing: Optional[PseudoLabelSet] = None,
) -> PseudoLabelSet:
    """
    Inserts or replaces (latest wins) every candidate with IDS > t; candidates
    at or below t leave existing records untouched.
    """
    if not 0.0 < t <= 1.0:
        raise ConfigurationError(f"threshold must be in (0, 1], got {t}")
    records = dict(existing.records) if existing is not None else {}
    for initial, predicted in candidates:
        score = ids(initial, predicted)
        if score.value > t:
            records[_patch_id(initial, predicted)] = PseudoLabel(
                mask=_mask(predicted).astype(np.uint8), ids=score.value, iteration=iteration
            )
    return PseudoLabelSet(records)


class RetrainState(TypedDict):
    iteration: int
    decoder: DecoderWeights
    preliminary: DecoderWeights
    predictions: Dict[str, PredictedMask]
    pseudo_labels: PseudoLabelSet
    metrics: List[IterationMetrics]


@dataclass
class _LoopData:
    patches: Dict[str, Patch]
    initial_masks: Dict[str, np.ndarray]
    prompts: Dict[str, PointPromptSet]
    ground_truth: Dict[str, np.ndarray]
    valid_patches: Dict[str, Patch]
    valid_ground_truth: Dict[str, np.ndarray]


def _predict_all(
    segmenter: PromptableSegmenter,
    patches: Mapping[str, Patch],
    prompts: Mapping[str, PointPromptSet],
    decoder: DecoderWeights,
) -> Dict[str, PredictedMask]:
    model = decoder.build()
    return {pid: segmenter.predict(patches[pid], prompts[pid], model) for pid in sorted(patches)}


def _quality(predictions: Mapping[str, PredictedMask], ground_truth: Mapping[str, np.ndarray]) -> Tuple[float, float]:
    return mean_scores({pid: p.mask for pid, p in predictions.items()}, ground_truth)


def _write_iteration(out_dir: Path, iteration: int, labels: PseudoLabelSet, ledger: List[Dict]) -> None:
    iter_dir = out_dir / f"iter_{iteration}"
    for pid, record in labels.records.items():
        image_io.save_mask(iter_dir / f"{pid}.png", record.mask)
    image_io.write_json(iter_dir / "selection_ledger.json", ledger)


def write_metrics_csv(path: Union[str, Path], metrics: Sequence[IterationMetrics]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["phase", "mean_dice", "mean_iou", "n_selected"])
        for row in metrics:
            writer.writerow([row.phase, f"{row.mean_dice:.2f}", f"{row.mean_iou:.2f}", row.n_selected])
    return path


def _record(state: RetrainState, data: _LoopData, segmenter: PromptableSegmenter, phase: str, n_selected: int) -> RetrainState:
    predictions = _predict_all(segmenter, data.patches, data.prompts, state["decoder"])
    dice, iou = _quality(predictions, data.ground_truth)
    row = IterationMetrics(phase=phase, mean_dice=dice, mean_iou=iou, n_selected=n_selected)
    if data.valid_patches:
        valid = _predict_all(segmenter, data.valid_patches, data.prompts, state["decoder"])
        row.valid_dice, row.valid_iou = _quality(valid, data.valid_ground_truth)
    logger.info("selftrain %s: pseudo-label Dice %.2f IoU %.2f (n=%d)", phase, dice, iou, n_selected)
    state["predictions"] = predictions
    state["metrics"] = state["metrics"] + [row]
    return state


def _preliminary_node(
    state: RetrainState,
    data: _LoopData,
    segmenter: PromptableSegmenter,
    cfg: RetrainConfig,
    hyper: DecoderHyper,
) -> RetrainState:
    pairs = [TrainingPair(data.patches[pid], data.initial_masks[pid], data.prompts[pid]) for pid in sorted(data.patches)]
    if state["decoder"] is None:
        if not cfg.run_preliminary:
            raise ConfigurationError("no preliminary decoder given and run_preliminary is disabled")
        state["decoder"] = finetune_decoder(
            pairs, init_decoder(cfg.base_seed), _with_seed(hyper, cfg.base_seed), segmenter
        )
    state["preliminary"] = state["decoder"]
    return _record(state, data, segmenter, PRELIMINARY, len(pairs))


def _select_node(
    state: RetrainState,
    data: _LoopData,
    cfg: RetrainConfig,
    out_dir: Optional[Path],
) -> RetrainState:
    iteration = state["iteration"] + 1
    candidates = [
        (InitialMask(pid, data.initial_masks[pid]), state["predictions"][pid]) for pid in sorted(state["predictions"])
    ]
    ledger = score_candidates(candidates, cfg.threshold, iteration)
    labels = select(candidates, cfg.threshold, iteration, state["pseudo_labels"])
    if len(labels) == 0:
        values = [row["ids"] for row in ledger]
        percentiles = {p: float(np.percentile(values, p)) for p in (10, 25, 50, 75, 90)} if values else {}
        raise SelectionError(cfg.threshold, percentiles)
    logger.info(
        "iteration %d: %d of %d candidates passed IDS > %.2f, pool size %d",
        iteration, sum(r["selected"] for r in ledger), len(ledger), cfg.threshold, len(labels),
    )
    if out_dir is not None:
        _write_iteration(out_dir, iteration, labels, ledger)
    state["iteration"] = iteration
    state["pseudo_labels"] = labels
    return state


def _with_seed(hyper: DecoderHyper, seed: int) -> DecoderHyper:
    return DecoderHyper(
        lr=hyper.lr,
        epochs=hyper.epochs,
        batch_size=hyper.batch_size,
        weight_decay=hyper.weight_decay,
        seed=seed,
        quality_weight=hyper.quality_weight,
    )


def _retrain_node(
    state: RetrainState,
    data: _LoopData,
    segmenter: PromptableSegmenter,
    cfg: RetrainConfig,
    hyper: DecoderHyper,
) -> RetrainState:
    seed = cfg.seed_for(state["iteration"])
    labels = state["pseudo_labels"]
    pairs = [TrainingPair(data.patches[pid], labels.records[pid].mask, data.prompts[pid]) for pid in labels.patch_ids()]
    architecture = state["decoder"].architecture
    fresh = init_decoder(seed, architecture["embed_dim"], architecture["width"])
    state["decoder"] = finetune_decoder(pairs, fresh, _with_seed(hyper, seed), segmenter)
    return state


def _record_node(state: RetrainState, data: _LoopData, segmenter: PromptableSegmenter) -> RetrainState:
    return _record(state, data, segmenter, str(state["iteration"]), len(state["pseudo_labels"]))


def check_end_condition(state: RetrainState, cfg: RetrainConfig) -> str:
    if state["iteration"] >= cfg.iterations:
        return "end"
    return "continue"


def build_retrain_graph(
    data: _LoopData,
    segmenter: PromptableSegmenter,
    cfg: RetrainConfig,
    hyper: DecoderHyper,
    out_dir: Optional[Path] = None,
):
    graph_builder = StateGraph(RetrainState)

    graph_builder.add_node("preliminary_phase", partial(_preliminary_node, data=data, segmenter=segmenter, cfg=cfg, hyper=hyper))
    graph_builder.set_entry_point("preliminary_phase")

    graph_builder.add_node("select", partial(_select_node, data=data, cfg=cfg, out_dir=out_dir))
    graph_builder.add_edge("preliminary_phase", "select")

    graph_builder.add_node("retrain", partial(_retrain_node, data=data, segmenter=segmenter, cfg=cfg, hyper=hyper))
    graph_builder.add_edge("select", "retrain")

    graph_builder.add_node("record", partial(_record_node, data=data, segmenter=segmenter))
    graph_builder.add_edge("retrain", "record")

    graph_builder.add_conditional_edges(
        "record",
        partial(check_end_condition, cfg=cfg),
        {"end": END, "continue": "select"},
    )
    return graph_builder.compile()


def iterate(
    manifest: DatasetManifest,
    initial_masks: Mapping[str, np.ndarray],
    prompts: Mapping[str, PointPromptSet],
    cfg: RetrainConfig,
    segmenter: PromptableSegmenter,
    hyper: DecoderHyper,
    decoder: Optional[DecoderWeights] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> RetrainResult:
    """
    Runs the preliminary phase (unless a fine-tuned decoder is given) and then
    cfg.iterations rounds of predict, select, re-initialize and fine-tune on
    the positive training patches. Negative patches never enter the pool.
    """
    cfg.validate()
    patches, ground_truth = {}, {}
    for entry in manifest.positives("train"):
        if entry.patch_id not in prompts:
            logger.warning("skipping %s: no prompts (degenerate CAM)", entry.patch_id)
            continue
        patches[entry.patch_id] = load_patch(manifest, entry)
        ground_truth[entry.patch_id] = load_ground_truth(manifest, entry).mask
    if not patches:
        raise ConfigurationError("no positive training patch has prompts; nothing to self-train on")
    missing = [pid for pid in patches if pid not in initial_masks]
    if missing:
        raise ConfigurationError(f"initial masks missing for {len(missing)} patches, e.g. {missing[0]}")

    valid_patches, valid_truth = {}, {}
    for entry in manifest.positives("valid"):
        if entry.patch_id in prompts:
            valid_patches[entry.patch_id] = load_patch(manifest, entry)
            valid_truth[entry.patch_id] = load_ground_truth(manifest, entry).mask

    data = _LoopData(
        patches=patches,
        initial_masks={pid: np.asarray(initial_masks[pid]) for pid in patches},
        prompts=dict(prompts),
        ground_truth=ground_truth,
        valid_patches=valid_patches,
        valid_ground_truth=valid_truth,
    )
    out_path = Path(out_dir) if out_dir is not None else None
    graph = build_retrain_graph(data, segmenter, cfg, hyper, out_path)
    final = graph.invoke(
        {
            "iteration": 0,
            "decoder": decoder,
            "preliminary": decoder,
            "predictions": {},
            "pseudo_labels": PseudoLabelSet(),
            "metrics": [],
        },
        {"recursion_limit": 3 * cfg.iterations + 10},
    )
    if out_path is not None:
        write_metrics_csv(out_path / "metrics.csv", final["metrics"])
    return RetrainResult(
        pseudo_labels=final["pseudo_labels"],
        decoder=final["decoder"],
        metrics=final["metrics"],
        preliminary=final["preliminary"],
    )
