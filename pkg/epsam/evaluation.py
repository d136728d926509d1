import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from epsam.errors import EvaluationError
from epsam.util import image_io
from epsam.util.print import format_metrics_table, save_trend_plot

if TYPE_CHECKING:
    from epsam.selftrain import IterationMetrics

logger = logging.getLogger(__name__)


def _counts(predicted: np.ndarray, target: np.ndarray) -> Tuple[int, int, int]:
    p = np.asarray(predicted) > 0
    g = np.asarray(target) > 0
    return int((p & g).sum()), int(p.sum()), int(g.sum())


def dice_score(predicted: np.ndarray, target: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|); two empty masks score 1."""
    inter, p, g = _counts(predicted, target)
    return 1.0 if p + g == 0 else 2.0 * inter / (p + g)


def iou_score(predicted: np.ndarray, target: np.ndarray) -> float:
    inter, p, g = _counts(predicted, target)
    union = p + g - inter
    return 1.0 if union == 0 else inter / union


def mean_scores(predicted: Mapping[str, np.ndarray], target: Mapping[str, np.ndarray]) -> Tuple[float, float]:
    """Mean Dice and IoU in percent over the ids of predicted."""
    if not predicted:
        return 0.0, 0.0
    dice = [dice_score(predicted[k], target[k]) for k in predicted]
    iou = [iou_score(predicted[k], target[k]) for k in predicted]
    return round(100.0 * float(np.mean(dice)), 2), round(100.0 * float(np.mean(iou)), 2)


@dataclass
class PatchScore:
    patch_id: str
    split: str
    dice: float
    iou: float


@dataclass
class SplitScore:
    mean_dice: float
    mean_iou: float
    n: int


@dataclass
class EvalReport:
    splits: Dict[str, SplitScore]
    rows: List[PatchScore]
    config_hash: str = ""
    run_id: str = ""
    comparisons: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "EvalReport":
        return cls(
            splits={k: SplitScore(**v) for k, v in data["splits"].items()},
            rows=[PatchScore(**row) for row in data["rows"]],
            config_hash=data.get("config_hash", ""),
            run_id=data.get("run_id", ""),
            comparisons=dict(data.get("comparisons", {})),
        )


def run_id_for(config_hash: str) -> str:
    return hashlib.sha1(config_hash.encode("utf-8")).hexdigest()[:12] if config_hash else ""


def eval_masks(
    predicted: Mapping[str, np.ndarray],
    gt: Mapping[str, np.ndarray],
    splits: Optional[Mapping[str, str]] = None,
    config_hash: str = "",
) -> EvalReport:
    """
    Per-patch Dice and IoU, and per-split means in percent (2 decimals).
    """
    mismatch = set(predicted) ^ set(gt)
    if mismatch:
        raise EvaluationError(mismatch)

    rows = []
    for patch_id in sorted(predicted):
        rows.append(
            PatchScore(
                patch_id=patch_id,
                split=(splits or {}).get(patch_id, "all"),
                dice=dice_score(predicted[patch_id], gt[patch_id]),
                iou=iou_score(predicted[patch_id], gt[patch_id]),
            )
        )

    by_split: Dict[str, List[PatchScore]] = {}
    for row in rows:
        by_split.setdefault(row.split, []).append(row)
    summary = {
        name: SplitScore(
            mean_dice=round(100.0 * float(np.mean([r.dice for r in members])), 2),
            mean_iou=round(100.0 * float(np.mean([r.iou for r in members])), 2),
            n=len(members),
        )
        for name, members in sorted(by_split.items())
    }
    return EvalReport(splits=summary, rows=rows, config_hash=config_hash, run_id=run_id_for(config_hash))


def emit_report(
    report: EvalReport,
    trends: Sequence["IterationMetrics"],
    out_dir: Union[str, Path],
) -> List[Path]:
    """
    Writes report.txt (fixed columns: phase, Dice, IoU, n_selected),
    report.json and, when trends exist, trends.png.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    lines = [f"run {report.run_id or '-'}  config {report.config_hash[:12] or '-'}", ""]
    if trends:
        lines.append(format_metrics_table([(t.phase, t.mean_dice, t.mean_iou, t.n_selected) for t in trends]))
        lines.append("")
    lines.append(f"{'split':<10}{'Dice':>10}{'IoU':>10}{'n':>6}")
    for name, score in report.splits.items():
        lines.append(f"{name:<10}{score.mean_dice:>10.2f}{score.mean_iou:>10.2f}{score.n:>6d}")
    if report.comparisons:
        lines.append("")
        for name, value in sorted(report.comparisons.items()):
            lines.append(f"{name:<28}{value:>10.2f}")
    text_path = out_dir / "report.txt"
    text_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(text_path)

    json_path = out_dir / "report.json"
    payload = report.to_dict()
    payload["trends"] = [asdict(t) for t in trends]
    image_io.write_json(json_path, payload)
    written.append(json_path)

    if trends:
        plot_path = out_dir / "trends.png"
        save_trend_plot(
            [t.phase for t in trends], [t.mean_dice for t in trends], [t.mean_iou for t in trends], plot_path
        )
        written.append(plot_path)

    logger.info("report written to %s", out_dir)
    return written


def load_report(path: Union[str, Path]) -> EvalReport:
    return EvalReport.from_dict(image_io.read_json(path))
