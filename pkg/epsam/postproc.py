import logging
from dataclasses import dataclass
from typing import Callable, List, Mapping, Sequence, Tuple

import numpy as np
from scipy import ndimage

from epsam.cam import EnhancedCam, normalize_map
from epsam.errors import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

CamProducer = Callable[[np.ndarray], np.ndarray]
ROTATIONS = 4


@dataclass(frozen=True)
class PostprocConfig:
    quantile_q: float = 0.3
    se_radius: int = 2
    rotation_count: int = ROTATIONS
    use_rotation: bool = True
    use_opening: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.quantile_q < 1.0:
            raise ConfigurationError(f"quantile_q must be in [0, 1), got {self.quantile_q}")
        if self.se_radius < 1:
            raise ConfigurationError(f"se_radius must be >= 1, got {self.se_radius}")
        if self.rotation_count != ROTATIONS:
            raise ConfigurationError(f"rotation_count is fixed at {ROTATIONS}, got {self.rotation_count}")


@dataclass
class InitialMask:
    patch_id: str
    mask: np.ndarray


def _values(cam) -> np.ndarray:
    return np.asarray(cam.values if isinstance(cam, EnhancedCam) else cam, dtype=np.float64)


def quantile_threshold(cam, q: float) -> np.ndarray:
    """
    Zeroes the bottom q fraction of the strictly positive activations and
    sets the rest to one. q = 0 keeps every positive pixel.
    """
    if not 0.0 <= q < 1.0:
        raise ConfigurationError(f"q must be in [0, 1), got {q}")
    values = _values(cam)
    positive = values > 0
    if not positive.any():
        return np.zeros(values.shape, dtype=np.uint8)
    if q == 0.0:
        return positive.astype(np.uint8)
    cut = np.quantile(values[positive], q)
    return (positive & (values > cut)).astype(np.uint8)


def rotate_fuse(cam_producer: CamProducer, patch) -> np.ndarray:
    """
    Averages the CAMs of the patch rotated by 0, 90, 180 and 270 degrees after
    rotating each back, then renormalizes to [0, 1].
    """
    pixels = np.asarray(getattr(patch, "pixels", patch), dtype=np.float64)
    if pixels.ndim < 2 or pixels.shape[0] != pixels.shape[1]:
        raise ShapeError(f"rotate and fuse needs a square patch, got shape {pixels.shape}")
    fused = np.zeros(pixels.shape[:2])
    for k in range(ROTATIONS):
        cam = _values(cam_producer(np.rot90(pixels, k, axes=(0, 1))))
        fused += np.rot90(cam, -k, axes=(0, 1))
    return normalize_map(fused / ROTATIONS)


def disk(radius: int) -> np.ndarray:
    """Disk structuring element: offsets with dy² + dx² <= (radius + 0.5)²."""
    span = np.arange(-radius, radius + 1)
    return (span[:, None] ** 2 + span[None, :] ** 2) <= (radius + 0.5) ** 2


def morph_open(mask: np.ndarray, se_radius: int) -> np.ndarray:
    if se_radius < 1:
        raise ConfigurationError(f"se_radius must be >= 1, got {se_radius}")
    structure = disk(se_radius)
    binary = np.asarray(mask) > 0
    eroded = ndimage.binary_erosion(binary, structure=structure, border_value=0)
    opened = ndimage.binary_dilation(eroded, structure=structure, border_value=0)
    return opened.astype(np.uint8)


def make_initial_mask(cam_producer: CamProducer, patch, cfg: PostprocConfig = PostprocConfig()) -> InitialMask:
    cfg.validate()
    pixels = np.asarray(getattr(patch, "pixels", patch))
    if cfg.use_rotation:
        fused = rotate_fuse(cam_producer, pixels)
    else:
        fused = normalize_map(_values(cam_producer(pixels)))
    return InitialMask(patch_id=getattr(patch, "id", ""), mask=mask_from_cam(fused, cfg))


def mask_from_cam(cam, cfg: PostprocConfig) -> np.ndarray:
    """Threshold then (optionally) open an already fused CAM."""
    mask = quantile_threshold(cam, cfg.quantile_q)
    if cfg.use_opening:
        mask = morph_open(mask, cfg.se_radius)
    return mask


def _dice(predicted: np.ndarray, target: np.ndarray) -> float:
    p, g = predicted > 0, target > 0
    total = p.sum() + g.sum()
    return 1.0 if total == 0 else 2.0 * float((p & g).sum()) / float(total)


def grid_search_q(
    cams: Mapping[str, np.ndarray],
    ground_truth: Mapping[str, np.ndarray],
    qs: Sequence[float],
    se_radius: int,
    use_opening: bool = True,
) -> Tuple[float, List[Tuple[float, float]]]:
    """
    Scores every q by mean Dice against ground truth and returns the best q
    with the whole (q, mean Dice) table. Ties keep the smaller q.
    """
    if not qs:
        raise ConfigurationError("grid search needs at least one q")
    table = []
    for q in qs:
        cfg = PostprocConfig(quantile_q=q, se_radius=se_radius, use_opening=use_opening)
        scores = [_dice(mask_from_cam(cams[pid], cfg), ground_truth[pid]) for pid in sorted(cams)]
        table.append((float(q), float(np.mean(scores)) if scores else 0.0))
        logger.debug("grid q=%.3f mean dice %.4f", q, table[-1][1])
    best_q = max(table, key=lambda row: (row[1], -row[0]))[0]
    return best_q, table
