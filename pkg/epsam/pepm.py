"""
Pixel-level entropy point prompts.

The "entropy" of a pixel is its activation divided by the total activation of
the map. It is a normalized activation, not a Shannon entropy, and prompts are
drawn from it without replacement.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Tuple, Union

import numpy as np

from epsam.cam import EnhancedCam
from epsam.errors import ConfigurationError, DomainError, SamplingError
from epsam.util import image_io

logger = logging.getLogger(__name__)

FOREGROUND = "foreground"
Strategy = Literal["entropy", "random", "mask", "gt"]
STRATEGIES: Tuple[str, ...] = ("entropy", "random", "mask", "gt")


@dataclass(frozen=True)
class PepmConfig:
    k: int = 50
    seed: int = 0
    strategy: str = "entropy"

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown prompt strategy '{self.strategy}', expected one of {STRATEGIES}")


@dataclass
class EntropyMap:
    values: np.ndarray
    degenerate: bool = False


@dataclass
class PointPromptSet:
    points: List[Tuple[int, int, str]] = field(default_factory=list)
    patch_id: str = ""

    @property
    def count(self) -> int:
        return len(self.points)

    def coordinates(self) -> List[Tuple[int, int]]:
        return [(r, c) for r, c, _ in self.points]

    def to_row(self) -> Dict:
        return {"patch_id": self.patch_id, "points": [[r, c] for r, c, _ in self.points]}

    @classmethod
    def from_row(cls, row: Dict) -> "PointPromptSet":
        return cls(points=[(int(r), int(c), FOREGROUND) for r, c in row["points"]], patch_id=row["patch_id"])


def entropy_map(activation) -> EntropyMap:
    values = np.asarray(activation.values if isinstance(activation, EnhancedCam) else activation, dtype=np.float64)
    if (values < 0).any():
        raise DomainError(f"activation must be non-negative, found minimum {values.min()}")
    total = values.sum()
    if total <= 0:
        return EntropyMap(values=np.zeros_like(values), degenerate=True)
    return EntropyMap(values=values / total)


def _draw(weights: np.ndarray, k: int, rng: np.random.Generator, shape: Tuple[int, int]) -> List[Tuple[int, int, str]]:
    flat = weights.ravel()
    support = np.flatnonzero(flat > 0)
    if len(support) <= k:
        chosen = support
    else:
        chosen = rng.choice(flat.size, size=k, replace=False, p=flat / flat.sum())
    rows, cols = np.unravel_index(chosen, shape)
    return [(int(r), int(c), FOREGROUND) for r, c in zip(rows, cols)]


def sample_points(entropy: EntropyMap, k: int, rng: np.random.Generator) -> PointPromptSet:
    """
    Draws k distinct pixels with probability proportional to their entropy.
    When fewer than k pixels have positive probability, all of them are returned.
    """
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if entropy.degenerate or not (entropy.values > 0).any():
        raise SamplingError("entropy map is degenerate (all-zero activation); skip this patch")
    return PointPromptSet(points=_draw(entropy.values, k, rng, entropy.values.shape))


def uniform_points(region: np.ndarray, k: int, rng: np.random.Generator) -> PointPromptSet:
    """k distinct pixels drawn uniformly from the nonzero cells of region."""
    region = np.asarray(region) > 0
    if not region.any():
        raise SamplingError("prompt region is empty; skip this patch")
    return PointPromptSet(points=_draw(region.astype(np.float64), k, rng, region.shape))


def make_prompts(
    strategy: str,
    k: int,
    rng: np.random.Generator,
    cam: Optional[np.ndarray] = None,
    initial_mask: Optional[np.ndarray] = None,
    ground_truth: Optional[np.ndarray] = None,
    patch_id: str = "",
) -> PointPromptSet:
    """
    entropy: PEPM on the CAM; random: anywhere in the patch; mask: uniform
    inside the initial mask; gt: uniform inside the ground truth.
    """
    if strategy == "entropy":
        prompts = sample_points(entropy_map(cam), k, rng)
    elif strategy == "random":
        prompts = uniform_points(np.ones(np.shape(cam if cam is not None else initial_mask)), k, rng)
    elif strategy == "mask":
        prompts = uniform_points(initial_mask, k, rng)
    elif strategy == "gt":
        prompts = uniform_points(ground_truth, k, rng)
    else:
        raise ConfigurationError(f"unknown prompt strategy '{strategy}'")
    prompts.patch_id = patch_id
    return prompts


def patch_rng(seed: int, patch_id: str) -> np.random.Generator:
    """Per-patch generator so a patch's prompts do not depend on iteration order."""
    return np.random.default_rng([seed, *patch_id.encode("utf-8")])


def save_prompts(path: Union[str, Path], prompts: Iterable[PointPromptSet]) -> None:
    image_io.write_jsonl(path, (p.to_row() for p in prompts))


def load_prompts(path: Union[str, Path]) -> Dict[str, PointPromptSet]:
    return {row["patch_id"]: PointPromptSet.from_row(row) for row in image_io.read_jsonl(path)}
