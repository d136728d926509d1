"""
Synthetic tumor-on-tissue patches with exact pixel masks.

Each patch is a pure function of (seed, params). Positive patches carry 1-4
smooth blobs whose outline is blurred before thresholding, and whose pixels
are blended into the tissue through a blurred alpha, so the visible boundary
is soft while the mask stays exact.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from epsam.errors import ConfigurationError, GenerationError
from epsam.util import image_io
from epsam.util.parallel import parallel_map

logger = logging.getLogger(__name__)

Label = Literal["positive", "negative"]
POSITIVE: Label = "positive"
NEGATIVE: Label = "negative"
SPLITS: Tuple[str, ...] = ("train", "valid", "test")
MANIFEST_NAME = "manifest.json"

_TISSUE_RGB = np.array([0.92, 0.76, 0.86])
_TUMOR_RGB = np.array([0.62, 0.40, 0.70])
_NUCLEUS_RGB = np.array([0.45, 0.55, 0.30])


@dataclass(frozen=True)
class GeneratorParams:
    size: int = 64
    noise: float = 0.03
    blob_count: Tuple[int, int] = (1, 4)
    fg_range: Tuple[float, float] = (0.20, 0.90)
    blur_sigma: float = 1.5
    max_attempts: int = 200

    def validate(self) -> None:
        if self.size <= 0 or self.size % 4 != 0:
            raise ConfigurationError(f"patch size must be a positive multiple of 4, got {self.size}")
        lo, hi = self.blob_count
        if not 1 <= lo <= hi:
            raise ConfigurationError(f"invalid blob count range {self.blob_count}")
        f_lo, f_hi = self.fg_range
        if not 0.0 <= f_lo <= f_hi <= 1.0:
            raise ConfigurationError(f"invalid foreground-fraction range {self.fg_range}")
        if self.noise < 0 or self.blur_sigma < 0:
            raise ConfigurationError("noise and blur_sigma must be non-negative")


@dataclass(frozen=True)
class DatasetParams:
    train: int = 64
    valid: int = 16
    test: int = 16
    slides: int = 12
    generator: GeneratorParams = field(default_factory=GeneratorParams)

    def counts(self) -> Dict[str, int]:
        return {"train": self.train, "valid": self.valid, "test": self.test}


@dataclass
class Patch:
    id: str
    slide_id: str
    pixels: np.ndarray
    label: Label

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass
class GroundTruthMask:
    patch_id: str
    mask: np.ndarray

    @property
    def foreground_fraction(self) -> float:
        return float(self.mask.mean())


@dataclass
class ManifestEntry:
    patch_id: str
    patch_path: str
    mask_path: str
    label: Label
    slide_id: str
    split: str


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    generator_seed: int
    params: Dict = field(default_factory=dict)
    root: Optional[Path] = field(default=None, compare=False)

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def positives(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.split(name) if e.label == POSITIVE]

    def entry(self, patch_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.patch_id == patch_id:
                return e
        raise KeyError(patch_id)

    def to_dict(self) -> Dict:
        return {
            "generator_seed": self.generator_seed,
            "params": self.params,
            "entries": [asdict(e) for e in self.entries],
        }

    @classmethod
    def from_dict(cls, data: Dict, root: Optional[Path] = None) -> "DatasetManifest":
        return cls(
            entries=[ManifestEntry(**e) for e in data["entries"]],
            generator_seed=int(data["generator_seed"]),
            params=data.get("params", {}),
            root=root,
        )

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        image_io.write_json(path, self.to_dict())
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetManifest":
        path = Path(path)
        manifest = cls.from_dict(image_io.read_json(path), root=path.parent)
        check_manifest(manifest)
        return manifest


def _texture(rng: np.random.Generator, n: int, base: np.ndarray, density: float, variation: float) -> np.ndarray:
    low = gaussian_filter(rng.standard_normal((n, n)), sigma=n / 8.0)
    low /= max(float(np.abs(low).max()), 1e-12)
    dots = gaussian_filter((rng.random((n, n)) < density).astype(np.float64), sigma=0.8)
    dots /= max(float(dots.max()), 1e-12)
    image = base[None, None, :] * (1.0 + variation * low[..., None])
    return image - 0.35 * dots[..., None] * _NUCLEUS_RGB[None, None, :]


def _blob_field(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    field_ = np.zeros((n, n))
    for _ in range(count):
        cy, cx = rng.uniform(0.15 * n, 0.85 * n, size=2)
        ry, rx = rng.uniform(0.18 * n, 0.42 * n, size=2)
        theta = rng.uniform(0.0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * math.cos(theta) + dy * math.sin(theta)) / rx
        v = (-dx * math.sin(theta) + dy * math.cos(theta)) / ry
        field_ = np.maximum(field_, (u * u + v * v <= 1.0).astype(np.float64))
    return field_


def generate_patch(
    seed: int,
    params: GeneratorParams = GeneratorParams(),
    label: Label = POSITIVE,
    patch_id: str = "",
    slide_id: str = "",
) -> Tuple[Patch, GroundTruthMask]:
    params.validate()
    if label not in (POSITIVE, NEGATIVE):
        raise ConfigurationError(f"unknown label '{label}'")
    rng = np.random.default_rng(seed)
    n = params.size
    tissue = _texture(rng, n, _TISSUE_RGB, density=0.01, variation=0.05)

    if label == NEGATIVE:
        mask = np.zeros((n, n), dtype=np.uint8)
        pixels = tissue
    else:
        f_lo, f_hi = params.fg_range
        lo, hi = params.blob_count
        for _ in range(params.max_attempts):
            count = int(rng.integers(lo, hi + 1))
            outline = gaussian_filter(_blob_field(rng, n, count), sigma=max(params.blur_sigma, 0.5) * 2.0)
            mask = (outline > 0.5).astype(np.uint8)
            if f_lo <= mask.mean() <= f_hi:
                break
        else:
            raise GenerationError(
                f"could not hit foreground-fraction range [{f_lo}, {f_hi}] "
                f"in {params.max_attempts} attempts (seed {seed})"
            )
        alpha = gaussian_filter(mask.astype(np.float64), sigma=params.blur_sigma)[..., None]
        tumor = _texture(rng, n, _TUMOR_RGB, density=0.12, variation=0.08)
        pixels = tissue * (1.0 - alpha) + tumor * alpha

    pixels = np.clip(pixels + rng.normal(0.0, params.noise, size=pixels.shape), 0.0, 1.0)
    return (
        Patch(id=patch_id, slide_id=slide_id, pixels=pixels, label=label),
        GroundTruthMask(patch_id=patch_id, mask=mask),
    )


def _allocate_slides(counts: Sequence[int], slides: int) -> List[int]:
    allocated = [1] * len(counts)
    for _ in range(slides - len(counts)):
        open_splits = [i for i, c in enumerate(counts) if allocated[i] < c]
        if not open_splits:
            raise ConfigurationError(f"{slides} slides cannot all receive patches from {sum(counts)} patches")
        best = max(open_splits, key=lambda i: counts[i] / allocated[i])
        allocated[best] += 1
    return allocated


def _patch_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def build_dataset(
    params: DatasetParams,
    seed: int,
    out_dir: Union[str, Path],
    workers: int = 1,
) -> DatasetManifest:
    """
    Generates every patch and mask, partitions slides across splits before
    assigning patches, and writes manifest.json into out_dir.
    """
    params.generator.validate()
    requested = [(name, count) for name, count in params.counts().items() if count > 0]
    for name, count in params.counts().items():
        if count < 0:
            raise ConfigurationError(f"negative patch count for split '{name}'")
        if count % 2:
            raise ConfigurationError(
                f"split '{name}' has {count} patches; positives and negatives cannot balance"
            )
    if not requested:
        raise ConfigurationError("no patches requested")
    if params.slides < len(requested):
        raise ConfigurationError(
            f"{params.slides} slides cannot cover {len(requested)} non-empty splits without sharing a slide"
        )

    rng = np.random.default_rng(seed)
    slide_ids = [f"slide_{i:03d}" for i in rng.permutation(params.slides)]
    per_split = _allocate_slides([c for _, c in requested], params.slides)

    jobs = []
    cursor = 0
    index = 0
    for (split, count), n_slides in zip(requested, per_split):
        split_slides = slide_ids[cursor : cursor + n_slides]
        cursor += n_slides
        labels: List[Label] = [POSITIVE] * (count // 2) + [NEGATIVE] * (count // 2)
        rng.shuffle(labels)
        for slide_id, run in zip(split_slides, np.array_split(np.arange(count), n_slides)):
            for j in run:
                patch_id = f"{split}-{slide_id}-{int(j):03d}"
                jobs.append((patch_id, slide_id, split, labels[int(j)], _patch_seed(seed, index)))
                index += 1

    out_dir = Path(out_dir)

    def _write(job) -> ManifestEntry:
        patch_id, slide_id, split, label, patch_seed = job
        patch, gt = generate_patch(patch_seed, params.generator, label, patch_id, slide_id)
        patch_rel = f"patches/{patch_id}.png"
        mask_rel = f"masks/{patch_id}.png"
        image_io.save_rgb(out_dir / patch_rel, patch.pixels)
        image_io.save_mask(out_dir / mask_rel, gt.mask)
        return ManifestEntry(patch_id, patch_rel, mask_rel, label, slide_id, split)

    entries = parallel_map(_write, jobs, workers)
    manifest = DatasetManifest(
        entries=entries,
        generator_seed=seed,
        params=_params_dict(params),
        root=out_dir,
    )
    check_manifest(manifest)
    manifest.save(out_dir / MANIFEST_NAME)
    logger.info("wrote %d patches over %d slides to %s", len(entries), params.slides, out_dir)
    return manifest


def _params_dict(params: DatasetParams) -> Dict:
    data = asdict(params)
    data["generator"]["blob_count"] = list(params.generator.blob_count)
    data["generator"]["fg_range"] = list(params.generator.fg_range)
    return data


def check_manifest(manifest: DatasetManifest) -> None:
    owners: Dict[str, str] = {}
    for entry in manifest.entries:
        if entry.split not in SPLITS:
            raise ConfigurationError(f"unknown split '{entry.split}' for {entry.patch_id}")
        owner = owners.setdefault(entry.slide_id, entry.split)
        if owner != entry.split:
            raise ConfigurationError(f"slide {entry.slide_id} appears in both '{owner}' and '{entry.split}'")
    for split in SPLITS:
        entries = manifest.split(split)
        positives = sum(1 for e in entries if e.label == POSITIVE)
        if positives * 2 != len(entries):
            raise ConfigurationError(
                f"split '{split}' is unbalanced: {positives} positive of {len(entries)}"
            )


def _resolve(manifest: DatasetManifest, relative: str) -> Path:
    return (manifest.root or Path(".")) / relative


def load_patch(manifest: DatasetManifest, entry: ManifestEntry) -> Patch:
    pixels = image_io.load_rgb(_resolve(manifest, entry.patch_path))
    return Patch(id=entry.patch_id, slide_id=entry.slide_id, pixels=pixels, label=entry.label)


def load_ground_truth(manifest: DatasetManifest, entry: ManifestEntry) -> GroundTruthMask:
    return GroundTruthMask(patch_id=entry.patch_id, mask=image_io.load_mask(_resolve(manifest, entry.mask_path)))
