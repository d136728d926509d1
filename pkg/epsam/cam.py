"""
Patch classifier with attention dropout and an explicit visual prompt channel,
and class activation maps extracted from it.
"""
import copy
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from epsam.errors import ConfigurationError, ShapeError, TrainingError
from epsam.syndata import POSITIVE, DatasetManifest, Patch, load_patch
from epsam.util import checkpoint

logger = logging.getLogger(__name__)

ArrayOrPatch = Union[np.ndarray, Patch]


@dataclass(frozen=True)
class AdlConfig:
    drop_threshold_ratio: float = 0.9
    drop_rate: float = 0.75
    attach_points: Tuple[str, ...] = ("stage3", "stage4")

    def validate(self) -> None:
        if not 0.0 < self.drop_threshold_ratio < 1.0:
            raise ConfigurationError(f"drop_threshold_ratio must be in (0, 1), got {self.drop_threshold_ratio}")
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ConfigurationError(f"drop_rate must be in [0, 1], got {self.drop_rate}")


@dataclass(frozen=True)
class ClassifierHyper:
    lr: float = 1e-3
    weight_decay: float = 1e-3
    batch_size: int = 16
    epochs: int = 10
    freq_cut_ratio: float = 0.25
    use_evp: bool = True
    augment: bool = True
    strides: Tuple[int, ...] = (2, 2, 1, 1)

    def validate(self) -> None:
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigurationError("classifier lr must be positive and weight_decay non-negative")
        if self.batch_size < 2 or self.epochs < 1:
            raise ConfigurationError("classifier batch_size must be >= 2 and epochs >= 1")
        if not 0.0 < self.freq_cut_ratio < 1.0:
            raise ConfigurationError(f"freq_cut_ratio must be in (0, 1), got {self.freq_cut_ratio}")
        if len(self.strides) != 4 or any(s not in (1, 2) for s in self.strides):
            raise ConfigurationError(f"strides must be four values in {{1, 2}}, got {self.strides}")


PAPER_CLASSIFIER_HYPER = ClassifierHyper(lr=1e-5, weight_decay=1e-3, batch_size=16, epochs=50)


@dataclass
class EnhancedCam:
    patch_id: str
    values: np.ndarray


def normalize_map(values: np.ndarray) -> np.ndarray:
    """
    Min-max normalization to [0, 1]; a constant map becomes all zeros.
    """
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0.0:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def _pixels(patch: ArrayOrPatch) -> np.ndarray:
    pixels = patch.pixels if isinstance(patch, Patch) else np.asarray(patch, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    if pixels.ndim != 3 or pixels.shape[0] != pixels.shape[1]:
        raise ShapeError(f"expected a square H×W×C patch, got shape {pixels.shape}")
    return pixels


def extract_evp(patch: ArrayOrPatch, freq_cut_ratio: float = 0.25) -> np.ndarray:
    """
    High-frequency content of a patch.

    Removes the centered low-frequency square (side freq_cut_ratio × size)
    from every channel's spectrum, takes the magnitude of the inverse
    transform, averages channels and min-max normalizes.
    """
    if not 0.0 < freq_cut_ratio < 1.0:
        raise ConfigurationError(f"freq_cut_ratio must be in (0, 1), got {freq_cut_ratio}")
    pixels = _pixels(patch)
    n = pixels.shape[0]
    side = max(1, int(round(freq_cut_ratio * n)))
    freqs = np.abs(np.fft.fftfreq(n) * n)
    low = (freqs[:, None] < side / 2.0) & (freqs[None, :] < side / 2.0)

    spectrum = np.fft.fft2(pixels, axes=(0, 1))
    spectrum[low] = 0.0
    magnitude = np.abs(np.fft.ifft2(spectrum, axes=(0, 1))).mean(axis=2)

    # numerically zero means no high-frequency content at all
    if magnitude.max() <= 1e-8 * max(1.0, float(np.abs(pixels).max())):
        return np.zeros((n, n))
    return normalize_map(magnitude)


def attention_map(features: torch.Tensor) -> torch.Tensor:
    return features.mean(dim=1, keepdim=True)


def drop_mask(attention: torch.Tensor, drop_threshold_ratio: float) -> torch.Tensor:
    """0 where the attention exceeds ratio × its per-sample maximum, 1 elsewhere."""
    threshold = drop_threshold_ratio * attention.amax(dim=(-2, -1), keepdim=True)
    return (attention <= threshold).to(attention.dtype)


def importance_map(attention: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(attention)


def adl_forward(
    features: torch.Tensor,
    cfg: AdlConfig,
    rng: Optional[torch.Generator],
    training: bool,
) -> torch.Tensor:
    if not training:
        return features
    attention = attention_map(features)
    use_drop = torch.rand((), generator=rng).item() < cfg.drop_rate
    if use_drop:
        selected = drop_mask(attention, cfg.drop_threshold_ratio)
    else:
        selected = importance_map(attention)
    return features * selected


class AttentionDropout(nn.Module):
    def __init__(self, cfg: AdlConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.generator = torch.Generator().manual_seed(seed)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return adl_forward(x, self.cfg, self.generator, self.training)


def _conv_block(in_channels: int, out_channels: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


class AdlClassifier(nn.Module):
    """
    Four-stage CNN; ADL follows the first block of each attach-point stage.
    A single logit scores the positive class.
    """

    def __init__(
        self,
        in_channels: int = 4,
        widths: Sequence[int] = (16, 32, 64, 128),
        strides: Sequence[int] = (2, 2, 1, 1),
        adl: AdlConfig = AdlConfig(),
        seed: int = 0,
    ):
        super().__init__()
        stages = []
        previous = in_channels
        for index, (width, stride) in enumerate(zip(widths, strides), start=1):
            layers: List[nn.Module] = [_conv_block(previous, width, stride)]
            if f"stage{index}" in adl.attach_points:
                layers.append(AttentionDropout(adl, seed=seed + index))
            layers.append(_conv_block(width, width, 1))
            stages.append(nn.Sequential(*layers))
            previous = width
        self.features = nn.Sequential(*stages)
        self.head = nn.Linear(previous, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x).mean(dim=(2, 3))).squeeze(1)

    def class_evidence(self, x: torch.Tensor) -> torch.Tensor:
        features = self.features(x)
        return torch.einsum("nchw,c->nhw", features, self.head.weight[0])


@dataclass
class ClassifierWeights:
    state_dict: Dict[str, torch.Tensor]
    architecture: Dict
    hyper: Dict
    best_epoch: int = 0
    val_accuracy: float = 0.0
    seed: int = 0

    def build(self) -> AdlClassifier:
        arch = self.architecture
        adl = AdlConfig(
            drop_threshold_ratio=arch["adl"]["drop_threshold_ratio"],
            drop_rate=arch["adl"]["drop_rate"],
            attach_points=tuple(arch["adl"]["attach_points"]),
        )
        model = AdlClassifier(arch["in_channels"], arch["widths"], arch["strides"], adl, seed=self.seed)
        model.load_state_dict(self.state_dict)
        return model

    @property
    def in_channels(self) -> int:
        return int(self.architecture["in_channels"])

    def save(self, path: Union[str, Path]) -> Path:
        metadata = {
            "kind": "classifier",
            "architecture": self.architecture,
            "hyper": self.hyper,
            "best_epoch": self.best_epoch,
            "val_accuracy": self.val_accuracy,
            "seed": self.seed,
        }
        return checkpoint.save(path, self.state_dict, metadata)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ClassifierWeights":
        state_dict, metadata = checkpoint.load(path)
        if metadata.get("kind") != "classifier":
            raise ConfigurationError(f"{path} is not a classifier checkpoint")
        return cls(
            state_dict=state_dict,
            architecture=metadata["architecture"],
            hyper=metadata["hyper"],
            best_epoch=metadata["best_epoch"],
            val_accuracy=metadata["val_accuracy"],
            seed=metadata["seed"],
        )


def _architecture(in_channels: int, cfg: AdlConfig, strides: Sequence[int] = (2, 2, 1, 1)) -> Dict:
    return {
        "name": "adl-cnn4",
        "in_channels": in_channels,
        "widths": [16, 32, 64, 128],
        "strides": list(strides),
        "adl": {
            "drop_threshold_ratio": cfg.drop_threshold_ratio,
            "drop_rate": cfg.drop_rate,
            "attach_points": list(cfg.attach_points),
        },
    }


def classifier_input(patch: ArrayOrPatch, freq_cut_ratio: float, use_evp: bool, evp: Optional[np.ndarray] = None) -> np.ndarray:
    """C×H×W network input: RGB, plus the EVP as a fourth channel when enabled."""
    pixels = _pixels(patch)
    channels = [np.moveaxis(pixels, 2, 0)]
    if use_evp:
        if evp is None:
            evp = extract_evp(pixels, freq_cut_ratio)
        channels.append(np.asarray(evp)[None])
    return np.concatenate(channels, axis=0).astype(np.float32)


def _augment(batch: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    k = int(torch.randint(0, 4, (), generator=generator))
    batch = torch.rot90(batch, k, dims=(2, 3))
    if torch.rand((), generator=generator).item() < 0.5:
        batch = torch.flip(batch, dims=(3,))
    return batch


def _accuracy(model: AdlClassifier, x: torch.Tensor, y: torch.Tensor) -> float:
    model.eval()
    with torch.no_grad():
        predicted = (model(x) > 0).float()
    return float((predicted == y).float().mean())


def _load_split(manifest: DatasetManifest, split: str, hyper: ClassifierHyper) -> Tuple[torch.Tensor, torch.Tensor]:
    entries = manifest.split(split)
    if not entries:
        raise ConfigurationError(f"split '{split}' is empty; cannot train the classifier")
    inputs = [classifier_input(load_patch(manifest, e), hyper.freq_cut_ratio, hyper.use_evp) for e in entries]
    labels = [1.0 if e.label == POSITIVE else 0.0 for e in entries]
    return torch.from_numpy(np.stack(inputs)), torch.tensor(labels, dtype=torch.float32)


def train_classifier(
    manifest: DatasetManifest,
    cfg: AdlConfig = AdlConfig(),
    hyper: ClassifierHyper = ClassifierHyper(),
    seed: int = 0,
) -> ClassifierWeights:
    """
    Trains on image-level labels only with binary cross-entropy and Adam, and
    returns the weights of the best-validation-accuracy epoch.
    """
    cfg.validate()
    hyper.validate()
    x_train, y_train = _load_split(manifest, "train", hyper)
    x_valid, y_valid = _load_split(manifest, "valid", hyper)
    in_channels = x_train.shape[1]

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = AdlClassifier(in_channels, strides=hyper.strides, adl=cfg, seed=seed)
    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    loss_fn = nn.BCEWithLogitsLoss()

    best_state, best_epoch, best_accuracy = None, 0, -1.0
    for epoch in tqdm(range(1, hyper.epochs + 1), desc="train-cam", leave=False, disable=None):
        model.train()
        order = torch.randperm(len(x_train), generator=generator)
        losses = []
        for start in range(0, len(order), hyper.batch_size):
            index = order[start : start + hyper.batch_size]
            if len(index) < 2:
                continue
            batch = x_train[index]
            if hyper.augment:
                batch = _augment(batch, generator)
            optimizer.zero_grad()
            loss = loss_fn(model(batch), y_train[index])
            if not torch.isfinite(loss):
                raise TrainingError("classifier loss is NaN", epoch)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())

        accuracy = _accuracy(model, x_valid, y_valid)
        logger.info("train-cam epoch %d loss %.4f valid acc %.3f", epoch, float(np.mean(losses)), accuracy)
        if accuracy > best_accuracy:
            best_state = copy.deepcopy(model.state_dict())
            best_epoch, best_accuracy = epoch, accuracy

    return ClassifierWeights(
        state_dict=best_state,
        architecture=_architecture(in_channels, cfg, hyper.strides),
        hyper={k: v for k, v in asdict(hyper).items()},
        best_epoch=best_epoch,
        val_accuracy=best_accuracy,
        seed=seed,
    )


class CamExtractor:
    """
    Inference-mode wrapper around trained weights. Calling it on a patch array
    returns the normalized CAM, so it can serve as a rotate-and-fuse producer.
    """

    def __init__(self, weights: ClassifierWeights):
        self.weights = weights
        self.model = weights.build().eval()
        self.freq_cut_ratio = float(weights.hyper.get("freq_cut_ratio", 0.25))
        self.use_evp = weights.in_channels == 4

    def _input(self, pixels: np.ndarray, evp: Optional[np.ndarray]) -> torch.Tensor:
        pixels = _pixels(pixels)
        channels = pixels.shape[2] + (0 if evp is None else 1)
        if channels != self.weights.in_channels:
            raise ShapeError(
                f"weights expect {self.weights.in_channels} input channels, got {channels}"
            )
        if evp is not None and np.shape(evp) != pixels.shape[:2]:
            raise ShapeError(f"EVP shape {np.shape(evp)} does not match patch {pixels.shape[:2]}")
        stacked = [np.moveaxis(pixels, 2, 0)] + ([np.asarray(evp)[None]] if evp is not None else [])
        return torch.from_numpy(np.concatenate(stacked, axis=0).astype(np.float32))[None]

    def cam(self, pixels: np.ndarray, evp: Optional[np.ndarray]) -> np.ndarray:
        x = self._input(pixels, evp)
        with torch.no_grad():
            evidence = F.relu(self.model.class_evidence(x))[:, None]
            upsampled = F.interpolate(evidence, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return normalize_map(upsampled[0, 0].double().numpy())

    def probability(self, pixels: np.ndarray) -> float:
        pixels = _pixels(pixels)
        evp = extract_evp(pixels, self.freq_cut_ratio) if self.use_evp else None
        with torch.no_grad():
            return float(torch.sigmoid(self.model(self._input(pixels, evp)))[0])

    def __call__(self, pixels: np.ndarray) -> np.ndarray:
        pixels = _pixels(pixels)
        evp = extract_evp(pixels, self.freq_cut_ratio) if self.use_evp else None
        return self.cam(pixels, evp)


def extract_cam(
    weights: Union[ClassifierWeights, CamExtractor],
    patch: Patch,
    evp: Optional[np.ndarray],
) -> EnhancedCam:
    extractor = weights if isinstance(weights, CamExtractor) else CamExtractor(weights)
    return EnhancedCam(patch_id=patch.id, values=extractor.cam(patch.pixels, evp))
