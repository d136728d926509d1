"""
Desk-scale promptable segmenter: a frozen convolutional image encoder, a
Gaussian-heatmap point prompt encoder and a small trainable mask decoder with
a predicted-quality head. Only the decoder is ever trained.
"""
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from epsam.errors import ConfigurationError, PromptError, ShapeError, TrainingError
from epsam.pepm import PointPromptSet
from epsam.syndata import Patch
from epsam.util import checkpoint

logger = logging.getLogger(__name__)

SMOOTH = 1.0


@dataclass(frozen=True)
class DecoderHyper:
    lr: float = 2e-4
    epochs: int = 20
    batch_size: int = 8
    weight_decay: float = 1e-2
    seed: int = 0
    quality_weight: float = 1.0

    def validate(self) -> None:
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("decoder lr must be positive, epochs and batch_size >= 1")


PAPER_DECODER_HYPER = DecoderHyper(lr=2e-4, epochs=20)


@dataclass(frozen=True)
class SegmenterConfig:
    backend: str = "conv-pyramid"
    encoder_seed: int = 0
    embed_dim: int = 64
    decoder_width: int = 48
    prompt_sigma: float = 1.5
    hyper: DecoderHyper = field(default_factory=DecoderHyper)

    def validate(self) -> None:
        if self.backend not in BACKENDS:
            raise ConfigurationError(f"unknown segmenter backend '{self.backend}'")
        if self.embed_dim % 8:
            raise ConfigurationError(f"embed_dim must be a multiple of 8, got {self.embed_dim}")
        if self.prompt_sigma <= 0:
            raise ConfigurationError("prompt_sigma must be positive")
        self.hyper.validate()


class FrozenEncoder(nn.Module):
    """Randomly initialized, never-trained convolutional pyramid (stride 4)."""

    stride = 4

    def __init__(self, embed_dim: int = 64, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.body = nn.Sequential(
                nn.Conv2d(3, 32, 3, stride=2, padding=1),
                nn.ReLU(),
                nn.Conv2d(32, 64, 3, stride=2, padding=1),
                nn.ReLU(),
                nn.Conv2d(64, embed_dim, 3, padding=1),
            )
        self.embed_dim = embed_dim
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True) -> "FrozenEncoder":
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.group_norm(self.body(x), num_groups=8)


BACKENDS = {"conv-pyramid": FrozenEncoder}


class MaskDecoder(nn.Module):
    def __init__(self, embed_dim: int = 64, width: int = 48):
        super().__init__()
        self.fuse = nn.Sequential(
            nn.Conv2d(embed_dim + 1, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(),
        )
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(width, 32, 2, stride=2),
            nn.ReLU(),
            nn.ConvTranspose2d(32, 16, 2, stride=2),
            nn.ReLU(),
            nn.Conv2d(16, 1, 1),
        )
        self.quality = nn.Linear(width, 1)

    def forward(self, embedding: torch.Tensor, heatmap: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        hidden = self.fuse(torch.cat([embedding, heatmap], dim=1))
        logits = self.upscale(hidden)[:, 0]
        quality = torch.sigmoid(self.quality(hidden.mean(dim=(2, 3))))[:, 0]
        return logits, quality


@dataclass
class ImageEmbedding:
    patch_id: str
    values: torch.Tensor


@dataclass
class DecoderWeights:
    state_dict: Dict[str, torch.Tensor]
    init_seed: int
    epochs_trained: int = 0
    architecture: Dict = field(default_factory=lambda: {"embed_dim": 64, "width": 48})
    hyper: Dict = field(default_factory=dict)

    def build(self) -> MaskDecoder:
        model = MaskDecoder(self.architecture["embed_dim"], self.architecture["width"])
        model.load_state_dict(self.state_dict)
        return model

    def save(self, path: Union[str, Path]) -> Path:
        metadata = {
            "kind": "decoder",
            "init_seed": self.init_seed,
            "epochs_trained": self.epochs_trained,
            "architecture": self.architecture,
            "hyper": self.hyper,
        }
        return checkpoint.save(path, self.state_dict, metadata)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DecoderWeights":
        state_dict, metadata = checkpoint.load(path)
        if metadata.get("kind") != "decoder":
            raise ConfigurationError(f"{path} is not a decoder checkpoint")
        return cls(
            state_dict=state_dict,
            init_seed=metadata["init_seed"],
            epochs_trained=metadata["epochs_trained"],
            architecture=metadata["architecture"],
            hyper=metadata["hyper"],
        )


@dataclass
class PredictedMask:
    patch_id: str
    logits: np.ndarray
    mask: np.ndarray
    predicted_quality: float


@dataclass
class TrainingPair:
    patch: Patch
    target: np.ndarray
    prompts: PointPromptSet


def init_decoder(seed: int, embed_dim: int = 64, width: int = 48) -> DecoderWeights:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MaskDecoder(embed_dim, width)
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return DecoderWeights(state_dict=state, init_seed=seed, architecture={"embed_dim": embed_dim, "width": width})


def _patch_tensor(patch: Union[Patch, np.ndarray]) -> torch.Tensor:
    pixels = np.asarray(patch.pixels if isinstance(patch, Patch) else patch, dtype=np.float32)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"encoder expects an H×W×3 patch, got shape {pixels.shape}")
    if pixels.shape[0] != pixels.shape[1] or pixels.shape[0] % FrozenEncoder.stride:
        raise ShapeError(f"encoder expects a square patch with side divisible by 4, got {pixels.shape[:2]}")
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(pixels, 2, 0)))[None]


def encode_image(patch: Union[Patch, np.ndarray], encoder: FrozenEncoder) -> ImageEmbedding:
    with torch.no_grad():
        values = encoder(_patch_tensor(patch))[0]
    return ImageEmbedding(patch_id=getattr(patch, "id", ""), values=values)


def render_heatmap(prompts: PointPromptSet, grid: Tuple[int, int], stride: int, sigma: float) -> torch.Tensor:
    """
    Sum of Gaussians (sigma in embedding cells) centred on each prompt, scaled
    so the peak is at most one. Points are visited in sorted order, which
    makes the result independent of prompt order.
    """
    h, w = grid
    ys = torch.arange(h, dtype=torch.float64)[:, None]
    xs = torch.arange(w, dtype=torch.float64)[None, :]
    heat = torch.zeros(h, w, dtype=torch.float64)
    for r, c in sorted(prompts.coordinates()):
        cy = (r + 0.5) / stride - 0.5
        cx = (c + 0.5) / stride - 0.5
        heat += torch.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * sigma**2))
    heat /= max(1.0, float(heat.max()))
    return heat.float()


def predict_mask(
    embedding: ImageEmbedding,
    prompts: PointPromptSet,
    decoder: Union[DecoderWeights, MaskDecoder],
    prompt_sigma: float = 1.5,
) -> PredictedMask:
    if prompts.count == 0:
        raise PromptError(f"empty prompt set for patch '{embedding.patch_id}'")
    model = decoder.build() if isinstance(decoder, DecoderWeights) else decoder
    model.eval()
    grid = tuple(embedding.values.shape[-2:])
    heat = render_heatmap(prompts, grid, FrozenEncoder.stride, prompt_sigma)
    with torch.no_grad():
        logits, quality = model(embedding.values[None], heat[None, None])
    logits_np = logits[0].double().numpy()
    return PredictedMask(
        patch_id=embedding.patch_id,
        logits=logits_np,
        mask=(logits_np > 0).astype(np.uint8),
        predicted_quality=float(quality[0]),
    )


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = SMOOTH) -> torch.Tensor:
    probs = torch.sigmoid(logits)
    target = target.to(probs.dtype)
    intersection = (probs * target).sum(dim=(-2, -1))
    total = probs.sum(dim=(-2, -1)) + target.sum(dim=(-2, -1))
    return (1.0 - (2.0 * intersection + eps) / (total + eps)).mean()


def soft_iou_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = SMOOTH) -> torch.Tensor:
    probs = torch.sigmoid(logits)
    target = target.to(probs.dtype)
    intersection = (probs * target).sum(dim=(-2, -1))
    union = probs.sum(dim=(-2, -1)) + target.sum(dim=(-2, -1)) - intersection
    return (1.0 - (intersection + eps) / (union + eps)).mean()


def seg_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = SMOOTH) -> torch.Tensor:
    """Dice loss + IoU loss on sigmoid probabilities, weighted 1:1."""
    if logits.shape[-2:] != target.shape[-2:]:
        raise ShapeError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ")
    return soft_dice_loss(logits, target, eps) + soft_iou_loss(logits, target, eps)


def _hard_iou(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    predicted = logits > 0
    truth = target > 0.5
    intersection = (predicted & truth).sum(dim=(-2, -1)).float()
    union = (predicted | truth).sum(dim=(-2, -1)).float()
    return torch.where(union > 0, intersection / union.clamp(min=1.0), torch.ones_like(union))


class PromptableSegmenter:
    """Frozen encoder plus prompt rendering; decoders are passed in per call."""

    def __init__(self, encoder: FrozenEncoder, prompt_sigma: float = 1.5, backend: str = "conv-pyramid"):
        self.encoder = encoder
        self.prompt_sigma = prompt_sigma
        self.backend = backend

    @classmethod
    def create(cls, cfg: SegmenterConfig) -> "PromptableSegmenter":
        cfg.validate()
        encoder = BACKENDS[cfg.backend](embed_dim=cfg.embed_dim, seed=cfg.encoder_seed)
        return cls(encoder, cfg.prompt_sigma, cfg.backend)

    def save(self, path: Union[str, Path]) -> Path:
        metadata = {
            "kind": "encoder",
            "backend": self.backend,
            "embed_dim": self.encoder.embed_dim,
            "prompt_sigma": self.prompt_sigma,
        }
        return checkpoint.save(path, self.encoder.state_dict(), metadata)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PromptableSegmenter":
        state_dict, metadata = checkpoint.load(path)
        if metadata.get("kind") != "encoder":
            raise ConfigurationError(f"{path} is not an encoder checkpoint")
        encoder = BACKENDS[metadata["backend"]](embed_dim=metadata["embed_dim"])
        encoder.load_state_dict(state_dict)
        return cls(encoder, metadata["prompt_sigma"], metadata["backend"])

    def encode(self, patch: Union[Patch, np.ndarray]) -> ImageEmbedding:
        return encode_image(patch, self.encoder)

    def predict(self, patch: Patch, prompts: PointPromptSet, decoder: Union[DecoderWeights, MaskDecoder]) -> PredictedMask:
        return predict_mask(self.encode(patch), prompts, decoder, self.prompt_sigma)

    def heatmap(self, prompts: PointPromptSet, embedding: ImageEmbedding) -> torch.Tensor:
        return render_heatmap(prompts, tuple(embedding.values.shape[-2:]), FrozenEncoder.stride, self.prompt_sigma)


def finetune_decoder(
    pairs: Sequence[TrainingPair],
    decoder_init: DecoderWeights,
    hyper: DecoderHyper,
    segmenter: PromptableSegmenter,
) -> DecoderWeights:
    """
    Trains only the mask decoder (AdamW, Dice + IoU loss, quality head against
    the true IoU) and returns the final-epoch weights.
    """
    hyper.validate()
    if not pairs:
        raise ConfigurationError("cannot fine-tune the decoder on an empty pair list")

    embeddings, heatmaps, targets = [], [], []
    for pair in pairs:
        if pair.prompts.count == 0:
            raise PromptError(f"empty prompt set for patch '{pair.patch.id}'")
        embedding = segmenter.encode(pair.patch)
        embeddings.append(embedding.values)
        heatmaps.append(segmenter.heatmap(pair.prompts, embedding)[None])
        targets.append(torch.from_numpy(np.asarray(pair.target, dtype=np.float32)))
    embeddings_t = torch.stack(embeddings)
    heatmaps_t = torch.stack(heatmaps)
    targets_t = torch.stack(targets)

    model = decoder_init.build()
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    generator = torch.Generator().manual_seed(hyper.seed)

    for epoch in tqdm(range(1, hyper.epochs + 1), desc="decoder", leave=False, disable=None):
        order = torch.randperm(len(pairs), generator=generator)
        total = 0.0
        for start in range(0, len(order), hyper.batch_size):
            index = order[start : start + hyper.batch_size]
            logits, quality = model(embeddings_t[index], heatmaps_t[index])
            target = targets_t[index]
            loss = seg_loss(logits, target)
            loss = loss + hyper.quality_weight * F.mse_loss(quality, _hard_iou(logits.detach(), target))
            if not torch.isfinite(loss):
                raise TrainingError("decoder loss is NaN", epoch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(index)
        logger.debug("decoder epoch %d loss %.4f", epoch, total / len(pairs))

    return DecoderWeights(
        state_dict={k: v.detach().clone() for k, v in model.state_dict().items()},
        init_seed=decoder_init.init_seed,
        epochs_trained=decoder_init.epochs_trained + hyper.epochs,
        architecture=dict(decoder_init.architecture),
        hyper=asdict(hyper),
    )
