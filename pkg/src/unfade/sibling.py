"""Feed-forward sibling prediction: dataset synthesis, encoder training, inference.

One encoder per film stock maps a 256x256 grayscale portrait to a single
512-dimensional style vector; broadcasting that vector through the generator
yields the sibling exemplar used to anchor projection.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import torch
import torch.nn.functional as F
import torchvision.models
import torchvision.transforms.functional as TF
from torch import nn

from .generator import Generator, LatentCode, broadcast, synthesize
from .imagecore import FilmModel, resample, to_grayscale

ENCODER_FORMAT_VERSION = 1

# Panchromatic stock converges faster in practice; the other two train longer.
EPOCHS_BY_FILM = {
    FilmModel.BLUE_SENSITIVE: 100,
    FilmModel.ORTHOCHROMATIC: 100,
    FilmModel.PANCHROMATIC: 70,
}


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int, value: float):
        super().__init__(f"training loss became non-finite at epoch {epoch}, "
                         f"step {step} (value {value})")
        self.epoch = epoch
        self.step = step
        self.value = value


@dataclass
class EncoderTrainConfig:
    """Hyperparameters for sibling encoder training."""

    sample_count: int = 16128
    batch_size: int = 4
    learning_rate: float = 5e-4
    epochs: int = 100
    brightness_range: tuple[float, float] = (0.8, 1.8)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    hue_range: tuple[float, float] = (-0.03, 0.03)
    input_size: int = 256

    def __post_init__(self):
        if self.sample_count < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("sample_count, batch_size and epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.input_size < 32:
            raise ValueError("input_size must be >= 32")
        for name, (lo, hi) in (("brightness", self.brightness_range),
                               ("contrast", self.contrast_range),
                               ("hue", self.hue_range)):
            if lo > hi:
                raise ValueError(f"{name} range {lo, hi} is inverted")
        if not (-0.5 <= self.hue_range[0] and self.hue_range[1] <= 0.5):
            raise ValueError("hue factors must lie in [-0.5, 0.5]")

    @classmethod
    def for_film(cls, film: FilmModel, **overrides) -> "EncoderTrainConfig":
        overrides.setdefault("epochs", EPOCHS_BY_FILM[film])
        return cls(**overrides)


@dataclass
class TrainingPair:
    """Grayscale encoder input together with the style code that produced it."""

    input: torch.Tensor
    target: LatentCode


def _pair_seed(base_seed: int, index: int) -> int:
    # Distinct streams per (dataset seed, sample index) with cheap mixing.
    mixed = (base_seed * 0x9E3779B97F4A7C15 + (index + 1) * 0xBF58476D1CE4E5B9)
    return mixed % (2 ** 63)


class TrainingSet(Sequence[TrainingPair]):
    """Lazy, seed-reproducible stream of (grayscale input, latent target) pairs.

    Each index owns an independent random stream, so random access and
    re-iteration return identical pairs without materializing the set.
    """

    def __init__(self, generator: Generator, film: FilmModel,
                 cfg: EncoderTrainConfig, seed: int):
        self.generator = generator
        self.film = film
        self.cfg = cfg
        self.seed = seed

    def __len__(self) -> int:
        return self.cfg.sample_count

    def __getitem__(self, index: int) -> TrainingPair:
        if not 0 <= index < len(self):
            raise IndexError(index)
        g = torch.Generator().manual_seed(_pair_seed(self.seed, index))
        z = torch.randn(1, self.generator.latent_dim, generator=g)
        with torch.no_grad():
            w = self.generator.mapping(z)[0]
            code = LatentCode(w)
            render = synthesize(self.generator,
                                broadcast(code, self.generator.num_layers)).image
        img = render.clamp(0.0, 1.0)
        img = resample(img, (self.cfg.input_size, self.cfg.input_size))
        img = self._augment(img, g)
        gray = to_grayscale(img, self.film)
        return TrainingPair(input=gray, target=code)

    def _augment(self, img: torch.Tensor, g: torch.Generator) -> torch.Tensor:
        def draw(lo, hi):
            return lo + (hi - lo) * float(torch.rand((), generator=g))

        brightness = draw(*self.cfg.brightness_range)
        contrast = draw(*self.cfg.contrast_range)
        hue = draw(*self.cfg.hue_range)
        # Color jitter happens on RGB, before the film response collapses
        # channels; identity factors are skipped so zero-width ranges leave
        # the render bit-exact.
        if brightness != 1.0:
            img = TF.adjust_brightness(img, brightness)
        if contrast != 1.0:
            img = TF.adjust_contrast(img, contrast)
        if hue != 0.0:
            img = TF.adjust_hue(img, hue)
        return img

    def manifest(self) -> dict:
        return {
            "film": self.film.value,
            "seed": self.seed,
            "sample_count": self.cfg.sample_count,
            "input_size": self.cfg.input_size,
            "latent_distribution": "native-prior",
            "brightness_range": list(self.cfg.brightness_range),
            "contrast_range": list(self.cfg.contrast_range),
            "hue_range": list(self.cfg.hue_range),
        }


def generate_training_set(generator: Generator, film: FilmModel,
                          cfg: EncoderTrainConfig, seed: int) -> TrainingSet:
    return TrainingSet(generator, film, cfg, seed)


class SiblingEncoder(nn.Module):
    """ResNet18-topology regressor from one grayscale channel to a style vector."""

    def __init__(self, latent_dim: int = 512, input_size: int = 256, seed: int = 0):
        super().__init__()
        self.latent_dim = latent_dim
        self.input_size = input_size
        self.seed = seed
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            net = torchvision.models.resnet18(weights=None, num_classes=latent_dim)
            net.conv1 = nn.Conv2d(1, 64, kernel_size=7, stride=2, padding=3, bias=False)
            nn.init.kaiming_normal_(net.conv1.weight, mode="fan_out", nonlinearity="relu")
        self.net = net

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected batch of shape (B, 1, H, W), got {tuple(x.shape)}")
        return self.net(x)


@dataclass
class TrainingResult:
    encoder: SiblingEncoder
    epoch_mean_l1: list[float]
    held_out_l1: list[float] = field(default_factory=list)
    checkpoint_paths: list[Path] = field(default_factory=list)


def _evaluate_l1(encoder: SiblingEncoder, pairs: Sequence[TrainingPair]) -> float:
    encoder.eval()
    with torch.no_grad():
        x = torch.stack([p.input for p in pairs])
        y = torch.stack([p.target.values for p in pairs])
        value = float(F.l1_loss(encoder(x), y))
    encoder.train()
    return value


def train_encoder(pairs: Sequence[TrainingPair], cfg: EncoderTrainConfig,
                  encoder: Optional[SiblingEncoder] = None, seed: int = 0,
                  log_path: Optional[Union[str, Path]] = None,
                  checkpoint_dir: Optional[Union[str, Path]] = None,
                  film: Optional[FilmModel] = None,
                  held_out: Optional[Sequence[TrainingPair]] = None) -> TrainingResult:
    """Minimize mean absolute latent error with Adam over the pair stream.

    Emits one checkpoint per epoch when checkpoint_dir is given and
    line-delimited progress records (epoch, step, l1) when log_path is given.
    ``held_out`` pairs, if any, are scored after every epoch. A non-finite
    loss aborts with the epoch and step in the error.
    """
    if len(pairs) == 0:
        raise ValueError("training stream is empty")
    first = pairs[0]
    if encoder is None:
        encoder = SiblingEncoder(latent_dim=first.target.dim,
                                 input_size=first.input.shape[-1], seed=seed)
    encoder.train()
    optimizer = torch.optim.Adam(encoder.parameters(), lr=cfg.learning_rate)
    shuffle_rng = torch.Generator().manual_seed(seed)
    log_file = open(log_path, "w") if log_path is not None else None
    checkpoints: list[Path] = []
    history: list[float] = []
    held_out_history: list[float] = []
    try:
        for epoch in range(cfg.epochs):
            order = torch.randperm(len(pairs), generator=shuffle_rng).tolist()
            epoch_losses = []
            for step, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch = [pairs[i] for i in order[start:start + cfg.batch_size]]
                x = torch.stack([p.input for p in batch])
                y = torch.stack([p.target.values for p in batch])
                pred = encoder(x)
                loss = F.l1_loss(pred, y)
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise TrainingDivergedError(epoch, step, value)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_losses.append(value)
                if log_file is not None:
                    log_file.write(json.dumps(
                        {"epoch": epoch, "step": step, "l1": value}) + "\n")
            history.append(sum(epoch_losses) / len(epoch_losses))
            if held_out:
                held_out_history.append(_evaluate_l1(encoder, held_out))
            if checkpoint_dir is not None:
                path = Path(checkpoint_dir) / f"encoder-epoch{epoch:04d}.pt"
                save_encoder(encoder, path, film=film)
                checkpoints.append(path)
    finally:
        if log_file is not None:
            log_file.close()
    encoder.eval()
    return TrainingResult(encoder=encoder, epoch_mean_l1=history,
                          held_out_l1=held_out_history,
                          checkpoint_paths=checkpoints)


def predict_sibling(encoder: SiblingEncoder, generator: Generator,
                    img: torch.Tensor) -> tuple[LatentCode, torch.Tensor]:
    """Predict the sibling code for a grayscale portrait and render it.

    The image is resampled to the encoder's input size; the returned render
    is the broadcast synthesis at the generator's full resolution.
    """
    if img.ndim != 3 or img.shape[0] != 1:
        raise ValueError(f"expected grayscale image (1, H, W), got {tuple(img.shape)}")
    encoder.eval()
    x = resample(img, (encoder.input_size, encoder.input_size))
    with torch.no_grad():
        w = encoder(x.unsqueeze(0))[0]
        code = LatentCode(w)
        render = synthesize(generator, broadcast(code, generator.num_layers)).image
    return code, render


def save_encoder(encoder: SiblingEncoder, path: Union[str, Path],
                 film: Optional[FilmModel] = None) -> None:
    torch.save({
        "format_version": ENCODER_FORMAT_VERSION,
        "film": film.value if film is not None else None,
        "latent_dim": encoder.latent_dim,
        "input_size": encoder.input_size,
        "state_dict": encoder.state_dict(),
    }, Path(path))


def load_encoder(path: Union[str, Path],
                 expect_film: Optional[FilmModel] = None) -> SiblingEncoder:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format_version") != ENCODER_FORMAT_VERSION:
        raise ValueError(f"unsupported encoder checkpoint format "
                         f"{payload.get('format_version')!r}")
    if expect_film is not None:
        tagged = payload.get("film")
        if tagged != expect_film.value:
            raise ValueError(f"checkpoint is tagged for film {tagged!r}, "
                             f"expected {expect_film.value!r}")
    encoder = SiblingEncoder(latent_dim=payload["latent_dim"],
                             input_size=payload["input_size"])
    encoder.load_state_dict(payload["state_dict"])
    encoder.eval()
    return encoder
