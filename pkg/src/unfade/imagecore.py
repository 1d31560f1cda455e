"""Differentiable image operations for the antique-film degradation model.

Images are torch tensors of shape (C, H, W) with C in {1, 3} and float values
in [0, 1] at module boundaries. All operations are pure functions and keep
gradients flowing to both the image and any tensor-valued parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

Scalar = Union[float, torch.Tensor]


def _scalar_value(v: Scalar) -> float:
    if isinstance(v, torch.Tensor):
        return float(v.detach())
    return float(v)


class FilmModel(Enum):
    """Spectral sensitivity class of the negative."""

    BLUE_SENSITIVE = "blue"
    ORTHOCHROMATIC = "ortho"
    PANCHROMATIC = "pan"

    @classmethod
    def from_name(cls, name: str) -> "FilmModel":
        for variant in cls:
            if variant.value == name or variant.name.lower() == name.lower():
                return variant
        raise ValueError(f"unknown film model {name!r}; expected one of "
                         f"{[v.value for v in cls]}")


# RGB mixing weights per film stock. Blue-sensitive plates respond to the
# blue channel only, orthochromatic to green+blue, panchromatic uses the
# standard luma weights.
_FILM_WEIGHTS: dict[FilmModel, tuple[float, float, float]] = {
    FilmModel.BLUE_SENSITIVE: (0.0, 0.0, 1.0),
    FilmModel.ORTHOCHROMATIC: (0.0, 0.5, 0.5),
    FilmModel.PANCHROMATIC: (0.299, 0.587, 0.114),
}


@dataclass
class CRFParams:
    """Parametric camera response ``a + b * v**gamma``.

    Fields may be python floats or 0-dim tensors so the response can be
    optimized jointly with other variables. The identity response is
    (a, b, gamma) = (0, 1, 1).
    """

    a: Scalar = 0.0
    b: Scalar = 1.0
    gamma: Scalar = 1.0

    def __post_init__(self):
        if _scalar_value(self.b) <= 0:
            raise ValueError(f"gain b must be positive, got {_scalar_value(self.b)}")
        if _scalar_value(self.gamma) <= 0:
            raise ValueError(f"gamma must be positive, got {_scalar_value(self.gamma)}")

    @classmethod
    def identity(cls) -> "CRFParams":
        return cls(0.0, 1.0, 1.0)


@dataclass
class DegradationConfig:
    """Settings for the full degradation pipeline."""

    film: FilmModel = FilmModel.PANCHROMATIC
    sigma: float = 0.0
    crf: CRFParams = field(default_factory=CRFParams.identity)
    target_resolution: int = 256

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"blur sigma must be >= 0, got {self.sigma}")
        if self.target_resolution < 1:
            raise ValueError("target_resolution must be >= 1")


def to_grayscale(img: torch.Tensor, film: FilmModel) -> torch.Tensor:
    """Convert an RGB image to grayscale under the given film response.

    Returns a (1, H, W) tensor. Linear in the input channels.
    """
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected RGB image of shape (3, H, W), got {tuple(img.shape)}")
    weights = img.new_tensor(_FILM_WEIGHTS[film]).view(3, 1, 1)
    return (img * weights).sum(dim=0, keepdim=True)


def apply_crf(gray: torch.Tensor, crf: CRFParams) -> torch.Tensor:
    """Apply the parametric camera response ``a + b * v**gamma`` per pixel.

    The output is intentionally not clamped: the reconstruction loss compares
    the raw response, and clamping would kill gradients wherever the response
    leaves [0, 1]. Differentiable in the pixel values and in (a, b, gamma).
    """
    if _scalar_value(crf.b) <= 0:
        raise ValueError(f"gain b must be positive, got {_scalar_value(crf.b)}")
    if _scalar_value(crf.gamma) <= 0:
        raise ValueError(f"gamma must be positive, got {_scalar_value(crf.gamma)}")
    # pow() at v == 0 produces NaN gradients for the exponent; route zeros
    # (and any negative overshoot) around the pow so they contribute exactly
    # b * 0 without poisoning the backward pass.
    positive = gray > 0
    safe = torch.where(positive, gray, torch.ones_like(gray))
    powed = torch.where(positive, safe ** crf.gamma, torch.zeros_like(gray))
    return crf.a + crf.b * powed


def gaussian_kernel1d(sigma: float, dtype: torch.dtype = torch.float32,
                      device: Union[torch.device, str, None] = None) -> torch.Tensor:
    """Normalized 1-D Gaussian kernel truncated at radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ValueError(f"kernel requires sigma > 0, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    x = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    kernel = torch.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return kernel / kernel.sum()


def gaussian_blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with reflect padding; sigma = 0 is the identity.

    The kernel is truncated at radius ceil(3*sigma) and renormalized, so
    constant images are conserved exactly.
    """
    if sigma < 0:
        raise ValueError(f"blur sigma must be >= 0, got {sigma}")
    if img.ndim != 3:
        raise ValueError(f"expected image of shape (C, H, W), got {tuple(img.shape)}")
    if sigma == 0:
        return img.clone()
    kernel = gaussian_kernel1d(sigma, dtype=img.dtype, device=img.device)
    radius = (kernel.numel() - 1) // 2
    channels = img.shape[0]
    x = img.unsqueeze(0)
    x = F.pad(x, (radius, radius, 0, 0), mode="reflect")
    x = F.conv2d(x, kernel.view(1, 1, 1, -1).repeat(channels, 1, 1, 1), groups=channels)
    x = F.pad(x, (0, 0, radius, radius), mode="reflect")
    x = F.conv2d(x, kernel.view(1, 1, -1, 1).repeat(channels, 1, 1, 1), groups=channels)
    return x.squeeze(0)


def resample(img: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Resample to ``target`` = (width, height).

    Integer-factor downsampling uses exact area averaging (block means);
    everything else uses bilinear interpolation. Deterministic.
    """
    width, height = target
    if width < 1 or height < 1:
        raise ValueError(f"target size must be >= 1x1, got {target}")
    if img.ndim != 3:
        raise ValueError(f"expected image of shape (C, H, W), got {tuple(img.shape)}")
    h, w = img.shape[1], img.shape[2]
    if (w, h) == (width, height):
        return img.clone()
    x = img.unsqueeze(0)
    if w % width == 0 and h % height == 0:
        out = F.interpolate(x, size=(height, width), mode="area")
    else:
        out = F.interpolate(x, size=(height, width), mode="bilinear", align_corners=False)
    return out.squeeze(0)


def degrade(img: torch.Tensor, cfg: DegradationConfig) -> torch.Tensor:
    """Full degradation: film grayscale, camera response, then blur.

    Input is an RGB generator output; the result is a single-channel image at
    the same resolution. End-to-end differentiable with respect to the image
    and the CRF parameters.
    """
    gray = to_grayscale(img, cfg.film)
    responded = apply_crf(gray, cfg.crf)
    return gaussian_blur(responded, cfg.sigma)


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB between two images of equal shape."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(peak ** 2 / mse)


def read_image(path: Union[str, Path]) -> torch.Tensor:
    """Read an 8- or 16-bit PNG (or any PIL-readable file) as float in [0, 1].

    Returns (1, H, W) for grayscale and (3, H, W) for color images.
    """
    with PILImage.open(path) as pil:
        if pil.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(pil, dtype=np.float64) / 65535.0
            arr = arr[None, :, :]
        elif pil.mode == "L":
            arr = np.asarray(pil, dtype=np.float64)[None, :, :] / 255.0
        else:
            arr = np.asarray(pil.convert("RGB"), dtype=np.float64) / 255.0
            arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(torch.float32)


def write_image(path: Union[str, Path], img: torch.Tensor, bit_depth: int = 8) -> None:
    """Write an image tensor as PNG, clamping to [0, 1].

    16-bit output is supported for single-channel images only.
    """
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, H, W) image, got {tuple(img.shape)}")
    arr = img.detach().cpu().clamp(0.0, 1.0).numpy()
    if bit_depth == 8:
        data = np.round(arr * 255.0).astype(np.uint8)
        if img.shape[0] == 1:
            pil = PILImage.fromarray(data[0], mode="L")
        else:
            pil = PILImage.fromarray(data.transpose(1, 2, 0), mode="RGB")
    elif bit_depth == 16:
        if img.shape[0] != 1:
            raise ValueError("16-bit output supports single-channel images only")
        data = np.round(arr[0] * 65535.0).astype(np.uint16)
        pil = PILImage.fromarray(data)
    else:
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    pil.save(Path(path), format="PNG")
