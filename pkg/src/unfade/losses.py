"""Objective terms for latent projection.

Three families: a feature-space reconstruction loss (general + face-identity
perceptual terms plus an eye-region term), a color-transfer loss on the
channel covariances of per-level RGB taps, and a contextual loss that matches
feature vectors irrespective of spatial position.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .features import Backbone, FeatureSet, extract
from .imagecore import resample

CONTEXTUAL_BANDWIDTH = 0.5
CONTEXTUAL_EPS = 1e-5
HUBER_DELTA = 1.0


@dataclass
class LossWeights:
    """Scalar weights of the composite objective."""

    vgg: float = 1.0
    face: float = 0.3
    eye: float = 0.1
    ctx: float = 0.1
    color: float = 1e10

    def __post_init__(self):
        for name in ("vgg", "face", "eye", "ctx", "color"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class EyeRegions:
    """Axis-aligned eye boxes (x0, y0, x1, y1) in input-image pixels."""

    left: tuple[int, int, int, int]
    right: tuple[int, int, int, int]

    def __post_init__(self):
        for name, box in (("left", self.left), ("right", self.right)):
            x0, y0, x1, y1 = box
            if x1 <= x0 or y1 <= y0:
                raise ValueError(f"{name} eye box {box} has no area")
            if x0 < 0 or y0 < 0:
                raise ValueError(f"{name} eye box {box} has negative coordinates")

    def validate_within(self, width: int, height: int) -> None:
        for name, box in (("left", self.left), ("right", self.right)):
            x0, y0, x1, y1 = box
            if x1 > width or y1 > height:
                raise ValueError(
                    f"{name} eye box {box} exceeds image bounds {width}x{height}")

    def crop(self, img: torch.Tensor, which: str) -> torch.Tensor:
        x0, y0, x1, y1 = getattr(self, which)
        return img[:, y0:y1, x0:x1]


@dataclass
class PerceptualConfig:
    """A backbone plus the layer taps used for feature comparison."""

    backbone: Backbone
    layers: tuple[str, ...]


@dataclass
class ReconstructionContext:
    """Backbones for the reconstruction terms.

    ``perceptual`` drives the general and eye terms; ``face`` the identity
    term (skipped when None). Both images are resampled to a square of
    ``downsample_size`` for the full-frame terms; eye crops are taken at the
    native input size.
    """

    perceptual: PerceptualConfig
    face: Optional[PerceptualConfig]
    downsample_size: int = 256


def perceptual_loss(a: FeatureSet, b: FeatureSet) -> torch.Tensor:
    """Squared feature difference per layer, averaged over layers."""
    if a.backbone_id != b.backbone_id:
        raise ValueError(f"backbone mismatch: {a.backbone_id!r} vs {b.backbone_id!r}")
    if a.layer_names != b.layer_names:
        raise ValueError(f"layer mismatch: {a.layer_names} vs {b.layer_names}")
    if not a.layer_names:
        raise ValueError("empty feature sets")
    total = None
    for name in a.layer_names:
        if a[name].shape != b[name].shape:
            raise ValueError(f"shape mismatch at {name}: "
                             f"{tuple(a[name].shape)} vs {tuple(b[name].shape)}")
        term = F.mse_loss(a[name], b[name])
        total = term if total is None else total + term
    return total / len(a.layer_names)


def reconstruction_terms(input_img: torch.Tensor, degraded: torch.Tensor,
                         eyes: EyeRegions,
                         ctx: ReconstructionContext) -> dict[str, torch.Tensor]:
    """Unweighted reconstruction terms: general, face identity, eye crops."""
    if input_img.shape[-2:] != degraded.shape[-2:]:
        raise ValueError(f"image sizes differ: {tuple(input_img.shape[-2:])} vs "
                         f"{tuple(degraded.shape[-2:])}")
    height, width = input_img.shape[-2:]
    eyes.validate_within(width, height)

    size = (ctx.downsample_size, ctx.downsample_size)
    input_small = resample(input_img, size)
    degraded_small = resample(degraded, size)

    terms: dict[str, torch.Tensor] = {}
    cfg = ctx.perceptual
    terms["vgg"] = perceptual_loss(
        extract(input_small, cfg.backbone, cfg.layers),
        extract(degraded_small, cfg.backbone, cfg.layers))
    if ctx.face is not None:
        terms["face"] = perceptual_loss(
            extract(input_small, ctx.face.backbone, ctx.face.layers),
            extract(degraded_small, ctx.face.backbone, ctx.face.layers))
    else:
        terms["face"] = input_img.new_zeros(())

    eye_total = None
    for which in ("left", "right"):
        crop_in = eyes.crop(input_img, which)
        crop_deg = eyes.crop(degraded, which)
        term = perceptual_loss(
            extract(crop_in, cfg.backbone, cfg.layers),
            extract(crop_deg, cfg.backbone, cfg.layers))
        eye_total = term if eye_total is None else eye_total + term
    terms["eye"] = eye_total / 2.0
    return terms


def reconstruction_loss(input_img: torch.Tensor, degraded: torch.Tensor,
                        eyes: EyeRegions, weights: LossWeights,
                        ctx: ReconstructionContext) -> torch.Tensor:
    """Weighted sum of the general, face, and eye reconstruction terms."""
    terms = reconstruction_terms(input_img, degraded, eyes, ctx)
    return (weights.vgg * terms["vgg"] + weights.face * terms["face"]
            + weights.eye * terms["eye"])


def channel_covariance(tap: torch.Tensor) -> torch.Tensor:
    """Mean-centered 3x3 channel covariance of an RGB map over positions."""
    if tap.ndim != 3 or tap.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) tap, got {tuple(tap.shape)}")
    flat = tap.reshape(3, -1)
    centered = flat - flat.mean(dim=1, keepdim=True)
    return centered @ centered.T / flat.shape[1]


def color_transfer_loss(out_taps: Sequence[torch.Tensor],
                        sib_taps: Sequence[torch.Tensor],
                        active_layers: Sequence[int]) -> torch.Tensor:
    """Huber distance between channel covariances of the active RGB taps.

    Only levels listed in ``active_layers`` contribute; finer levels whose
    codes are frozen stay out of the objective.
    """
    if len(out_taps) != len(sib_taps):
        raise ValueError(f"tap lists misaligned: {len(out_taps)} vs {len(sib_taps)}")
    bad = [k for k in active_layers if k < 0 or k >= len(out_taps)]
    if bad:
        raise ValueError(f"active layers {bad} outside available range "
                         f"0..{len(out_taps) - 1}")
    if len(active_layers) == 0:
        raise ValueError("no active layers")
    total = None
    for k in active_layers:
        if out_taps[k].shape != sib_taps[k].shape:
            raise ValueError(f"tap shape mismatch at level {k}: "
                             f"{tuple(out_taps[k].shape)} vs {tuple(sib_taps[k].shape)}")
        term = F.huber_loss(channel_covariance(out_taps[k]),
                            channel_covariance(sib_taps[k]),
                            reduction="sum", delta=HUBER_DELTA)
        total = term if total is None else total + term
    return total


def contextual_loss(feats_out: FeatureSet, feats_sib: FeatureSet,
                    bandwidth: float = CONTEXTUAL_BANDWIDTH) -> torch.Tensor:
    """Position-independent feature matching loss.

    Per layer: center both sides by the target mean, take cosine distances
    between every source/target vector pair, normalize each source row by its
    best match, convert to affinities exp((1 - d_norm) / h) and row-normalize;
    the layer loss is -log of the mean best affinity. Layers are averaged.
    Near zero when every source vector has an exact duplicate in the target.
    """
    if feats_out.backbone_id != feats_sib.backbone_id:
        raise ValueError(f"backbone mismatch: {feats_out.backbone_id!r} vs "
                         f"{feats_sib.backbone_id!r}")
    if feats_out.layer_names != feats_sib.layer_names:
        raise ValueError(f"layer mismatch: {feats_out.layer_names} vs "
                         f"{feats_sib.layer_names}")
    total = None
    for name in feats_out.layer_names:
        src = feats_out[name].reshape(feats_out[name].shape[0], -1)
        tgt = feats_sib[name].reshape(feats_sib[name].shape[0], -1)
        mu = tgt.mean(dim=1, keepdim=True)
        src_n = F.normalize(src - mu, dim=0)
        tgt_n = F.normalize(tgt - mu, dim=0)
        dist = (1.0 - src_n.T @ tgt_n).clamp_min(0.0)  # (N_src, N_tgt)
        d_norm = dist / (dist.min(dim=1, keepdim=True).values + CONTEXTUAL_EPS)
        affinity = F.softmax((1.0 - d_norm) / bandwidth, dim=1)
        score = affinity.max(dim=1).values.mean()
        term = -torch.log(score)
        total = term if total is None else total + term
    return total / len(feats_out.layer_names)
