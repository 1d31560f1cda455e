"""Perceptual feature extraction behind a uniform backbone interface.

Three backbone families: a seeded toy convnet for tests, general perceptual
networks (VGG16/VGG19 topology), and a face-identity network sharing the
VGG16 topology with its own weights. Real weights are external assets
declared in a JSON manifest; the toy backbone needs no files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import torch
import torch.nn.functional as F
from torch import nn


class MissingAssetError(FileNotFoundError):
    """A backbone weight file is absent or fails its manifest hash."""


class UnknownLayerError(ValueError):
    """A requested layer name is not declared by the backbone."""


@dataclass
class FeatureSet:
    """Named activations from one backbone, in network order."""

    backbone_id: str
    activations: dict[str, torch.Tensor]

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.activations[name]

    @property
    def layer_names(self) -> tuple[str, ...]:
        return tuple(self.activations)


class ToyBackbone(nn.Module):
    """Three seeded convolutions with ReLU taps; stride 4 overall."""

    backbone_id = "toy"
    min_input = 8

    def __init__(self, seed: int = 0):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 8, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(8, 16, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(16, 16, 3, stride=1, padding=1)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2, self.conv3):
                # ReLU-gain init so activation magnitude survives depth and
                # feature MSEs land at the scale trained extractors produce.
                scale = (2.0 / conv.weight[0].numel()) ** 0.5
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * scale)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=g) * 0.1)
        self.register_buffer("input_mean", torch.full((3,), 0.5))
        self.register_buffer("input_std", torch.full((3,), 0.15))
        self.eval()

    @property
    def layer_names(self) -> tuple[str, ...]:
        return ("relu1", "relu2", "relu3")

    def run(self, x: torch.Tensor, wanted: set[str]) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        x = F.relu(self.conv1(x))
        if "relu1" in wanted:
            out["relu1"] = x
        if wanted <= {"relu1"}:
            return out
        x = F.relu(self.conv2(x))
        if "relu2" in wanted:
            out["relu2"] = x
        if wanted <= {"relu1", "relu2"}:
            return out
        out["relu3"] = F.relu(self.conv3(x))
        return out


# Convolution counts per stage for the two supported topologies.
_VGG_STAGES = {
    "vgg16": (2, 2, 3, 3, 3),
    "vgg19": (2, 2, 4, 4, 4),
}
_VGG_WIDTHS = (64, 128, 256, 512, 512)


class VGGBackbone(nn.Module):
    """VGG-topology feature extractor with named conv/relu taps.

    Weights come from an asset file holding the feature-stack state dict;
    normalization constants travel with the asset manifest entry, not with
    calling code.
    """

    min_input = 32

    def __init__(self, backbone_id: str, arch: str,
                 mean: Sequence[float], std: Sequence[float]):
        super().__init__()
        if arch not in _VGG_STAGES:
            raise ValueError(f"unsupported architecture {arch!r}; expected one of "
                             f"{sorted(_VGG_STAGES)}")
        self.backbone_id = backbone_id
        self.arch = arch
        names: list[str] = []
        convs = nn.ModuleList()
        in_ch = 3
        for stage, count in enumerate(_VGG_STAGES[arch], start=1):
            width = _VGG_WIDTHS[stage - 1]
            for i in range(1, count + 1):
                convs.append(nn.Conv2d(in_ch, width, 3, padding=1))
                names.append(f"conv{stage}_{i}")
                names.append(f"relu{stage}_{i}")
                in_ch = width
            names.append(f"pool{stage}")
        self.convs = convs
        self._names = tuple(names)
        self.register_buffer("input_mean", torch.tensor(list(mean), dtype=torch.float32))
        self.register_buffer("input_std", torch.tensor(list(std), dtype=torch.float32))
        self.eval()

    @property
    def layer_names(self) -> tuple[str, ...]:
        return self._names

    def run(self, x: torch.Tensor, wanted: set[str]) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        remaining = set(wanted)
        conv_iter = iter(self.convs)
        for name in self._names:
            if name.startswith("conv"):
                x = next(conv_iter)(x)
            elif name.startswith("relu"):
                x = F.relu(x)
            else:
                x = F.max_pool2d(x, 2)
            if name in remaining:
                out[name] = x
                remaining.discard(name)
                if not remaining:
                    break
        return out


Backbone = Union[ToyBackbone, VGGBackbone]


@dataclass
class BackboneAsset:
    """One manifest entry describing an external weight file."""

    backbone_id: str
    arch: str
    file: str
    sha256: str = ""
    mean: tuple[float, ...] = (0.485, 0.456, 0.406)
    std: tuple[float, ...] = (0.229, 0.224, 0.225)
    layers: tuple[str, ...] = ()


def load_manifest(path: Union[str, Path]) -> dict[str, BackboneAsset]:
    """Parse a backbone asset manifest (id -> file, hash, normalization)."""
    path = Path(path)
    if not path.exists():
        raise MissingAssetError(f"backbone manifest not found: {path}")
    raw = json.loads(path.read_text())
    assets = {}
    for backbone_id, entry in raw.items():
        assets[backbone_id] = BackboneAsset(
            backbone_id=backbone_id,
            arch=entry["arch"],
            file=entry["file"],
            sha256=entry.get("sha256", ""),
            mean=tuple(entry.get("mean", (0.485, 0.456, 0.406))),
            std=tuple(entry.get("std", (0.229, 0.224, 0.225))),
            layers=tuple(entry.get("layers", ())),
        )
    return assets


def load_backbone(backbone_id: str, manifest_path: Union[str, Path]) -> VGGBackbone:
    """Build a backbone from its manifest entry and load its weight asset."""
    assets = load_manifest(manifest_path)
    if backbone_id not in assets:
        raise MissingAssetError(f"backbone {backbone_id!r} not declared in {manifest_path}")
    asset = assets[backbone_id]
    weight_path = Path(manifest_path).parent / asset.file
    if not weight_path.exists():
        raise MissingAssetError(f"weight file for {backbone_id!r} missing: {weight_path}")
    if asset.sha256:
        digest = hashlib.sha256(weight_path.read_bytes()).hexdigest()
        if digest != asset.sha256:
            raise MissingAssetError(
                f"weight file for {backbone_id!r} failed hash check: "
                f"expected {asset.sha256}, got {digest}")
    backbone = VGGBackbone(backbone_id, asset.arch, asset.mean, asset.std)
    state = torch.load(weight_path, map_location="cpu", weights_only=True)
    backbone.convs.load_state_dict(state)
    backbone.eval()
    return backbone


def save_backbone_weights(backbone: VGGBackbone, path: Union[str, Path]) -> None:
    torch.save(backbone.convs.state_dict(), Path(path))


def extract(img: torch.Tensor, backbone: Backbone,
            layers: Sequence[str]) -> FeatureSet:
    """Run a backbone on one image and return the requested activations.

    Grayscale inputs are replicated to 3 channels; normalization uses the
    backbone's own constants. Deterministic and differentiable in img.
    """
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, H, W) image, got {tuple(img.shape)}")
    if not layers:
        raise ValueError("at least one layer must be requested")
    unknown = [name for name in layers if name not in backbone.layer_names]
    if unknown:
        raise UnknownLayerError(
            f"backbone {backbone.backbone_id!r} has no layers {unknown}; "
            f"available: {list(backbone.layer_names)}")
    if img.shape[1] < backbone.min_input or img.shape[2] < backbone.min_input:
        raise ValueError(
            f"image {tuple(img.shape[1:])} below backbone minimum "
            f"{backbone.min_input}x{backbone.min_input}")
    x = img if img.shape[0] == 3 else img.expand(3, -1, -1)
    mean = backbone.input_mean.to(x.dtype).view(3, 1, 1)
    std = backbone.input_std.to(x.dtype).view(3, 1, 1)
    x = ((x - mean) / std).unsqueeze(0)
    acts = backbone.run(x, set(layers))
    ordered = {name: acts[name][0] for name in backbone.layer_names if name in acts}
    return FeatureSet(backbone_id=backbone.backbone_id, activations=ordered)


def toy_backbone(seed: int = 0) -> ToyBackbone:
    return ToyBackbone(seed=seed)
