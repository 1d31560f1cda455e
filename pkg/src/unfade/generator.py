"""Style-based synthesis network with extended latent codes and RGB tap capture.

The generator follows the skip-connection design: every resolution level runs
one modulated convolution on the feature stream and one 1x1 modulated
convolution to RGB, and the RGB outputs accumulate through bilinear 2x
upsampling. Each level therefore consumes two style vectors, giving
2*log2(resolution) - 2 layers total. The per-level RGB maps are captured
before their constant bias is added so downstream losses can inspect them.

A deterministic toy instance (64x64, 10 layers, seeded random weights) keeps
every property testable on CPU without large checkpoint assets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import torch
import torch.nn.functional as F
from torch import nn

FORMAT_VERSION = 1
ARCH_VERSION = "skip-v1"

TOY_CHANNELS = {4: 32, 8: 32, 16: 16, 32: 16, 64: 8}


class GeneratorLoadError(RuntimeError):
    """Raised when a checkpoint cannot be matched to the architecture."""


def layer_resolution(layer_index: int) -> int:
    """Synthesis resolution that consumes style layer ``layer_index``."""
    if layer_index < 0:
        raise ValueError(f"layer index must be >= 0, got {layer_index}")
    return 2 ** (2 + layer_index // 2)


def num_layers_for_resolution(resolution: int) -> int:
    log2 = math.log2(resolution)
    if resolution < 4 or log2 != int(log2):
        raise ValueError(f"resolution must be a power of two >= 4, got {resolution}")
    return 2 * int(log2) - 2


@dataclass
class LatentCode:
    """A single 512-dimensional style vector."""

    values: torch.Tensor

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ValueError(f"latent code must be 1-D, got shape {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise ValueError("latent code contains non-finite values")

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass
class ExtendedLatentCode:
    """Per-layer style vectors, one row per synthesis layer.

    Row k feeds the level at resolution 2^(2 + k//2); even rows drive the
    feature convolution, odd rows the RGB projection.
    """

    layers: torch.Tensor

    def __post_init__(self):
        if self.layers.ndim != 2:
            raise ValueError(f"expected (num_layers, dim) tensor, got shape {tuple(self.layers.shape)}")
        if self.layers.shape[0] % 2 != 0 or self.layers.shape[0] < 2:
            raise ValueError(f"layer count must be a positive even number, got {self.layers.shape[0]}")
        if not torch.isfinite(self.layers).all():
            raise ValueError("extended latent code contains non-finite values")

    @property
    def num_layers(self) -> int:
        return self.layers.shape[0]

    @property
    def dim(self) -> int:
        return self.layers.shape[1]

    def layer(self, k: int) -> LatentCode:
        return LatentCode(self.layers[k])

    def clone(self) -> "ExtendedLatentCode":
        return ExtendedLatentCode(self.layers.detach().clone())


@dataclass
class SynthesisOutput:
    """Rendered image plus the pre-bias RGB map of every resolution level."""

    image: torch.Tensor
    torgb: list[torch.Tensor]


@dataclass(frozen=True)
class LayerPartition:
    """Split of style layers into optimizable and frozen index sets."""

    optimizable: tuple[int, ...]
    frozen: tuple[int, ...]

    def __post_init__(self):
        overlap = set(self.optimizable) & set(self.frozen)
        if overlap:
            raise ValueError(f"layer sets overlap: {sorted(overlap)}")


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class PixelNorm(nn.Module):
    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + 1e-8)


class MappingNetwork(nn.Module):
    """Two-layer MLP from gaussian samples to the style space."""

    def __init__(self, latent_dim: int = 512, depth: int = 2):
        super().__init__()
        self.latent_dim = latent_dim
        self.norm = PixelNorm()
        self.linears = nn.ModuleList(
            [nn.Linear(latent_dim, latent_dim) for _ in range(depth)])

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = self.norm(z)
        for linear in self.linears:
            x = F.leaky_relu(linear(x), negative_slope=0.2)
        return x


class ModulatedConv2d(nn.Module):
    """Convolution with per-sample weight modulation and optional demodulation."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 style_dim: int, demodulate: bool = True, weight_gain: float = 1.0):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.demodulate = demodulate
        scale = weight_gain / math.sqrt(in_channels * kernel_size ** 2)
        self.weight = nn.Parameter(
            torch.empty(1, out_channels, in_channels, kernel_size, kernel_size))
        self.weight_scale = scale
        self.modulation = nn.Linear(style_dim, in_channels)

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        batch, channels, height, width = x.shape
        mod = self.modulation(style).view(batch, 1, channels, 1, 1)
        weight = self.weight_scale * self.weight * mod
        if self.demodulate:
            norm = torch.rsqrt(weight.pow(2).sum(dim=(2, 3, 4)) + 1e-8)
            weight = weight * norm.view(batch, self.out_channels, 1, 1, 1)
        # Grouped conv trick: fold the batch into the channel axis so each
        # sample is convolved with its own modulated kernel.
        weight = weight.reshape(batch * self.out_channels, channels,
                                self.kernel_size, self.kernel_size)
        x = x.reshape(1, batch * channels, height, width)
        out = F.conv2d(x, weight, padding=self.kernel_size // 2, groups=batch)
        return out.view(batch, self.out_channels, height, width)


class SynthesisLevel(nn.Module):
    """One resolution level: feature conv (even layer) + RGB conv (odd layer)."""

    def __init__(self, resolution: int, in_channels: int, out_channels: int,
                 style_dim: int, rgb_gain: float, activation_slope: float = 0.2):
        super().__init__()
        self.resolution = resolution
        self.activation_slope = activation_slope
        self.conv = ModulatedConv2d(in_channels, out_channels, 3, style_dim)
        self.conv_bias = nn.Parameter(torch.zeros(out_channels))
        self.noise_strength = nn.Parameter(torch.zeros(()))
        self.register_buffer("noise", torch.zeros(1, 1, resolution, resolution))
        self.torgb = ModulatedConv2d(out_channels, 3, 1, style_dim,
                                     demodulate=False, weight_gain=rgb_gain)
        self.torgb_bias = nn.Parameter(torch.zeros(3))

    def features(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        out = self.conv(x, style)
        out = out + self.noise_strength * self.noise
        out = out + self.conv_bias.view(1, -1, 1, 1)
        return F.leaky_relu(out, negative_slope=self.activation_slope) * math.sqrt(2.0)

    def rgb_tap(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        return self.torgb(x, style)


class Generator(nn.Module):
    """Skip-connection synthesis network driven by extended latent codes.

    Immutable after construction or weight loading; synthesis with zero latent
    noise is a pure deterministic function of the code.
    """

    def __init__(self, resolution: int = 64, latent_dim: int = 512,
                 channels: Optional[dict[int, int]] = None, seed: int = 0,
                 rgb_gain_base: float = 1.0, rgb_bias_scale: float = 0.1,
                 output_gain: float = 1.0, activation_slope: float = 0.2):
        super().__init__()
        self.resolution = resolution
        self.latent_dim = latent_dim
        self.num_layers = num_layers_for_resolution(resolution)
        self.channels = dict(channels) if channels is not None else dict(TOY_CHANNELS)
        self.seed = seed
        self.rgb_gain_base = rgb_gain_base
        self.rgb_bias_scale = rgb_bias_scale
        self.output_gain = output_gain
        self.activation_slope = activation_slope

        resolutions = [2 ** i for i in range(2, int(math.log2(resolution)) + 1)]
        missing = [r for r in resolutions if r not in self.channels]
        if missing:
            raise ValueError(f"channel table missing resolutions {missing}")

        self.mapping = MappingNetwork(latent_dim)
        self.const = nn.Parameter(torch.zeros(1, self.channels[4], 4, 4))
        levels = []
        for i, res in enumerate(resolutions):
            in_ch = self.channels[4] if i == 0 else self.channels[resolutions[i - 1]]
            # Coarse RGB taps contribute small refinements relative to the
            # final level, matching the tap statistics of trained networks.
            gain = rgb_gain_base * (res / resolution)
            levels.append(SynthesisLevel(res, in_ch, self.channels[res],
                                         latent_dim, rgb_gain=gain,
                                         activation_slope=activation_slope))
        self.levels = nn.ModuleList(levels)
        self._init_parameters(seed)

    def _init_parameters(self, seed: int):
        g = torch.Generator().manual_seed(seed)

        def randn_like(p, scale=1.0):
            return torch.randn(p.shape, generator=g) * scale

        with torch.no_grad():
            for linear in self.mapping.linears:
                linear.weight.copy_(randn_like(linear.weight, 1.0 / math.sqrt(self.latent_dim)))
                linear.bias.zero_()
            self.const.copy_(randn_like(self.const))
            for level in self.levels:
                for conv in (level.conv, level.torgb):
                    conv.weight.copy_(randn_like(conv.weight))
                    # Strong enough that distinct codes produce visibly
                    # different renders; a random init has no learned
                    # diversity to lean on.
                    conv.modulation.weight.copy_(
                        randn_like(conv.modulation.weight, 4.0 / math.sqrt(self.latent_dim)))
                    conv.modulation.bias.fill_(1.0)
                level.conv_bias.copy_(randn_like(level.conv_bias, 0.1))
                level.torgb_bias.copy_(randn_like(level.torgb_bias, self.rgb_bias_scale))
                level.noise.copy_(randn_like(level.noise))
                level.noise_strength.fill_(0.1)

    def forward(self, codes: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Synthesize a batch: codes (B, num_layers, latent_dim) -> image, taps."""
        if codes.ndim != 3 or codes.shape[1] != self.num_layers or codes.shape[2] != self.latent_dim:
            raise ValueError(
                f"expected codes of shape (B, {self.num_layers}, {self.latent_dim}), "
                f"got {tuple(codes.shape)}")
        batch = codes.shape[0]
        x = self.const.expand(batch, -1, -1, -1)
        taps: list[torch.Tensor] = []
        skip: Optional[torch.Tensor] = None
        for i, level in enumerate(self.levels):
            if i > 0:
                x = upsample2x(x)
            x = level.features(x, codes[:, 2 * i])
            tap = level.rgb_tap(x, codes[:, 2 * i + 1])
            taps.append(tap)
            rgb = tap + level.torgb_bias.view(1, 3, 1, 1)
            skip = rgb if skip is None else upsample2x(skip) + rgb
        image = (self.output_gain * skip + 1.0) / 2.0
        return image, taps

    def rgb_biases(self) -> list[torch.Tensor]:
        """Constant bias of each level's RGB projection, coarsest first."""
        return [level.torgb_bias for level in self.levels]


def synthesize(generator: Generator, code: ExtendedLatentCode,
               latent_noise_scale: float = 0.0,
               noise_rng: Optional[torch.Generator] = None) -> SynthesisOutput:
    """Render one extended code; optional transient gaussian code perturbation.

    With scale 0 this is deterministic in the code. Gradients flow to every
    layer of the code.
    """
    if code.num_layers != generator.num_layers:
        raise ValueError(f"code has {code.num_layers} layers, generator expects "
                         f"{generator.num_layers}")
    if code.dim != generator.latent_dim:
        raise ValueError(f"code dim {code.dim} does not match generator latent dim "
                         f"{generator.latent_dim}")
    codes = code.layers.unsqueeze(0)
    if latent_noise_scale > 0:
        noise = torch.randn(codes.shape, generator=noise_rng, dtype=codes.dtype,
                            device=codes.device)
        codes = codes + latent_noise_scale * noise
    image, taps = generator(codes)
    return SynthesisOutput(image=image[0], torgb=[t[0] for t in taps])


def sample_latent(generator: Generator, seed: int) -> LatentCode:
    """Map a seeded gaussian draw through the mapping network."""
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(1, generator.latent_dim, generator=g)
    with torch.no_grad():
        w = generator.mapping(z)
    return LatentCode(w[0])


def broadcast(code: LatentCode, num_layers: int) -> ExtendedLatentCode:
    """Duplicate one style vector across all synthesis layers."""
    return ExtendedLatentCode(code.values.unsqueeze(0).repeat(num_layers, 1))


def partition(code: ExtendedLatentCode, cutoff_resolution: int) -> LayerPartition:
    """Split layers into those at resolutions <= cutoff and the rest."""
    if cutoff_resolution < 4:
        raise ValueError(f"cutoff resolution must be >= 4, got {cutoff_resolution}")
    optimizable = tuple(k for k in range(code.num_layers)
                        if layer_resolution(k) <= cutoff_resolution)
    frozen = tuple(k for k in range(code.num_layers)
                   if layer_resolution(k) > cutoff_resolution)
    return LayerPartition(optimizable=optimizable, frozen=frozen)


def toy_generator(seed: int = 0, resolution: int = 64,
                  latent_dim: int = 512) -> Generator:
    """Small fixed-seed generator for tests and the toy pipeline.

    Random weights cannot reproduce two properties of trained networks that
    projection relies on. First, trained RGB taps carry tiny per-level
    residuals while the composed image spans full contrast; the toy gets
    there explicitly, with small tap gains and a fixed output gain amplifying
    the summed skip signal. Second, a trained synthesis network is smooth
    enough along its manifold that gradient descent on a pixel objective can
    retrace a code; with random weights the standard 0.2 activation slope
    folds the code-to-image map so heavily that nearby images stop having
    nearby codes, so the toy softens the slope instead.
    """
    channels = {r: c for r, c in TOY_CHANNELS.items() if r <= resolution}
    return Generator(resolution=resolution, latent_dim=latent_dim,
                     channels=channels, seed=seed,
                     rgb_gain_base=8e-4, rgb_bias_scale=5e-4,
                     output_gain=100.0, activation_slope=0.7)


def save_weights(generator: Generator, path: Union[str, Path]) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "architecture": ARCH_VERSION,
        "resolution": generator.resolution,
        "latent_dim": generator.latent_dim,
        "channels": generator.channels,
        "rgb_gain_base": generator.rgb_gain_base,
        "rgb_bias_scale": generator.rgb_bias_scale,
        "output_gain": generator.output_gain,
        "activation_slope": generator.activation_slope,
        "state_dict": generator.state_dict(),
    }
    torch.save(payload, Path(path))


def load_weights(path: Union[str, Path]) -> Generator:
    """Reconstruct a generator from a checkpoint written by save_weights.

    Shape mismatches are reported with the offending tensor names instead of
    the default load error.
    """
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise GeneratorLoadError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "state_dict" not in payload:
        raise GeneratorLoadError(f"checkpoint {path} has no state_dict payload")
    if payload.get("format_version") != FORMAT_VERSION:
        raise GeneratorLoadError(
            f"unsupported checkpoint format {payload.get('format_version')!r}, "
            f"expected {FORMAT_VERSION}")
    if payload.get("architecture") != ARCH_VERSION:
        raise GeneratorLoadError(
            f"unsupported architecture {payload.get('architecture')!r}, "
            f"expected {ARCH_VERSION!r}")
    # rgb_gain_base and activation_slope feed fixed scales that live outside
    # the state dict, so they must be restored alongside the weights.
    generator = Generator(resolution=payload["resolution"],
                          latent_dim=payload["latent_dim"],
                          channels={int(k): v for k, v in payload["channels"].items()},
                          rgb_gain_base=payload.get("rgb_gain_base", 1.0),
                          rgb_bias_scale=payload.get("rgb_bias_scale", 0.1),
                          output_gain=payload.get("output_gain", 1.0),
                          activation_slope=payload.get("activation_slope", 0.2))
    own = generator.state_dict()
    state = payload["state_dict"]
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    mismatched = sorted(name for name in set(own) & set(state)
                        if tuple(own[name].shape) != tuple(state[name].shape))
    if missing or unexpected or mismatched:
        raise GeneratorLoadError(
            f"checkpoint {path} does not match architecture: "
            f"missing={missing} unexpected={unexpected} shape_mismatch={mismatched}")
    generator.load_state_dict(state)
    generator.eval()
    return generator
