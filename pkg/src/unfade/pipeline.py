"""End-to-end restoration runs: assets in, artifact directory out.

A run consumes one antique photograph plus either the bundled toy stack or
checkpoint assets, projects it, and writes a self-contained artifact set:
final and sibling renders, serialized codes, a loss trace, and a run manifest
pinning every input (config, asset hashes, seed) needed to replay the run
bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch

from .features import (
    MissingAssetError,
    load_backbone,
    load_manifest,
    toy_backbone,
)
from .generator import (
    ExtendedLatentCode,
    Generator,
    GeneratorLoadError,
    load_weights,
    synthesize,
    toy_generator,
)
from .imagecore import CRFParams, FilmModel, read_image, resample, write_image
from .losses import (
    EyeRegions,
    LossWeights,
    PerceptualConfig,
    ReconstructionContext,
    channel_covariance,
)
from .projector import (
    DEFAULT_STAGE1,
    DEFAULT_STAGE2,
    ObjectiveConfig,
    ProjectionDivergedError,
    ProjectionSettings,
    ProjectionState,
    default_stages,
    project,
)
from .sibling import SiblingEncoder, load_encoder

EXIT_OK = 0
EXIT_FAILURE = 1
# 2 is the usual command-line usage-error status, so run() starts above it.
EXIT_MISSING_ASSET = 3
EXIT_UNREADABLE_INPUT = 4
EXIT_INVALID_EYES = 5
EXIT_MISSING_ENCODER = 6

# Emulsion availability: orthochromatic stock arrives in 1873, panchromatic
# in 1907; before that only blue-sensitive plates existed.
ORTHOCHROMATIC_FROM = 1873
PANCHROMATIC_FROM = 1907

# The bundled toy stack runs the two-stage schedule at oracle scale; the
# full-length default schedule is sized for checkpoint assets.
TOY_STAGE_ITERS = (50, 150)

FINAL_IMAGE_NAME = "final.png"
SIBLING_IMAGE_NAME = "sibling.png"
CODES_NAME = "codes.bin"
TRACE_NAME = "trace.jsonl"
MANIFEST_NAME = "run_manifest.json"

_REQUIRED_BACKBONES = ("perceptual", "face", "contextual")


class EyeRegionError(ValueError):
    """Eye boxes are missing, malformed, or fall outside the image."""


class EncoderAssetError(FileNotFoundError):
    """The sibling-encoder checkpoint is absent or unusable."""


def film_for_year(year: Optional[int],
                  film: Optional[FilmModel] = None) -> FilmModel:
    """Resolve the film model from an explicit choice and capture-year metadata.

    An explicit model always wins. Given only a year, the default is the
    newest emulsion class already introduced by then; with no metadata at all
    the panchromatic model applies.
    """
    if film is not None:
        return film
    if year is None:
        return FilmModel.PANCHROMATIC
    if year < ORTHOCHROMATIC_FROM:
        return FilmModel.BLUE_SENSITIVE
    if year < PANCHROMATIC_FROM:
        return FilmModel.ORTHOCHROMATIC
    return FilmModel.PANCHROMATIC


def _pad_box(box: tuple[int, int, int, int], width: int,
             height: int) -> tuple[int, int, int, int]:
    x0, y0, x1, y1 = box
    pad_x = 0.25 * (x1 - x0)
    pad_y = 0.25 * (y1 - y0)
    return (max(0, math.floor(x0 - pad_x)),
            max(0, math.floor(y0 - pad_y)),
            min(width, math.ceil(x1 + pad_x)),
            min(height, math.ceil(y1 + pad_y)))


def acquire_eye_regions(image: torch.Tensor,
                        boxes: Optional[EyeRegions] = None,
                        provider: Optional[Callable[[torch.Tensor],
                                                    EyeRegions]] = None,
                        ) -> EyeRegions:
    """Eye boxes for the loss terms: explicit boxes win, else a landmark provider.

    Explicit boxes pass through unchanged after bounds validation. Provider
    boxes are padded by a quarter of their own size on every side and clipped
    to the image, so tight landmark fits still cover the whole orbital region.
    """
    height, width = image.shape[-2:]
    if boxes is not None:
        try:
            boxes.validate_within(width, height)
        except ValueError as exc:
            raise EyeRegionError(str(exc)) from exc
        return boxes
    if provider is None:
        raise EyeRegionError(
            "no explicit eye boxes given and no landmark provider is configured")
    raw = provider(image)
    try:
        return EyeRegions(left=_pad_box(raw.left, width, height),
                          right=_pad_box(raw.right, width, height))
    except ValueError as exc:
        raise EyeRegionError(str(exc)) from exc


@dataclass
class ProjectionConfig:
    """Everything one restoration run needs; resolvable to a run manifest."""

    input_path: Union[str, Path]
    output_dir: Union[str, Path]
    film: Optional[FilmModel] = None
    year: Optional[int] = None
    sigma: float = 1.0
    eyes: Optional[EyeRegions] = None
    eye_provider: Optional[Callable[[torch.Tensor], EyeRegions]] = None
    toy: bool = False
    generator_path: Optional[Union[str, Path]] = None
    encoder_path: Optional[Union[str, Path]] = None
    backbone_manifest: Optional[Union[str, Path]] = None
    weights: LossWeights = field(default_factory=LossWeights)
    stage1_iters: Optional[int] = None
    stage2_iters: Optional[int] = None
    seed: int = 0
    dump_taps: bool = False

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 16.0:
            raise ValueError(f"sigma {self.sigma} outside the accepted range [0, 16]")
        if self.sigma > 4.0:
            warnings.warn(f"sigma {self.sigma} is beyond the calibrated blur "
                          "range (<= 4); degradation matching may be poor",
                          stacklevel=2)
        if not self.toy and (self.generator_path is None
                             or self.encoder_path is None):
            raise ValueError(
                "asset mode needs generator_path and encoder_path (or set toy=True)")


def _sha256(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _toy_objective(weights: LossWeights, resolution: int) -> ObjectiveConfig:
    recon = ReconstructionContext(
        perceptual=PerceptualConfig(toy_backbone(0), ("relu1", "relu2", "relu3")),
        face=PerceptualConfig(toy_backbone(1), ("relu1", "relu2", "relu3")),
        downsample_size=min(resolution, 256))
    # Pairwise feature matching is quadratic in positions, so the contextual
    # term uses the two deepest taps only.
    context = PerceptualConfig(toy_backbone(0), ("relu2", "relu3"))
    return ObjectiveConfig(weights=weights, reconstruction=recon,
                           contextual=context)


def _manifest_objective(manifest_path: Union[str, Path], weights: LossWeights,
                        resolution: int) -> ObjectiveConfig:
    assets = load_manifest(manifest_path)
    configs = {}
    for backbone_id in _REQUIRED_BACKBONES:
        if backbone_id not in assets:
            raise MissingAssetError(
                f"backbone manifest {manifest_path} lacks entry {backbone_id!r}")
        if not assets[backbone_id].layers:
            raise MissingAssetError(
                f"manifest entry {backbone_id!r} declares no extraction layers")
        configs[backbone_id] = PerceptualConfig(
            load_backbone(backbone_id, manifest_path),
            tuple(assets[backbone_id].layers))
    recon = ReconstructionContext(perceptual=configs["perceptual"],
                                  face=configs["face"],
                                  downsample_size=min(resolution, 256))
    return ObjectiveConfig(weights=weights, reconstruction=recon,
                           contextual=configs["contextual"])


def _toy_encoder(generator: Generator) -> SiblingEncoder:
    encoder = SiblingEncoder(latent_dim=generator.latent_dim,
                             input_size=generator.resolution, seed=0)
    encoder.eval()
    return encoder


def _load_assets(cfg: ProjectionConfig, film: FilmModel,
                 ) -> tuple[Generator, SiblingEncoder, ObjectiveConfig, dict]:
    if cfg.toy:
        generator = toy_generator(seed=0)
        return (generator, _toy_encoder(generator),
                _toy_objective(cfg.weights, generator.resolution),
                {"generator": "toy:0", "encoder": "toy:0", "backbones": "toy"})
    try:
        generator = load_weights(cfg.generator_path)
    except GeneratorLoadError as exc:
        raise MissingAssetError(str(exc)) from exc
    try:
        encoder = load_encoder(cfg.encoder_path, expect_film=film)
    except (FileNotFoundError, ValueError) as exc:
        raise EncoderAssetError(str(exc)) from exc
    records = {
        "generator": {"path": str(cfg.generator_path),
                      "sha256": _sha256(cfg.generator_path)},
        "encoder": {"path": str(cfg.encoder_path),
                    "sha256": _sha256(cfg.encoder_path)},
    }
    if cfg.backbone_manifest is not None:
        objective = _manifest_objective(cfg.backbone_manifest, cfg.weights,
                                        generator.resolution)
        manifest_dir = Path(cfg.backbone_manifest).parent
        assets = load_manifest(cfg.backbone_manifest)
        records["backbones"] = {
            "manifest": {"path": str(cfg.backbone_manifest),
                         "sha256": _sha256(cfg.backbone_manifest)},
        }
        for backbone_id in _REQUIRED_BACKBONES:
            weight_path = manifest_dir / assets[backbone_id].file
            records["backbones"][backbone_id] = {
                "path": str(weight_path), "sha256": _sha256(weight_path)}
    else:
        objective = _toy_objective(cfg.weights, generator.resolution)
        records["backbones"] = "toy"
    return generator, encoder, objective, records


def _crf_floats(crf: CRFParams) -> tuple[float, float, float]:
    return tuple(float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
                 for v in (crf.a, crf.b, crf.gamma))


def save_codes(path: Union[str, Path], code: ExtendedLatentCode,
               crf: CRFParams) -> None:
    """Serialize an extended code plus camera-response parameters.

    Layout: two little-endian uint32 (layer count, code width), the code rows
    as little-endian float32, then the three response parameters.
    """
    layers = code.layers.detach().cpu().to(torch.float32).numpy()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", layers.shape[0], layers.shape[1]))
        fh.write(layers.astype("<f4", copy=False).tobytes())
        fh.write(struct.pack("<fff", *_crf_floats(crf)))


def load_codes(path: Union[str, Path]) -> tuple[ExtendedLatentCode, CRFParams]:
    """Inverse of save_codes, validating the recorded sizes."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValueError(f"{path} is too short to hold a code header")
    count, width = struct.unpack_from("<II", data, 0)
    expected = 8 + 4 * (count * width + 3)
    if len(data) != expected:
        raise ValueError(f"{path} holds {len(data)} bytes, expected {expected} "
                         f"for a {count}x{width} code")
    flat = np.frombuffer(data, dtype="<f4", count=count * width, offset=8)
    crf = CRFParams(*struct.unpack_from("<fff", data, 8 + 4 * count * width))
    layers = torch.from_numpy(flat.copy()).reshape(count, width)
    return ExtendedLatentCode(layers), crf


def save_trace(path: Union[str, Path], records: list[dict]) -> None:
    """Write per-iteration optimization records, one JSON object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def dump_torgb_diagnostic(state: Optional[ProjectionState],
                          generator: Generator,
                          output_dir: Union[str, Path]) -> list[Path]:
    """Visualize the per-level RGB taps of the sibling and projected codes.

    Each level yields a native-scale image (0.5 + tap) and a 10x-amplified
    one for both codes, plus one JSON table of channel-covariance magnitudes
    per level. Raises ValueError on a missing or empty state before writing
    anything. Returns the written paths.
    """
    if state is None or state.code is None or state.code.layers.numel() == 0:
        raise ValueError("projection state holds no codes to visualize")
    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        renders = {"sibling": synthesize(generator, state.sibling_code),
                   "result": synthesize(generator, state.code)}
    written: list[Path] = []
    table = []
    size = generator.resolution
    for index in range(len(renders["sibling"].torgb)):
        resolution = int(renders["sibling"].torgb[index].shape[-1])
        row: dict = {"level": index, "resolution": resolution}
        for name, out in renders.items():
            tap = out.torgb[index]
            row[name] = float(torch.linalg.matrix_norm(channel_covariance(tap)))
            for scale_name, gain in (("native", 1.0), ("amplified", 10.0)):
                img = (0.5 + gain * tap).clamp(0.0, 1.0)
                if resolution != size:
                    img = resample(img, (size, size))
                target = out_dir / f"tap_{name}_{resolution:03d}_{scale_name}.png"
                write_image(target, img)
                written.append(target)
        if row["sibling"] > 0.0:
            row["ratio"] = row["result"] / row["sibling"]
        table.append(row)
    table_path = out_dir / "tap_covariance.json"
    table_path.write_text(json.dumps({"levels": table}, indent=2) + "\n",
                          encoding="utf-8")
    written.append(table_path)
    return written


def _scale_box(box: tuple[int, int, int, int], sx: float, sy: float,
               size: int) -> tuple[int, int, int, int]:
    x0, y0, x1, y1 = box
    nx0 = min(size - 1, max(0, math.floor(x0 * sx)))
    ny0 = min(size - 1, max(0, math.floor(y0 * sy)))
    nx1 = min(size, max(nx0 + 1, math.ceil(x1 * sx)))
    ny1 = min(size, max(ny0 + 1, math.ceil(y1 * sy)))
    return (nx0, ny0, nx1, ny1)


def _scale_eyes(eyes: EyeRegions, width: int, height: int,
                size: int) -> EyeRegions:
    sx, sy = size / width, size / height
    return EyeRegions(left=_scale_box(eyes.left, sx, sy, size),
                      right=_scale_box(eyes.right, sx, sy, size))


def _stage_records(stages) -> list[dict]:
    return [{"cutoff_resolution": s.cutoff_resolution,
             "iterations": s.iterations,
             "style_lr": s.style_lr,
             "crf_lr": s.crf_lr,
             "noise_scale": s.noise_scale,
             "noise_ramp_fraction": s.noise_ramp_fraction} for s in stages]


def _error(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


def run(cfg: ProjectionConfig) -> int:
    """Execute one restoration run and return a process exit status.

    Artifacts land in cfg.output_dir: the final and sibling renders, the
    serialized codes, the loss trace, and the run manifest (plus the tap
    diagnostic when requested).
    """
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    film = film_for_year(cfg.year, cfg.film)

    try:
        generator, encoder, objective, asset_records = _load_assets(cfg, film)
    except EncoderAssetError as exc:
        _error(f"encoder checkpoint: {exc}")
        return EXIT_MISSING_ENCODER
    except MissingAssetError as exc:
        _error(str(exc))
        return EXIT_MISSING_ASSET

    try:
        raw = read_image(cfg.input_path)
    except (OSError, ValueError) as exc:
        _error(f"input image {cfg.input_path}: {exc}")
        return EXIT_UNREADABLE_INPUT
    # Scans of monochrome prints usually arrive RGB-encoded; collapse by
    # channel mean before treating the values as film density.
    gray = raw if raw.shape[0] == 1 else raw.mean(dim=0, keepdim=True)

    try:
        eyes = acquire_eye_regions(gray, cfg.eyes, cfg.eye_provider)
    except EyeRegionError as exc:
        _error(f"eye regions: {exc}")
        return EXIT_INVALID_EYES
    given_eyes = eyes

    size = generator.resolution
    height, width = gray.shape[-2:]
    if (height, width) != (size, size):
        gray = resample(gray, (size, size))
        eyes = _scale_eyes(eyes, width, height, size)

    toy_iters = TOY_STAGE_ITERS if cfg.toy else (DEFAULT_STAGE1[1], DEFAULT_STAGE2[1])
    stages = default_stages(
        cfg.stage1_iters if cfg.stage1_iters is not None else toy_iters[0],
        cfg.stage2_iters if cfg.stage2_iters is not None else toy_iters[1])
    settings = ProjectionSettings(film=film, sigma=cfg.sigma, eyes=eyes,
                                  objective=objective, stages=stages,
                                  seed=cfg.seed)
    try:
        final, state = project(gray, generator, encoder, settings)
    except ProjectionDivergedError as exc:
        _error(f"projection diverged at iteration {exc.iteration}")
        return EXIT_FAILURE

    with torch.no_grad():
        sibling_img = synthesize(generator, state.sibling_code).image
    write_image(out_dir / FINAL_IMAGE_NAME, final)
    write_image(out_dir / SIBLING_IMAGE_NAME, sibling_img)
    save_codes(out_dir / CODES_NAME, state.code, state.crf)
    save_trace(out_dir / TRACE_NAME, state.trace)

    manifest = {
        "input": {"path": str(cfg.input_path), "sha256": _sha256(cfg.input_path)},
        "assets": asset_records,
        "film": film.value,
        "year": cfg.year,
        "sigma": cfg.sigma,
        "seed": cfg.seed,
        "toy": cfg.toy,
        "eyes": {"given": {"left": list(given_eyes.left),
                           "right": list(given_eyes.right)},
                 "working": {"left": list(eyes.left),
                             "right": list(eyes.right)}},
        "stages": _stage_records(stages),
        "weights": asdict(cfg.weights),
        "outputs": {"final_image": FINAL_IMAGE_NAME,
                    "sibling_image": SIBLING_IMAGE_NAME,
                    "codes": CODES_NAME,
                    "trace": TRACE_NAME},
        "iterations": state.iteration,
        "warnings": state.warnings,
    }
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    if cfg.dump_taps:
        dump_torgb_diagnostic(state, generator, out_dir)
    return EXIT_OK
