"""Two-stage latent optimization recovering a modern portrait from an antique photo.

Stage 1 optimizes the coarse style codes (resolutions up to 32) against the
encoder-predicted sibling; its render then replaces the sibling as the color
and detail reference, and stage 2 continues on the codes up to 64. The camera
response parameters are optimized jointly throughout, starting from identity.
Rows above the stage cutoff stay bit-equal to the sibling codes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .features import FeatureSet, extract
from .generator import (
    ExtendedLatentCode,
    Generator,
    LatentCode,
    broadcast,
    partition,
    synthesize,
)
from .imagecore import CRFParams, DegradationConfig, FilmModel, degrade, resample
from .losses import (
    EyeRegions,
    LossWeights,
    PerceptualConfig,
    ReconstructionContext,
    color_transfer_loss,
    contextual_loss,
    reconstruction_terms,
)
from .sibling import SiblingEncoder, predict_sibling

# Optimized CRF gain/gamma are clamped to this floor after every step so the
# response stays a valid monotone curve.
CRF_FLOOR = 1e-3

DEFAULT_STAGE1 = (32, 250)
DEFAULT_STAGE2 = (64, 750)


class ProjectionDivergedError(RuntimeError):
    def __init__(self, iteration: int, terms: dict[str, float]):
        super().__init__(f"objective became non-finite at iteration {iteration}: {terms}")
        self.iteration = iteration
        self.terms = terms


@dataclass
class StageConfig:
    """One optimization stage: layer cutoff, budget, and step sizes."""

    cutoff_resolution: int
    iterations: int
    style_lr: float = 0.1
    crf_lr: float = 0.01
    noise_scale: float = 0.05
    noise_ramp_fraction: float = 0.75

    def __post_init__(self):
        if self.cutoff_resolution < 4:
            raise ValueError("cutoff_resolution must be >= 4")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.style_lr < 0 or self.crf_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if not 0 < self.noise_ramp_fraction <= 1:
            raise ValueError("noise_ramp_fraction must be in (0, 1]")


def default_stages(stage1_iters: int = DEFAULT_STAGE1[1],
                   stage2_iters: int = DEFAULT_STAGE2[1]) -> tuple[StageConfig, StageConfig]:
    return (StageConfig(DEFAULT_STAGE1[0], stage1_iters),
            StageConfig(DEFAULT_STAGE2[0], stage2_iters))


def noise_ramp(t: int, total: int, scale: float = 0.05,
               ramp_fraction: float = 0.75) -> float:
    """Transient code-noise scale at iteration t of a stage."""
    if total <= 0:
        return 0.0
    return scale * max(0.0, 1.0 - t / (ramp_fraction * total)) ** 2


@dataclass
class ProjectionReferences:
    """Fixed tensors one stage optimizes against."""

    input_image: torch.Tensor
    eyes: EyeRegions
    film: FilmModel
    sigma: float
    sibling_taps: list[torch.Tensor]
    sibling_features: FeatureSet


@dataclass
class ObjectiveConfig:
    """Loss weights plus the backbones evaluating each term."""

    weights: LossWeights
    reconstruction: ReconstructionContext
    contextual: PerceptualConfig


@dataclass
class ProjectionState:
    """Optimization state: codes, camera response, and bookkeeping."""

    code: ExtendedLatentCode
    crf: CRFParams
    sibling_code: ExtendedLatentCode
    iteration: int = 0
    trace: list[dict] = field(default_factory=list)
    warnings: list[dict] = field(default_factory=list)


def active_tap_levels(generator: Generator, cutoff_resolution: int) -> list[int]:
    """Indices of RGB tap levels whose codes are optimizable at this cutoff."""
    levels = []
    res = 4
    for i in range(generator.num_layers // 2):
        if res <= cutoff_resolution:
            levels.append(i)
        res *= 2
    return levels


def _objective(generator: Generator, codes: torch.Tensor, crf: CRFParams,
               refs: ProjectionReferences, objective: ObjectiveConfig,
               active_levels: Sequence[int]) -> tuple[torch.Tensor, dict[str, float]]:
    image, taps = generator(codes.unsqueeze(0))
    image = image[0]
    taps = [t[0] for t in taps]

    cfg = DegradationConfig(film=refs.film, sigma=refs.sigma, crf=crf)
    degraded = degrade(image, cfg)
    native = (refs.input_image.shape[-1], refs.input_image.shape[-2])
    degraded = resample(degraded, native)

    recon = reconstruction_terms(refs.input_image, degraded, refs.eyes,
                                 objective.reconstruction)
    ctx_cfg = objective.contextual
    render_features = extract(image, ctx_cfg.backbone, ctx_cfg.layers)
    ctx_term = contextual_loss(render_features, refs.sibling_features)
    color_term = color_transfer_loss(taps, refs.sibling_taps, active_levels)

    w = objective.weights
    total = (w.vgg * recon["vgg"] + w.face * recon["face"] + w.eye * recon["eye"]
             + w.ctx * ctx_term + w.color * color_term)
    terms = {
        "vgg": float(recon["vgg"].detach()),
        "face": float(recon["face"].detach()),
        "eye": float(recon["eye"].detach()),
        "ctx": float(ctx_term.detach()),
        "color": float(color_term.detach()),
        "total": float(total.detach()),
    }
    return total, terms


def evaluate_objective(generator: Generator, state: ProjectionState,
                       refs: ProjectionReferences, objective: ObjectiveConfig,
                       cutoff_resolution: int) -> dict[str, float]:
    """Clean (noise-free) objective of a state; no gradients."""
    levels = active_tap_levels(generator, cutoff_resolution)
    with torch.no_grad():
        _, terms = _objective(generator, state.code.layers, state.crf,
                              refs, objective, levels)
    return terms


def optimize_stage(generator: Generator, state: ProjectionState,
                   refs: ProjectionReferences, stage: StageConfig,
                   objective: ObjectiveConfig,
                   rng: torch.Generator) -> ProjectionState:
    """Run one stage of rectified-Adam descent on the optimizable rows + CRF.

    The returned state is the running-minimum snapshot of the clean objective,
    never worse than the initial state. Frozen rows are gradient-masked and
    stay bit-identical. A non-finite objective aborts with the iteration and
    the term breakdown.
    """
    if stage.iterations == 0:
        return state

    part = partition(state.code, stage.cutoff_resolution)
    active_levels = active_tap_levels(generator, stage.cutoff_resolution)
    frozen_rows = torch.tensor(part.frozen, dtype=torch.long)

    wplus = state.code.layers.detach().clone().requires_grad_(True)
    crf_a = torch.tensor(float(torch.as_tensor(state.crf.a)), requires_grad=True)
    crf_b = torch.tensor(float(torch.as_tensor(state.crf.b)), requires_grad=True)
    crf_g = torch.tensor(float(torch.as_tensor(state.crf.gamma)), requires_grad=True)
    optimizer = torch.optim.RAdam([
        {"params": [wplus], "lr": stage.style_lr},
        {"params": [crf_a, crf_b, crf_g], "lr": stage.crf_lr},
    ])

    def clean_terms() -> dict[str, float]:
        with torch.no_grad():
            _, terms = _objective(generator, wplus, CRFParams(crf_a, crf_b, crf_g),
                                  refs, objective, active_levels)
        return terms

    def snapshot() -> tuple[torch.Tensor, CRFParams]:
        return wplus.detach().clone(), CRFParams(float(crf_a.detach()),
                                                 float(crf_b.detach()),
                                                 float(crf_g.detach()))

    best_terms = clean_terms()
    best_total = best_terms["total"]
    best_state = snapshot()
    trace = list(state.trace)
    warnings = list(state.warnings)
    clean_history: list[float] = []
    warned = False

    for t in range(stage.iterations):
        scale = noise_ramp(t, stage.iterations, stage.noise_scale,
                           stage.noise_ramp_fraction)
        codes = wplus
        if scale > 0 and part.optimizable:
            noise = torch.zeros_like(wplus)
            drawn = torch.randn((len(part.optimizable), wplus.shape[1]),
                                generator=rng, dtype=wplus.dtype)
            noise[list(part.optimizable)] = drawn
            codes = wplus + scale * noise

        total, terms = _objective(generator, codes, CRFParams(crf_a, crf_b, crf_g),
                                  refs, objective, active_levels)
        if not math.isfinite(terms["total"]):
            raise ProjectionDivergedError(state.iteration + t, terms)

        optimizer.zero_grad()
        total.backward()
        if frozen_rows.numel():
            wplus.grad[frozen_rows] = 0.0
        optimizer.step()
        with torch.no_grad():
            crf_b.clamp_(min=CRF_FLOOR)
            crf_g.clamp_(min=CRF_FLOOR)

        after = clean_terms()
        if not math.isfinite(after["total"]):
            raise ProjectionDivergedError(state.iteration + t, after)
        clean_history.append(after["total"])
        if after["total"] < best_total:
            best_total = after["total"]
            best_state = snapshot()

        if (not warned and len(clean_history) > 100
                and clean_history[-1] >= clean_history[-101]):
            warnings.append({
                "iteration": state.iteration + t,
                "kind": "non_decreasing_window",
                "window": 100,
                "value": clean_history[-1],
            })
            warned = True

        record = {"iteration": state.iteration + t,
                  "cutoff": stage.cutoff_resolution,
                  "noise_scale": scale,
                  "clean_total": after["total"],
                  "best_total": best_total,
                  "crf_a": float(crf_a.detach()),
                  "crf_b": float(crf_b.detach()),
                  "crf_gamma": float(crf_g.detach())}
        record.update(terms)
        trace.append(record)

    best_code, best_crf = best_state
    return ProjectionState(code=ExtendedLatentCode(best_code), crf=best_crf,
                           sibling_code=state.sibling_code,
                           iteration=state.iteration + stage.iterations,
                           trace=trace, warnings=warnings)


@dataclass
class ProjectionSettings:
    """Everything project() needs beyond the three model objects."""

    film: FilmModel
    sigma: float
    eyes: EyeRegions
    objective: ObjectiveConfig
    stages: tuple[StageConfig, ...] = ()
    seed: int = 0
    sibling_override: Optional[LatentCode] = None

    def __post_init__(self):
        if not self.stages:
            self.stages = default_stages()
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def project(input_img: torch.Tensor, generator: Generator,
            encoder: Optional[SiblingEncoder],
            settings: ProjectionSettings) -> tuple[torch.Tensor, ProjectionState]:
    """Full two-stage projection of one grayscale portrait.

    Returns the final full-resolution render and the complete state. With
    zero-iteration stages the output is exactly the sibling synthesis.
    """
    if input_img.ndim != 3 or input_img.shape[0] != 1:
        raise ValueError(f"expected grayscale input (1, H, W), got {tuple(input_img.shape)}")
    height, width = input_img.shape[-2:]
    settings.eyes.validate_within(width, height)

    if settings.sibling_override is not None:
        sibling_w = settings.sibling_override
    else:
        if encoder is None:
            raise ValueError("either an encoder or a sibling override is required")
        sibling_w, _ = predict_sibling(encoder, generator, input_img)

    sibling_code = broadcast(sibling_w, generator.num_layers)
    with torch.no_grad():
        sibling_out = synthesize(generator, sibling_code)
    ctx_cfg = settings.objective.contextual

    def make_refs(reference_image: torch.Tensor,
                  reference_taps: list[torch.Tensor]) -> ProjectionReferences:
        with torch.no_grad():
            feats = extract(reference_image, ctx_cfg.backbone, ctx_cfg.layers)
        return ProjectionReferences(
            input_image=input_img,
            eyes=settings.eyes,
            film=settings.film,
            sigma=settings.sigma,
            sibling_taps=[t.detach() for t in reference_taps],
            sibling_features=feats,
        )

    rng = torch.Generator().manual_seed(settings.seed)
    state = ProjectionState(code=sibling_code.clone(), crf=CRFParams.identity(),
                            sibling_code=sibling_code.clone())

    refs = make_refs(sibling_out.image.detach(), sibling_out.torgb)
    for index, stage in enumerate(settings.stages):
        state = optimize_stage(generator, state, refs, stage,
                               settings.objective, rng)
        if index + 1 < len(settings.stages):
            # The stage render becomes the color/detail reference for the
            # next stage; frozen rows keep the original sibling codes.
            with torch.no_grad():
                stage_out = synthesize(generator, state.code)
            refs = make_refs(stage_out.image.detach(), stage_out.torgb)

    with torch.no_grad():
        final = synthesize(generator, state.code).image
    return final, state
