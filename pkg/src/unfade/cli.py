"""Command-line entry point: one restoration run (or a batch) per invocation."""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Optional

import click
from click.core import ParameterSource

from .imagecore import FilmModel
from .losses import EyeRegions
from .pipeline import (
    EXIT_INVALID_EYES,
    EXIT_OK,
    EyeRegionError,
    ProjectionConfig,
    run,
)

FILM_NAMES = {
    "blue": FilmModel.BLUE_SENSITIVE,
    "ortho": FilmModel.ORTHOCHROMATIC,
    "pan": FilmModel.PANCHROMATIC,
}


def parse_eye_boxes(text: str) -> Optional[EyeRegions]:
    """Parse "x0,y0,x1,y1;x0,y0,x1,y1" into eye boxes; "detect" yields None."""
    if text.strip().lower() == "detect":
        return None
    parts = text.split(";")
    if len(parts) != 2:
        raise ValueError(f"expected two eye boxes separated by ';', got {text!r}")
    boxes = []
    for part in parts:
        coords = part.split(",")
        if len(coords) != 4:
            raise ValueError(f"eye box {part.strip()!r} needs four integers")
        boxes.append(tuple(int(c) for c in coords))
    return EyeRegions(left=boxes[0], right=boxes[1])


def load_config_file(path: Path) -> dict[str, str]:
    """Parse a run configuration file: one ``key = value`` per line, UTF-8.

    '#' starts a comment; keys are the long flag names with '-' or '_'
    interchangeably. Values given on the command line take precedence.
    """
    values: dict[str, str] = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(),
                                   start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ValueError(f"{path}:{line_no}: expected 'key = value', "
                             f"got {line.strip()!r}")
        key, _, value = text.partition("=")
        values[key.strip().lower().replace("-", "_")] = value.strip()
    return values


_BOOL_VALUES = {"true": True, "false": False, "1": True, "0": False,
                "yes": True, "no": False}


def _parse_bool(key: str, raw: str) -> bool:
    try:
        return _BOOL_VALUES[raw.lower()]
    except KeyError:
        raise ValueError(f"config key {key!r} expects a boolean, got {raw!r}")


# Config-file key (the long flag name) -> (parameter name, converter);
# a None converter marks a boolean flag.
_CONFIG_KEYS = {
    "input": ("input_path", str),
    "output_dir": ("output_dir", str),
    "batch": ("batch", str),
    "film": ("film", str),
    "year": ("year", int),
    "sigma": ("sigma", float),
    "eyes": ("eyes", str),
    "toy": ("toy", None),
    "generator": ("generator_path", str),
    "encoder": ("encoder_path", str),
    "weights_manifest": ("weights_manifest", str),
    "seed": ("seed", int),
    "stage1_iters": ("stage1_iters", int),
    "stage2_iters": ("stage2_iters", int),
    "dump_taps": ("dump_taps", None),
}


def _merge_config(ctx: click.Context, cli_values: dict,
                  config_values: dict[str, str]) -> dict:
    """Overlay config-file values under explicitly passed flags."""
    merged = dict(cli_values)
    for key, raw in config_values.items():
        if key not in _CONFIG_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        param, converter = _CONFIG_KEYS[key]
        if ctx.get_parameter_source(param) == ParameterSource.COMMANDLINE:
            continue
        merged[param] = _parse_bool(key, raw) if converter is None else converter(raw)
    return merged


def _build_config(values: dict, input_path: str, output_dir: str,
                  ) -> ProjectionConfig:
    film_name = values["film"]
    if film_name is not None and film_name not in FILM_NAMES:
        raise ValueError(f"unknown film model {film_name!r}; "
                         f"expected one of {sorted(FILM_NAMES)}")
    try:
        eyes = parse_eye_boxes(values["eyes"]) if values["eyes"] else None
    except ValueError as exc:
        raise EyeRegionError(str(exc)) from exc
    return ProjectionConfig(
        input_path=input_path,
        output_dir=output_dir,
        film=FILM_NAMES[film_name] if film_name else None,
        year=values["year"],
        sigma=values["sigma"],
        eyes=eyes,
        toy=values["toy"],
        generator_path=values["generator_path"],
        encoder_path=values["encoder_path"],
        backbone_manifest=values["weights_manifest"],
        stage1_iters=values["stage1_iters"],
        stage2_iters=values["stage2_iters"],
        seed=values["seed"],
        dump_taps=values["dump_taps"],
    )


@click.command()
@click.option("--input", "input_path", type=str, default=None,
              help="Antique photograph to restore.")
@click.option("--output-dir", type=str, default=None,
              help="Directory receiving the run artifacts.")
@click.option("--batch", type=str, default=None,
              help="File listing one input path per line; each line becomes "
                   "an independent run in its own subdirectory.")
@click.option("--film", type=click.Choice(sorted(FILM_NAMES)), default=None,
              help="Film spectral model; defaults by capture year, else pan.")
@click.option("--year", type=int, default=None,
              help="Capture year; picks the era-appropriate film default.")
@click.option("--sigma", type=float, default=1.0, show_default=True,
              help="Lens/process blur in pixels at generator resolution.")
@click.option("--eyes", type=str, default=None,
              help='Eye boxes "x0,y0,x1,y1;x0,y0,x1,y1", or "detect" to use '
                   "a configured landmark provider.")
@click.option("--toy", is_flag=True, default=False,
              help="Use the bundled toy stack instead of checkpoint assets.")
@click.option("--generator", "generator_path", type=str, default=None,
              help="Generator checkpoint path.")
@click.option("--encoder", "encoder_path", type=str, default=None,
              help="Sibling-encoder checkpoint path.")
@click.option("--weights-manifest", type=str, default=None,
              help="Backbone asset manifest (perceptual/face/contextual).")
@click.option("--seed", type=int, default=0, show_default=True,
              help="Seed for the projection noise schedule.")
@click.option("--stage1-iters", type=int, default=None,
              help="Override the coarse-stage iteration count.")
@click.option("--stage2-iters", type=int, default=None,
              help="Override the fine-stage iteration count.")
@click.option("--dump-taps", is_flag=True, default=False,
              help="Also write per-level RGB-tap diagnostics.")
@click.option("--config", "config_path", type=str, default=None,
              help="Key-value file mirroring these flags; flags win.")
@click.pass_context
def main(ctx: click.Context, **cli_values) -> None:
    """Reconstruct a modern color portrait from an antique photograph."""
    config_path = cli_values.pop("config_path")
    config_values: dict[str, str] = {}
    if config_path is not None:
        try:
            config_values = load_config_file(Path(config_path))
        except (OSError, ValueError) as exc:
            raise click.UsageError(f"config file: {exc}")
    try:
        values = _merge_config(ctx, cli_values, config_values)
    except ValueError as exc:
        raise click.UsageError(f"config file: {exc}")

    if values["batch"] is None and values["input_path"] is None:
        raise click.UsageError("either --input or --batch is required")
    if values["output_dir"] is None:
        raise click.UsageError("--output-dir is required")

    if values["batch"] is not None:
        try:
            lines = [line.strip() for line in
                     Path(values["batch"]).read_text(encoding="utf-8").splitlines()]
        except OSError as exc:
            raise click.UsageError(f"batch file: {exc}")
        inputs = [line for line in lines if line]
        if not inputs:
            raise click.UsageError("batch file lists no inputs")
    else:
        inputs = [values["input_path"]]

    out_root = Path(values["output_dir"])
    status = EXIT_OK
    for index, input_path in enumerate(inputs):
        if values["batch"] is not None:
            run_dir = out_root / f"{index:03d}_{Path(input_path).stem}"
        else:
            run_dir = out_root
        try:
            cfg = _build_config(values, input_path, str(run_dir))
        except EyeRegionError as exc:
            click.echo(f"error: eye regions: {exc}", err=True)
            status = status or EXIT_INVALID_EYES
            continue
        except ValueError as exc:
            raise click.UsageError(str(exc))
        code = run(cfg)
        if code == EXIT_OK:
            click.echo(f"wrote {run_dir}")
        else:
            click.echo(f"failed ({code}): {input_path}", err=True)
            status = status or code
    ctx.exit(status)
