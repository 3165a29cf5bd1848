"""Experiment configuration.

Values come from command-line flags, else from environment variables (a .env file is loaded
first), else from the preset defaults.

    QSD_SEED       master seed                          (default 0)
    QSD_WORKERS    worker processes                     (default 1)
    QSD_LOG_LEVEL  logging level                        (default INFO)
    QSD_SEGMENTS   finite time error segments M
    QSD_RUNS       coupling runs
    QSD_PRESET     sir | oregonator | lv4               (default sir)
    QSD_VOLUMES    comma separated volumes for `table`
    QSD_OUT_DIR    directory for outputs given as bare file names
"""

import dataclasses
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Tuple

from dotenv import load_dotenv

from qsd_sensitivity.errors import ConfigError
from qsd_sensitivity.presets import PRESET_NAMES, preset_defaults

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "qsd", "fte", "contraction", "bound", "table")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def _check_multiple(horizon: float, step: float) -> None:
    if not horizon > 0:
        raise ConfigError(f"horizon must be positive, got {horizon}")
    steps = round(horizon / step)
    if steps < 1 or abs(steps * step - horizon) > 1e-9 * horizon:
        raise ConfigError(f"horizon {horizon} must be an integer multiple of the step {step}")


@dataclass(frozen=True)
class ExperimentConfig:
    command: str
    preset: Optional[str]
    network_path: Optional[str]
    volume: float
    step: float
    horizon: float
    delta: float
    segments: int
    runs: int
    seed: int
    bins: int
    steps: int
    process: str = "poisson"
    start: Optional[Tuple[float, ...]] = None
    volumes: Tuple[float, ...] = ()
    horizons: Tuple[float, ...] = ()
    threshold: Optional[float] = None
    skeleton_length: Optional[int] = None
    max_coupling_steps: Optional[int] = None
    thinning: int = 1
    reuse_skeletons: bool = False
    carry_reservoir: bool = True
    compat_ac: bool = False
    width_threshold: float = 0.1
    workers: int = 1
    log_level: str = "INFO"
    out: Optional[str] = None
    json_summary: Optional[str] = None

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if (self.preset is None) == (self.network_path is None):
            raise ConfigError("give exactly one of a preset or a network file")
        if self.preset is not None and self.preset not in PRESET_NAMES:
            raise ConfigError(
                f"unknown preset {self.preset!r}; choose one of {', '.join(PRESET_NAMES)}"
            )
        if self.network_path is not None and self.start is None:
            raise ConfigError("a network file needs an explicit --start state")
        for name in ("volume", "step", "horizon", "delta", "width_threshold"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("segments", "runs", "bins", "steps", "thinning", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        for name in ("skeleton_length", "max_coupling_steps"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be at least 1, got {value}")
        if self.threshold is not None and not self.threshold > 0:
            raise ConfigError(f"threshold must be positive, got {self.threshold}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if any(not v > 0 for v in self.volumes):
            raise ConfigError("every volume must be positive")
        if self.horizons and len(self.horizons) != len(self.volumes):
            raise ConfigError("give one horizon per volume")
        for horizon in (self.horizon, *self.horizons):
            _check_multiple(horizon, self.step)
        if self.process not in ("poisson", "diffusion"):
            raise ConfigError(f"unknown process {self.process!r}")
        if self.log_level not in LOG_LEVELS:
            raise ConfigError(f"log level must be one of {', '.join(LOG_LEVELS)}")

    @property
    def steps_per_segment(self) -> int:
        return int(round(self.horizon / self.step))

    def to_echo(self) -> dict:
        """JSON-serialisable dict; from_echo(to_echo()) == self."""
        echo = dataclasses.asdict(self)
        for name in ("start", "volumes", "horizons"):
            if echo[name] is not None:
                echo[name] = list(echo[name])
        return echo

    @classmethod
    def from_echo(cls, echo: Mapping) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(echo) - known
        if unknown:
            raise ConfigError(f"unknown config keys in echo: {', '.join(sorted(unknown))}")
        values = dict(echo)
        for name in ("start", "volumes", "horizons"):
            if values.get(name) is not None:
                values[name] = tuple(float(v) for v in values[name])
        return cls(**values)


def parse_floats(text: str, what: str) -> Tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{what} must be a comma separated list of numbers, got {text!r}") from None
    if not values:
        raise ConfigError(f"{what} is empty")
    return values


def _env_int(environ: Mapping[str, str], name: str) -> Optional[int]:
    value = environ.get(name)
    if value is None or value == "":
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {value!r}") from None


def _first(*values):
    for v in values:
        if v is not None:
            return v
    return None


def _output_path(path: Optional[str], out_dir: Optional[str]) -> Optional[str]:
    if path is None or out_dir is None or Path(path).parent != Path("."):
        return path
    return str(Path(out_dir) / path)


def resolve_config(args, environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Merge parsed flags with the environment and preset defaults.

    Args:
        args: argparse namespace from the CLI parser
        environ: environment mapping, os.environ after load_dotenv() when omitted

    Returns:
        validated ExperimentConfig
    """
    if environ is None:
        load_dotenv()
        environ = os.environ

    network_path = args.network
    preset_name = None
    if network_path is None:
        preset_name = args.preset or environ.get("QSD_PRESET") or "sir"
    elif not Path(network_path).is_file():
        raise ConfigError(f"network file {network_path} does not exist")

    if preset_name is not None:
        if preset_name not in PRESET_NAMES:
            raise ConfigError(
                f"unknown preset {preset_name!r}; choose one of {', '.join(PRESET_NAMES)}"
            )
        d = preset_defaults(preset_name)
    else:
        d = None
        missing = [
            flag
            for flag, value in (("--volume", args.volume), ("--step", args.step),
                                ("--horizon", args.horizon), ("--delta", args.delta))
            if value is None
        ]
        if missing:
            raise ConfigError(f"a network file needs explicit {', '.join(missing)}")

    volume = _first(args.volume, d and d.volume)
    step = _first(args.step, d and d.step)
    horizon = _first(args.horizon, d and d.horizon_for(volume))
    volumes = (
        parse_floats(args.volumes, "--volumes") if args.volumes
        else parse_floats(environ["QSD_VOLUMES"], "QSD_VOLUMES") if environ.get("QSD_VOLUMES")
        else (volume,)
    )
    horizons = tuple(
        float(args.horizon) if args.horizon is not None else d.horizon_for(v) for v in volumes
    )
    steps_per_segment = max(1, int(round(horizon / step)))
    out_dir = environ.get("QSD_OUT_DIR") or None

    return ExperimentConfig(
        command=args.command,
        preset=preset_name,
        network_path=network_path,
        volume=float(volume),
        step=float(step),
        horizon=float(horizon),
        delta=float(_first(args.delta, d and d.delta)),
        segments=_first(args.segments, _env_int(environ, "QSD_SEGMENTS"), d and d.segments, 100),
        runs=_first(args.runs, _env_int(environ, "QSD_RUNS"), d and d.runs, 100),
        seed=_first(args.seed, _env_int(environ, "QSD_SEED"), 0),
        bins=_first(args.bins, d and d.bins, 30),
        steps=_first(args.steps, 100 * steps_per_segment),
        process=args.process,
        start=parse_floats(args.start, "--start") if args.start else None,
        volumes=tuple(float(v) for v in volumes),
        horizons=horizons,
        threshold=args.threshold,
        skeleton_length=args.skeleton_length,
        max_coupling_steps=args.max_coupling_steps,
        thinning=args.thinning,
        reuse_skeletons=args.reuse_skeletons,
        carry_reservoir=not args.reset_reservoir,
        compat_ac=args.compat_ac,
        width_threshold=args.width_threshold,
        workers=_first(args.workers, _env_int(environ, "QSD_WORKERS"), 1),
        log_level=(args.log_level or environ.get("QSD_LOG_LEVEL") or "INFO").upper(),
        out=_output_path(args.out, out_dir),
        json_summary=_output_path(args.json_summary, out_dir),
    )


def load_replay(path: str) -> ExperimentConfig:
    """Config echo stored in a JSON summary written by an earlier run."""
    try:
        with open(path, encoding="utf-8") as fh:
            summary = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"replay summary {path} does not exist") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"replay summary {path} is not valid JSON: {e}") from None
    if "config" not in summary:
        raise ConfigError(f"replay summary {path} has no config echo")
    return ExperimentConfig.from_echo(summary["config"])
