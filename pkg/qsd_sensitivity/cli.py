"""CLI entry and runner for the QSD sensitivity pipeline.

Subcommands simulate, qsd, fte, contraction, bound and table each write a CSV (stdout or --out)
and, with --json-summary or --out, a JSON summary echoing the full configuration.
"""

import argparse
import asyncio
import hashlib
import io
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from qsd_sensitivity import __version__
from qsd_sensitivity import rng as rngmod
from qsd_sensitivity.config import ExperimentConfig, load_replay, resolve_config
from qsd_sensitivity.errors import ConfigError, QsdError, TailFitRejected
from qsd_sensitivity.network import ReactionNetwork, load_network
from qsd_sensitivity.presets import initial_state, preset, preset_defaults
from qsd_sensitivity.qsd import (
    empirical_w1,
    histogram,
    lattice_mesh,
    refine_to_common_mesh,
    tv_distance,
    uniform_mesh,
    write_histogram_csv,
)
from qsd_sensitivity.coupling import write_outcomes_csv
from qsd_sensitivity.sensitivity import (
    Budgets,
    estimate_bound,
    estimate_contraction,
    finite_time_error,
    write_bound_csv,
)
from qsd_sensitivity.simulate import SimConfig, simulate_with_regeneration, write_trajectory_csv

logger = logging.getLogger(__name__)

W1_SAMPLES = 512
QSD_BURN_IN = 0.1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qsd-sensitivity",
        description="Bound the distance between the QSDs of a mass-action network and its "
        "diffusion approximation",
    )
    parser.add_argument(
        "--replay",
        dest="replay",
        default=None,
        help="Re-run the command recorded in a JSON summary",
    )
    parser.add_argument(
        "--log-level",
        dest="top_log_level",
        default=None,
        help="Logging level (overrides env QSD_LOG_LEVEL)",
    )

    common = argparse.ArgumentParser(add_help=False)
    source = common.add_mutually_exclusive_group()
    source.add_argument("--preset", dest="preset", help="sir, oregonator or lv4 (env QSD_PRESET)")
    source.add_argument("--network", dest="network", help="Path to a TOML network file")
    common.add_argument("--start", dest="start", help="Initial state, comma separated")
    common.add_argument("--volume", dest="volume", type=float, help="Volume V")
    common.add_argument("--volumes", dest="volumes", help="Comma separated volumes for table")
    common.add_argument("--step", dest="step", type=float, help="Time step h")
    common.add_argument("--horizon", dest="horizon", type=float, help="Segment length T")
    common.add_argument("--delta", dest="delta", type=float, help="Skeleton grid step")
    common.add_argument(
        "--skeleton-length", dest="skeleton_length", type=int, default=None,
        help="Fixed skeleton length in cells (default: sized automatically)",
    )
    common.add_argument("--segments", dest="segments", type=int, help="Finite time error segments")
    common.add_argument("--runs", dest="runs", type=int, help="Coupling runs")
    common.add_argument("--steps", dest="steps", type=int, help="Steps of a free run")
    common.add_argument(
        "--process", dest="process", choices=("poisson", "diffusion"), default="poisson",
        help="Process for simulate",
    )
    common.add_argument("--threshold", dest="threshold", type=float, help="Coupling threshold")
    common.add_argument(
        "--max-coupling-steps", dest="max_coupling_steps", type=int, default=None,
        help="Censor coupling runs after this many steps",
    )
    common.add_argument("--bins", dest="bins", type=int, help="Histogram bins per dimension")
    common.add_argument("--thinning", dest="thinning", type=int, default=1,
                        help="Store every s-th state in the occupation reservoir")
    common.add_argument("--reuse-skeletons", dest="reuse_skeletons", action="store_true",
                        help="Reuse one skeleton set for every segment")
    common.add_argument("--reset-reservoir", dest="reset_reservoir", action="store_true",
                        help="Start every segment with an empty occupation reservoir")
    common.add_argument("--compat-ac", dest="compat_ac", action="store_true",
                        help="Agresti-Coull with n~ = n_i + z^2")
    common.add_argument("--width-threshold", dest="width_threshold", type=float, default=0.1,
                        help="Largest accepted confidence width at the tail start")
    common.add_argument("--seed", dest="seed", type=int, help="Master seed (env QSD_SEED)")
    common.add_argument("--workers", dest="workers", type=int, help="Worker processes")
    common.add_argument("--out", dest="out", help="CSV output path (default stdout)")
    common.add_argument("--json-summary", dest="json_summary", help="JSON summary path")
    common.add_argument("--log-level", dest="log_level", default=None,
                        help="Logging level (overrides env QSD_LOG_LEVEL)")

    commands = parser.add_subparsers(dest="command")
    for name, help_text in (
        ("simulate", "Free regenerating run of one process, trajectory CSV"),
        ("qsd", "QSD histograms of both processes with TV and W1 distances"),
        ("fte", "Finite time error over chained paired segments"),
        ("contraction", "Coupling times and the fitted contraction rate"),
        ("bound", "Finite time error, contraction rate and the assembled bound"),
        ("table", "One bound row per volume"),
    ):
        commands.add_parser(name, parents=[common], help=help_text)
    return parser


def load_model(cfg: ExperimentConfig) -> Tuple[ReactionNetwork, np.ndarray]:
    """Network and interior start state of a config."""
    if cfg.preset is not None:
        net = preset(cfg.preset)
        start = np.asarray(cfg.start) if cfg.start else initial_state(cfg.preset)
        return net, start
    try:
        text = Path(cfg.network_path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read network file {cfg.network_path}: {e}") from None
    return load_network(text), np.asarray(cfg.start, dtype=float)


def budgets_of(cfg: ExperimentConfig) -> Budgets:
    return Budgets(
        segments=cfg.segments,
        runs=cfg.runs,
        max_coupling_steps=cfg.max_coupling_steps,
        threshold=cfg.threshold,
        width_threshold=cfg.width_threshold,
        compat_ac=cfg.compat_ac,
        reuse_skeletons=cfg.reuse_skeletons,
        skeleton_length=cfg.skeleton_length,
    )


def sim_config(cfg: ExperimentConfig, volume: Optional[float] = None,
               horizon: Optional[float] = None) -> SimConfig:
    return SimConfig.from_horizon(
        cfg.volume if volume is None else volume,
        cfg.step,
        cfg.horizon if horizon is None else horizon,
        seed=cfg.seed,
        thinning=cfg.thinning,
        carry_reservoir=cfg.carry_reservoir,
    )


def input_hash(cfg: ExperimentConfig) -> str:
    """sha256 over the canonical config echo and the network document."""
    digest = hashlib.sha256()
    echo = {k: v for k, v in cfg.to_echo().items() if k not in ("out", "json_summary")}
    digest.update(json.dumps(echo, sort_keys=True).encode("utf-8"))
    if cfg.network_path is not None:
        digest.update(Path(cfg.network_path).read_bytes())
    return digest.hexdigest()


def _header(cfg: ExperimentConfig) -> str:
    echo = {k: v for k, v in cfg.to_echo().items() if k not in ("out", "json_summary")}
    return f"# qsd-sensitivity {__version__} config={json.dumps(echo, sort_keys=True)}\n"


def run_simulate(cfg: ExperimentConfig, csv_out: io.StringIO) -> dict:
    net, start = load_model(cfg)
    result = simulate_with_regeneration(net, sim_config(cfg), cfg.process, cfg.steps, start=start)
    write_trajectory_csv(csv_out, net, result)
    return {
        "process": cfg.process,
        "steps": cfg.steps,
        "regenerations": result.regen_count,
        "final_state": result.final_state.tolist(),
    }


def run_qsd(cfg: ExperimentConfig, csv_out: io.StringIO) -> dict:
    net, start = load_model(cfg)
    sim = sim_config(cfg)
    runs = {
        process: simulate_with_regeneration(
            net, sim, process, cfg.steps, start=start, replica=replica, keep_trajectory=False
        )
        for replica, process in enumerate(("poisson", "diffusion"))
    }
    coarse = None
    if cfg.preset is not None:
        d = preset_defaults(cfg.preset)
        mesh = uniform_mesh(d.mesh_lower, d.mesh_upper, cfg.bins)
        coarse = lattice_mesh(mesh, cfg.volume, d.coarse_bins)
    else:
        pooled = np.vstack([r.reservoir.states for r in runs.values()])
        mesh = uniform_mesh(np.zeros(net.dimension), pooled.max(axis=0) * 1.05, cfg.bins)
    fine = {p: histogram(r.reservoir, mesh, discard=QSD_BURN_IN) for p, r in runs.items()}
    if coarse is None:
        hists = fine
    else:
        logger.info("1/V lattice is coarser than the mesh; binning on the coarse mesh")
        hists = {
            p: refine_to_common_mesh(histogram(r.reservoir, coarse, discard=QSD_BURN_IN), mesh)
            for p, r in runs.items()
        }

    sampler = rngmod.stream(cfg.seed, rngmod.SAMPLING)
    samples = []
    for r in runs.values():
        states = r.reservoir.states[int(QSD_BURN_IN * len(r.reservoir)):]
        n = min(W1_SAMPLES, len(runs["poisson"].reservoir), len(runs["diffusion"].reservoir))
        samples.append(states[sampler.integers(0, len(states), size=n)])

    write_histogram_csv(csv_out, hists, net.species_names)
    return {
        "tv": tv_distance(hists["poisson"], hists["diffusion"]),
        "tv_fine_mesh": tv_distance(fine["poisson"], fine["diffusion"]),
        "mesh": "fine" if coarse is None else "coarse_refined",
        "w1": empirical_w1(*samples),
        "w1_samples": len(samples[0]),
        "clip_fraction": {p: h.clip_fraction for p, h in hists.items()},
        "regenerations": {p: r.regen_count for p, r in runs.items()},
    }


def run_fte(cfg: ExperimentConfig, csv_out: io.StringIO) -> dict:
    net, start = load_model(cfg)
    estimate = finite_time_error(
        net,
        sim_config(cfg),
        cfg.segments,
        start,
        cfg.delta,
        skeleton_length=cfg.skeleton_length,
        reuse_skeletons=cfg.reuse_skeletons,
    )
    csv_out.write("segment,distance\n")
    for m, distance in enumerate(estimate.distances):
        csv_out.write(f"{m},{distance!r}\n")
    return {
        "fte": estimate.mean,
        "std_error": estimate.std_error,
        "segments": estimate.segments,
        "regenerations": {"poisson": estimate.regenerations[0],
                          "diffusion": estimate.regenerations[1]},
    }


def _executor(cfg: ExperimentConfig) -> Optional[ProcessPoolExecutor]:
    return ProcessPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None


def run_contraction(cfg: ExperimentConfig, csv_out: io.StringIO) -> dict:
    net, start = load_model(cfg)
    pool = _executor(cfg)
    try:
        outcomes, _, fit = estimate_contraction(
            net, sim_config(cfg), budgets_of(cfg), start, workers=pool
        )
    finally:
        if pool is not None:
            pool.shutdown()
    write_outcomes_csv(csv_out, outcomes, cfg.step)
    return {
        "gamma": fit.gamma,
        "accepted": fit.accepted,
        "tail_start_time": fit.tail_start_time,
        "message": fit.message,
        "counts": {s: sum(o.status == s for o in outcomes)
                   for s in ("coupled", "extinct", "censored")},
    }


def _bound_task(echo: dict, volume: float, horizon: float):
    cfg = ExperimentConfig.from_echo(echo)
    net, start = load_model(cfg)
    return estimate_bound(
        net,
        start,
        sim_config(cfg, volume, horizon),
        budgets_of(cfg),
        cfg.delta,
        label=cfg.preset or Path(cfg.network_path).stem,
    )


def run_bound(cfg: ExperimentConfig, csv_out: io.StringIO) -> dict:
    net, start = load_model(cfg)
    pool = _executor(cfg)
    try:
        report = estimate_bound(
            net, start, sim_config(cfg), budgets_of(cfg), cfg.delta,
            workers=pool, label=cfg.preset or Path(cfg.network_path).stem,
        )
    finally:
        if pool is not None:
            pool.shutdown()
    write_bound_csv(csv_out, [report])
    return {"rows": [_report_dict(report)]}


def collect_table_rows(volumes, results, csv_out: io.StringIO) -> dict:
    """Write the accepted rows in volume order; rejected tail fits are listed by volume.

    Any other failure of a row is raised.
    """
    reports, rejected = [], []
    for volume, result in zip(volumes, results):
        if isinstance(result, TailFitRejected):
            logger.warning("V=%g: %s", volume, result)
            rejected.append(volume)
        elif isinstance(result, BaseException):
            raise result
        else:
            reports.append(result)
    write_bound_csv(csv_out, reports)
    return {"rows": [_report_dict(r) for r in reports], "rejected": rejected}


async def run_table(cfg: ExperimentConfig, csv_out: io.StringIO) -> dict:
    """Rows run concurrently in worker processes and are written in volume order."""
    echo = cfg.to_echo()
    horizons = cfg.horizons or tuple(cfg.horizon for _ in cfg.volumes)
    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=min(cfg.workers, len(cfg.volumes))) as pool:
        results = await asyncio.gather(
            *(
                loop.run_in_executor(pool, _bound_task, echo, v, t)
                for v, t in zip(cfg.volumes, horizons)
            ),
            return_exceptions=True,
        )
    return collect_table_rows(cfg.volumes, results, csv_out)


def _report_dict(report) -> dict:
    return {
        "V": report.volume,
        "fte": report.fte,
        "fte_se": report.fte_std_error,
        "gamma": report.gamma,
        "alpha": report.alpha,
        "bound": report.bound,
        "h": report.step,
        "T": report.horizon,
        "correction": report.correction,
    }


_RUNNERS = {
    "simulate": run_simulate,
    "qsd": run_qsd,
    "fte": run_fte,
    "contraction": run_contraction,
    "bound": run_bound,
}


def _write_outputs(cfg: ExperimentConfig, csv_text: str, summary: dict) -> None:
    if cfg.out:
        Path(cfg.out).write_text(csv_text, encoding="utf-8")
    else:
        sys.stdout.write(csv_text)
    summary_path = cfg.json_summary or (
        str(Path(cfg.out).with_suffix(".json")) if cfg.out else None
    )
    if summary_path:
        Path(summary_path).write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


async def main_async(argv=None) -> int:
    """Async main function."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.replay:
        cfg = load_replay(args.replay)
        if args.top_log_level:
            cfg = replace(cfg, log_level=args.top_log_level.upper())
    elif args.command is None:
        parser.error("a subcommand is required unless --replay is given")
    else:
        if args.log_level is None:
            args.log_level = args.top_log_level
        cfg = resolve_config(args)

    logging.basicConfig(
        level=cfg.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    logger.info("%s with seed %d", cfg.command, cfg.seed)

    started = time.perf_counter()
    csv_out = io.StringIO()
    csv_out.write(_header(cfg))
    status = "ok"
    failure: Optional[QsdError] = None
    try:
        if cfg.command == "table":
            results = await run_table(cfg, csv_out)
            if results["rejected"]:
                failure = TailFitRejected(
                    "tail fit rejected for V=" + ", ".join(f"{v:g}" for v in results["rejected"])
                )
        else:
            results = await asyncio.to_thread(_RUNNERS[cfg.command], cfg, csv_out)
            if cfg.command == "contraction" and not results["accepted"]:
                failure = TailFitRejected(results["message"])
    except TailFitRejected as e:
        failure, results = e, {}
    if failure is not None:
        status = "tail_rejected"

    summary = {
        "command": cfg.command,
        "version": __version__,
        "config": cfg.to_echo(),
        "input_hash": input_hash(cfg),
        "seed": cfg.seed,
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
        "status": status,
        "results": results,
    }
    _write_outputs(cfg, csv_out.getvalue(), summary)
    logger.info("%s finished in %.1f s", cfg.command, summary["wall_clock_seconds"])
    if failure is not None:
        raise failure
    return 0


def main(argv=None) -> int:
    """Synchronous entry point."""
    try:
        return asyncio.run(main_async(argv))
    except QsdError as e:
        print(f"error={type(e).__name__} message={e}", file=sys.stderr)
        raise SystemExit(e.exit_code) from None


if __name__ == "__main__":
    raise SystemExit(main())
