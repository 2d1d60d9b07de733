"""Batch driver: ``simulate --scene scene.json --out frames/``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from .config import ConfigError, load_scene
from .simulation import Simulation, SimulationError, load_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3

logger = logging.getLogger("thermompm")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="simulate", description="Run a combustion scene and write frame files.")
    ap.add_argument("--scene", required=True, help="scene JSON file")
    ap.add_argument("--out", required=True, help="output directory for frame_%%06d.bin files")
    ap.add_argument("--frames", type=int, help="number of frames (overrides output.frame_count)")
    ap.add_argument("--threads", type=int, help="worker count for particle transfers")
    ap.add_argument("--checkpoint", help="refresh this checkpoint file after every frame")
    ap.add_argument("--resume", help="continue from a checkpoint file")
    ap.add_argument("--csv", action="store_true", help="also write a CSV dump per frame")
    return ap


def _setup_logging() -> None:
    level = os.environ.get("SIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        cfg, particles = load_scene(args.scene)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads: must be at least 1")
            cfg.solver = dataclasses.replace(cfg.solver, threads=args.threads)
        if args.frames is not None and args.frames < 0:
            raise ConfigError("--frames: must be non-negative")
        if args.csv:
            cfg.output = dataclasses.replace(cfg.output, csv=True)
        sim = Simulation(cfg)
        if args.resume:
            try:
                state = load_checkpoint(args.resume, sim)
            except (OSError, ValueError, KeyError) as err:
                raise ConfigError(f"--resume: {err}") from err
        else:
            state = sim.initial_state(particles)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        summary = sim.run(state, args.out, args.frames, args.checkpoint)
    except SimulationError as err:
        print(f"solver failure: {err} (completed frames: {state.frame})", file=sys.stderr)
        return EXIT_SOLVER
    t = summary["totals"]
    print(f"{t['frames']} frames, {t['steps']} steps, {t['seconds_per_frame']:.3f} s/frame -> {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
