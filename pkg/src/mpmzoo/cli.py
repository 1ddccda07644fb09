"""Command line: simulate, estimate, render, bench.

Scene-file values can be overridden by flags (flag > file > default).
Exit codes: 0 success, 2 invalid input, 3 numerical instability, 4 I/O.
"""

import argparse
import json
import os
import resource
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import estimation as est
from .constitutive import MaterialField, MaterialSpec
from .errors import MPMError, ShapeMismatch, ValidationError
from .boundary import BoundaryCondition
from .mpm import GridSpec, Simulation, StepParams, init_state, rollout
from .render import export_frames, frames_from_trajectory, read_frames, splat_preview, write_pgm
from .scene import apply_overrides, load_scene

THREADS_ENV = "MPMZOO_THREADS"


def _threads(value):
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("threads must be >= 1")
    return n


def _positive(value):
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return n


def _scene_flags(p):
    g = p.add_argument_group("scene overrides")
    g.add_argument("--dt", type=float, help="time step (s)")
    g.add_argument("--grid-resolution", type=int, help="grid nodes per axis")
    g.add_argument("--sample-every", type=int, help="steps between sampled frames")
    g.add_argument("--seed", type=int, help="particle jitter seed")


def _overrides(args):
    return dict(dt=args.dt, grid_resolution=args.grid_resolution, sample_every=args.sample_every, seed=args.seed)


def _peak_rss_mb():
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def _print_json(obj):
    print(json.dumps(obj, sort_keys=True))


def cmd_simulate(args):
    cfg = apply_overrides(load_scene(args.scene), **_overrides(args))
    steps = cfg.n_steps if args.steps is None else args.steps
    if steps < 0:
        raise ValidationError("--steps must be non-negative")
    sim = cfg.build(threads=args.threads)
    t0 = time.perf_counter()
    with torch.no_grad():
        traj, _ = rollout(sim.state, sim.materials, sim.grid, sim.params, sim.bcs, steps, cfg.sample_every)
    wall = time.perf_counter() - t0
    frames = frames_from_trajectory(traj, sim.particles.covariances, sim.particles.opacities)
    export_frames(frames, args.out)
    summary = {"command": "simulate", "steps": steps, "frames": len(frames), "particles": len(sim.state),
               "wall_time_s": round(wall, 4), "output": str(args.out)}
    if args.summary:
        Path(args.summary).write_text(json.dumps(summary, indent=2) + "\n")
    _print_json(summary)
    return 0


def cmd_estimate(args):
    cfg = apply_overrides(load_scene(args.scene), **_overrides(args))
    learnable = cfg.learnable
    if not any(learnable):
        raise ValidationError("scene has no 'learnable' material to estimate")
    tcfg = est.TrainConfig(
        stages=args.stages, frames_per_stage=args.frames_per_stage, internal=args.internal, outer=args.outer,
        sample_every=cfg.sample_every, lr=args.lr, param_lr=args.param_lr, temperature=args.temperature,
        neighborhood=args.neighborhood, logit_init_scale=args.logit_init_scale, init_margin=args.init_margin,
        keep_best=args.keep_best, seed=cfg.seed,
    )
    sim = cfg.build(threads=args.threads)
    ref = read_frames(args.reference)
    if ref.n_kernels != len(sim.state):
        raise ShapeMismatch(f"reference has {ref.n_kernels} particles, scene seeds {len(sim.state)}")
    members = torch.as_tensor(np.flatnonzero(np.asarray(learnable)[sim.particles.material]))
    slots = sorted({int(m) for m in sim.particles.material[members.numpy()]})
    start = cfg.concrete_materials()[slots[0]]
    problem = est.Problem.from_simulation(sim, members, tcfg.neighborhood, tcfg.temperature)
    ref_x = torch.as_tensor(ref.centers, dtype=torch.float64)
    logits0 = est.MaterialLogits.init(problem.partition.n_neighborhoods, start.params, tcfg.logit_init_scale,
                                      tcfg.seed, start, tcfg.init_margin)
    initial = est.evaluate(problem, logits0, ref_x[:tcfg.horizon_frames + 1], tcfg.sample_every)
    result = est.train(problem, ref_x, tcfg, logits0)
    final = est.evaluate(problem, result.logits, ref_x[:tcfg.horizon_frames + 1], tcfg.sample_every)
    est.write_materials(args.out, result.logits, problem.partition)
    if args.loss_log:
        est.write_loss_log(args.loss_log, result.log)
    if args.assignment:
        labels = np.full(len(sim.state), -1)
        labels[members.numpy()] = problem.partition.assignment.numpy()
        np.savetxt(args.assignment, labels, fmt="%d")
    _print_json({"command": "estimate", "neighborhoods": problem.partition.n_neighborhoods,
                 "initial_loss": initial, "final_loss": final, "iterations": len(result.log)})
    return 0


def cmd_render(args):
    frames = read_frames(args.frames)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = [splat_preview(frames.centers[i], frames.covariances[i], frames.opacities, args.axis, args.resolution)
              for i in range(len(frames))]
    vmax = max((float(im.max()) for im in images), default=0.0)
    for i, im in enumerate(images):
        write_pgm(out / f"frame_{i:04d}.pgm", im, vmax)
    _print_json({"command": "render", "images": len(images), "output": str(out)})
    return 0


def bench_simulation(particles, threads=1, seed=0):
    """A falling block of ``particles`` randomly placed particles (8 per cell density) over a floor."""
    grid = GridSpec()
    rng = np.random.default_rng(seed)
    volume = (grid.dx / 2) ** 3
    side = min((particles * volume) ** (1 / 3), 0.6)
    lo = np.array([0.5 - side / 2, 0.5 - side / 2, 0.2])
    x = lo + side * rng.random((particles, 3))
    state = init_state(x, 1000.0 * volume, volume, grid)
    mats = MaterialField.from_specs([MaterialSpec()], np.zeros(particles, dtype=np.int64))
    bcs = (BoundaryCondition("ground_plane_sticky", point=(0.0, 0.0, 0.1)),)
    return Simulation(state, mats, grid, StepParams(threads=threads), bcs)


def cmd_bench(args):
    if args.particles < 1 or args.steps < 1:
        raise ValidationError("particles and steps must be positive")
    sim = bench_simulation(args.particles, args.threads)
    t0 = time.perf_counter()
    with torch.no_grad():
        rollout(sim.state, sim.materials, sim.grid, sim.params, sim.bcs, args.steps, args.steps, keep_F=False)
    wall = time.perf_counter() - t0
    rss = _peak_rss_mb()
    print(f"particles       {args.particles}")
    print(f"steps           {args.steps}")
    print(f"threads         {args.threads}")
    print(f"wall time       {wall:.3f} s")
    print(f"step rate       {args.steps / wall:.1f} steps/s")
    print(f"peak RSS        {rss:.1f} MB")
    _print_json({"command": "bench", "particles": args.particles, "steps": args.steps, "threads": args.threads,
                 "wall_time_s": round(wall, 4), "peak_rss_mb": round(rss, 1)})
    return 0


def build_parser():
    default_threads = os.environ.get(THREADS_ENV, "1")
    p = argparse.ArgumentParser(
        prog="mpmzoo", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    threads_help = f"worker threads (default: ${THREADS_ENV} or 1; 1 is bitwise reproducible)"
    p.add_argument("--threads", type=_threads, default=None, help=threads_help)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_threads, default=argparse.SUPPRESS, help=threads_help)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="run a scene and write a frame file")
    s.add_argument("scene")
    s.add_argument("-o", "--out", required=True, help="frame file to write")
    s.add_argument("--steps", type=int, help="number of steps (default: frames x sample_every from the scene)")
    s.add_argument("--summary", help="also write the run summary as JSON here")
    _scene_flags(s)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", parents=[common], help="fit learnable materials to a reference frame file")
    e.add_argument("scene")
    e.add_argument("reference", help="frame file of the reference motion")
    e.add_argument("-o", "--out", required=True, help="material assignment file to write")
    e.add_argument("--loss-log", help="CSV loss log (outer,stage,internal,loss)")
    e.add_argument("--assignment", help="write each particle's neighborhood index (-1: fixed material)")
    e.add_argument("--stages", type=_positive, default=10)
    e.add_argument("--frames-per-stage", type=_positive, default=15)
    e.add_argument("--internal", type=_positive, default=30, help="optimizer steps per stage visit")
    e.add_argument("--outer", type=_positive, default=5)
    e.add_argument("--lr", type=float, default=5e-5, help="learning rate of the category logits")
    e.add_argument("--param-lr", type=float, help="learning rate of log E and the Poisson logit (default: --lr)")
    e.add_argument("--temperature", type=float, default=1.0, help="softmax temperature of the selection gradient")
    e.add_argument("--neighborhood", type=_positive, default=32, help="particles per neighborhood")
    e.add_argument("--logit-init-scale", type=float, default=0.0, help="std of the random initial logits")
    e.add_argument("--init-margin", type=float, default=0.0,
                   help="initial logit lead of the starting guess (fixed_corotated + identity)")
    e.add_argument("--keep-best", action="store_true",
                   help="return the stage-end snapshot with the lowest full-horizon loss")
    _scene_flags(e)
    e.set_defaults(func=cmd_estimate)

    r = sub.add_parser("render", parents=[common], help="write one PGM preview per frame")
    r.add_argument("frames")
    r.add_argument("out_dir")
    r.add_argument("--axis", choices=("x", "y", "z"), default="y", help="viewing axis")
    r.add_argument("--resolution", type=_positive, default=256)
    r.set_defaults(func=cmd_render)

    b = sub.add_parser("bench", parents=[common], help="forward-only throughput and memory")
    b.add_argument("particles", type=int)
    b.add_argument("steps", type=int)
    b.set_defaults(func=cmd_bench)

    p.set_defaults(default_threads=default_threads)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is None:
        try:
            args.threads = _threads(args.default_threads)
        except (ValueError, argparse.ArgumentTypeError):
            parser.error(f"${THREADS_ENV} must be a positive integer")
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except MPMError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
