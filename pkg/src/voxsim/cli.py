"""Command-line entry point for the full workflow.

Subcommands compose into the whole pipeline: gen-data makes episode
datasets, train fits each learned component, eval scores forecasts,
plan runs the MPC benchmark, render draws model rollouts, and
counterfactual edits a scene before rolling it out.  Every command
echoes its effective configuration into the output directory, and exit
codes distinguish usage (1), data (2), and numeric (3) failures.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from voxsim import config as C
from voxsim import dynamics as dyn
from voxsim import geometry as geo
from voxsim import planner as pl
from voxsim import tensor as T
from voxsim import training as tr
from voxsim.errors import (ConfigError, DataError, NumericError, ShapeError,
                           UntrainedModelError)
from voxsim.imageio import write_image
from voxsim.lift import LiftEncoder
from voxsim.renderer import RenderHead, render_view
from voxsim.sim.episodes import (load_episodes, read_manifest, save_episodes,
                                 write_manifest)
from voxsim.sim.generate import generate_episode

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse that signals usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    parser = _Parser(prog="voxsim", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="cmd", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append",
                       default=[], metavar="KEY=VALUE",
                       help="override a config key (dotted path)")

    p = sub.add_parser("gen-data", help="generate an episode dataset")
    common(p)
    p.add_argument("--mode", choices=("push", "fall"))
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one learned component")
    common(p)
    p.add_argument("--target", choices=("dynamics", "detector", "renderer"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=("ours", "xyz"))
    p.add_argument("--checkpoint-lift",
                   help="checkpoint supplying frozen lift weights")

    p = sub.add_parser("eval", help="forecast error report")
    common(p)
    p.add_argument("--checkpoint", required=True, nargs="+",
                   help="dynamics checkpoints (one per model variant)")
    p.add_argument("--data", required=True)
    p.add_argument("--horizons", default="1,3,5")
    p.add_argument("--out")

    p = sub.add_parser("plan", help="MPC pushing benchmark")
    common(p)
    p.add_argument("--task", choices=("push", "obstacle"))
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--backend", choices=("learned", "oracle"))
    p.add_argument("--checkpoint", help="dynamics checkpoint (with lift)")
    p.add_argument("--checkpoint-det", help="detector checkpoint")
    p.add_argument("--out")

    p = sub.add_parser("render", help="render a model rollout")
    common(p)
    p.add_argument("--checkpoint-dyn", required=True)
    p.add_argument("--checkpoint-render", required=True)
    p.add_argument("--episode", required=True, help="episode file")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--views", default="0")
    p.add_argument("--steps", type=int)
    p.add_argument("--format", choices=("ppm", "png"), default="ppm")
    p.add_argument("--out", required=True)

    p = sub.add_parser("counterfactual", help="edit a scene, then roll out")
    common(p)
    p.add_argument("--scenario", required=True)
    p.add_argument("--checkpoint-dyn", required=True)
    p.add_argument("--checkpoint-render")
    p.add_argument("--format", choices=("ppm", "png"), default="ppm")
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------
# shared plumbing

def _load_cfg(args):
    cfg = C.load_config(args.config) if args.config else C.default_config()
    return C.apply_overrides(cfg, args.overrides)


def _ensure_out(path):
    os.makedirs(path, exist_ok=True)
    return path


def _store_from(values, prefixes=None, dtype=np.float32):
    """Checkpoint arrays -> ParamStore, optionally filtered by prefix."""
    store = T.ParamStore(dtype=dtype)
    for name, arr in values.items():
        if prefixes is None or name.split(".")[0] in prefixes:
            store.add(name, arr)
    return store


def _load_ckpt(path):
    if not os.path.exists(path):
        raise DataError(f"missing checkpoint: {path}")
    params, _ = T.load_checkpoint(path)
    return params


def _load_dataset_dir(path):
    manifest = read_manifest(os.path.join(path, "manifest.json"))
    episodes = []
    for name in manifest["files"]:
        episodes.extend(load_episodes(os.path.join(path, name)))
    if not episodes:
        raise DataError(f"{path}: manifest lists no episodes")
    return manifest, episodes


def _parse_int_list(text, what):
    try:
        return [int(x) for x in str(text).split(",") if x.strip() != ""]
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated integers: {text!r}")


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args):
    cfg = _load_cfg(args)
    d = cfg.data
    if args.mode:
        d.mode = args.mode
    if args.episodes is not None:
        d.episodes = int(args.episodes)
    if args.seed is not None:
        d.seed = int(args.seed)
    if args.split:
        d.split = args.split
    if d.episodes < 1:
        raise ConfigError("need at least one episode")
    out = _ensure_out(args.out)
    files = []
    for i in range(d.episodes):
        ep = generate_episode(d.seed + i, split=d.split, protocol=d.mode,
                              n_views=d.views)
        name = f"episode_{i:05d}.bin"
        save_episodes(os.path.join(out, name), [ep])
        files.append(name)
    grid = C.grid_spec(cfg)
    write_manifest(os.path.join(out, "manifest.json"), {
        "mode": d.mode,
        "split": d.split,
        "episodes": d.episodes,
        "seed": d.seed,
        "views": d.views,
        "files": files,
        "grid": {"dims": list(grid.dims), "voxel": grid.voxel,
                 "origin": list(grid.origin)},
    })
    C.save_config(cfg, os.path.join(out, "config.json"))
    print(f"wrote {d.episodes} episodes to {out}")
    return EXIT_OK


def _lift_store(args, seed):
    """Frozen lift weights: from --checkpoint-lift, else seeded random."""
    ckpt = getattr(args, "checkpoint_lift", None)
    if ckpt:
        store = _store_from(_load_ckpt(ckpt), prefixes={"lift"})
        LiftEncoder(store)  # validates completeness
        return store
    store = T.ParamStore()
    LiftEncoder(store, rng=np.random.default_rng(seed))
    return store


def cmd_train(args):
    cfg = _load_cfg(args)
    t = cfg.train
    if args.target:
        t.target = args.target
    if args.steps is not None:
        t.steps = int(args.steps)
    if args.seed is not None:
        t.seed = int(args.seed)
    if args.variant:
        t.variant = args.variant
    _, episodes = _load_dataset_dir(args.data)
    out = _ensure_out(args.out)
    spec = C.grid_spec(cfg)
    tcfg = C.train_config(cfg)

    if t.target == "renderer":
        dataset = tr.build_render_dataset(episodes, spec)
        params, metrics = tr.train_renderer(tcfg, dataset)
        values = params.state_dict()
    elif t.target == "detector":
        lift = _lift_store(args, t.seed)
        dataset = tr.build_detector_dataset(episodes, spec, lift)
        params, metrics = tr.train_detector(tcfg, dataset)
        values = {**lift.state_dict(), **params.state_dict()}
    elif t.target == "dynamics":
        lift = _lift_store(args, t.seed)
        dataset = tr.build_motion_dataset(episodes, spec, lift_params=lift)
        params, metrics = tr.train_dynamics(tcfg, dataset, variant=t.variant,
                                            rounds=t.rounds)
        values = {**lift.state_dict(), **params.state_dict()}
    else:
        raise ConfigError(f"unknown training target: {t.target!r}")

    T.save_checkpoint(os.path.join(out, "checkpoint.bin"), values)
    tr.write_loss_curve(os.path.join(out, "loss_curve.csv"),
                        metrics["loss_curve"])
    C.save_config(cfg, os.path.join(out, "config.json"))
    final = metrics["loss_curve"][-1] if metrics["loss_curve"] else float("nan")
    print(f"trained {t.target} for {t.steps} steps, final loss {final:.6f}")
    print(f"checkpoint: {os.path.join(out, 'checkpoint.bin')}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_cfg(args)
    spec = C.grid_spec(cfg)
    horizons = _parse_int_list(args.horizons, "--horizons")
    if not horizons or min(horizons) < 1:
        raise ConfigError("--horizons needs positive integers")
    _, episodes = _load_dataset_dir(args.data)
    results = {}
    for path in args.checkpoint:
        values = _load_ckpt(path)
        model = tr.motion_model_from(values)
        lift = (_store_from(values, prefixes={"lift"})
                if model.variant == "ours" else None)
        dataset = tr.build_motion_dataset(episodes, spec, lift_params=lift)
        label = "ours" if model.variant == "ours" else "graph-xyz"
        while label in results:
            label += "+"
        results[label] = tr.eval_forecast(model, dataset, horizons=horizons)
    table, cells = tr.forecast_report(results, horizons)
    print(table, end="")
    if args.out:
        out = _ensure_out(args.out)
        with open(os.path.join(out, "report.txt"), "w") as fh:
            fh.write(table)
        with open(os.path.join(out, "cells.txt"), "w") as fh:
            fh.write(cells)
        C.save_config(cfg, os.path.join(out, "config.json"))
    return EXIT_OK


def cmd_plan(args):
    cfg = _load_cfg(args)
    p = cfg.planner
    task = args.task or "push"
    if args.episodes is not None:
        p.episodes = int(args.episodes)
    if args.seed is not None:
        p.seed = int(args.seed)
    backend = args.backend or p.backend
    pcfg = C.planner_config(cfg)
    spec = C.grid_spec(cfg)

    if backend == "oracle":
        factory = pl.OracleScene
    elif backend == "learned":
        if not args.checkpoint:
            raise ConfigError("the learned backend needs --checkpoint")
        values = _load_ckpt(args.checkpoint)
        model = tr.motion_model_from(values)
        lift = _store_from(values, prefixes={"lift"})
        LiftEncoder(lift)
        det_values = (_load_ckpt(args.checkpoint_det)
                      if args.checkpoint_det else values)
        if "det.obj.k" not in det_values:
            raise DataError("no detector weights found; pass --checkpoint-det")
        det = _store_from(det_values, prefixes={"det"})

        def factory():
            return pl.LearnedScene(model, lift, det, spec)
    else:
        raise ConfigError(f"unknown planner backend: {backend!r}")

    report = pl.run_benchmark(pcfg, p.episodes, p.seed, factory, task=task)
    text = pl.benchmark_report(report)
    print(text, end="")
    if args.out:
        out = _ensure_out(args.out)
        with open(os.path.join(out, "benchmark.txt"), "w") as fh:
            fh.write(text)
        C.save_config(cfg, os.path.join(out, "config.json"))
    return EXIT_OK


def _load_episode_file(path, index):
    if not os.path.exists(path):
        raise DataError(f"missing episode file: {path}")
    episodes = load_episodes(path)
    if not 0 <= index < len(episodes):
        raise DataError(f"{path}: episode index {index} out of range")
    return episodes[index]


def _rollout_states(model, window, ep, steps):
    n = ep.n_steps if steps is None else int(steps)
    if n < 0 or n > ep.n_steps:
        raise DataError(f"episode has {ep.n_steps} steps, asked for {n}")
    if n == 0:
        return [dyn.init_state(model, window)]
    states, _ = dyn.unroll(model, window, ep.actions[:n])
    return states


def _render_frames(out, states, window, background, ep, views, spec, head,
                   ext):
    for v in views:
        if not 0 <= v < ep.n_views:
            raise DataError(f"episode has {ep.n_views} views, asked for {v}")
    for s_idx, state in enumerate(states):
        scene = dyn.synthesize_scene(window, state, spec,
                                     background=background)
        for v in views:
            rgb = render_view(scene.data, ep.cam_rot[s_idx, v], spec, head)
            image = np.transpose(rgb.data, (1, 2, 0))
            name = f"render_{s_idx:04d}_{v}.{ext}"
            write_image(os.path.join(out, name), image)


def cmd_render(args):
    cfg = _load_cfg(args)
    spec = C.grid_spec(cfg)
    ep = _load_episode_file(args.episode, args.index)
    views = _parse_int_list(args.views, "--views")
    dyn_values = _load_ckpt(args.checkpoint_dyn)
    model = tr.motion_model_from(dyn_values)
    render_values = _load_ckpt(args.checkpoint_render)
    lift = _store_from(render_values, prefixes={"lift"})
    LiftEncoder(lift)
    head = RenderHead(_store_from(render_values, prefixes={"render"}))
    window, background, _ = tr.scene_window(ep, 0, lift, spec)
    states = _rollout_states(model, window, ep, args.steps)
    out = _ensure_out(args.out)
    _render_frames(out, states, window, background, ep, views, spec, head,
                   args.format)
    tr.dump_trajectory(states, os.path.join(out, "trajectory.txt"))
    C.save_config(cfg, os.path.join(out, "config.json"))
    print(f"wrote {len(states)} frames x {len(views)} views to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# counterfactual scenarios

def parse_scenario(path):
    """Line-oriented scenario file -> plain dict.

    Directives: "episode PATH [INDEX]", "steps N", "views V V ...",
    "edit OBJ translate DX DY DZ", "edit OBJ rotate AX AY AZ DEG",
    "edit OBJ scale S".  Blank lines and #-comments are skipped; any
    violation is reported with its line number.
    """
    if not os.path.exists(path):
        raise DataError(f"missing scenario file: {path}")
    scenario = {"episode": None, "index": 0, "steps": None, "views": [0],
                "edits": []}

    def fail(ln, msg):
        raise DataError(f"{path}:{ln}: {msg}")

    def numbers(ln, parts, n, what):
        if len(parts) != n:
            fail(ln, f"{what} needs {n} numbers, got {len(parts)}")
        try:
            return [float(x) for x in parts]
        except ValueError:
            fail(ln, f"{what} needs numbers, got {parts!r}")

    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            head, rest = parts[0], parts[1:]
            if head == "episode":
                if len(rest) not in (1, 2):
                    fail(ln, "episode needs a path and optional index")
                scenario["episode"] = rest[0]
                if len(rest) == 2:
                    try:
                        scenario["index"] = int(rest[1])
                    except ValueError:
                        fail(ln, f"episode index must be an integer: {rest[1]!r}")
            elif head == "steps":
                v = numbers(ln, rest, 1, "steps")[0]
                if v != int(v) or v < 0:
                    fail(ln, "steps must be a nonnegative integer")
                scenario["steps"] = int(v)
            elif head == "views":
                if not rest:
                    fail(ln, "views needs at least one index")
                try:
                    scenario["views"] = [int(x) for x in rest]
                except ValueError:
                    fail(ln, f"views must be integers: {rest!r}")
            elif head == "edit":
                if len(rest) < 2:
                    fail(ln, "edit needs an object index and an operation")
                try:
                    obj = int(rest[0])
                except ValueError:
                    fail(ln, f"object index must be an integer: {rest[0]!r}")
                op, args = rest[1], rest[2:]
                if op == "translate":
                    vals = numbers(ln, args, 3, "translate")
                    scenario["edits"].append((obj, "translate", vals))
                elif op == "rotate":
                    vals = numbers(ln, args, 4, "rotate")
                    if np.linalg.norm(vals[:3]) == 0.0:
                        fail(ln, "rotation axis cannot be zero")
                    scenario["edits"].append((obj, "rotate", vals))
                elif op == "scale":
                    vals = numbers(ln, args, 1, "scale")
                    if vals[0] <= 0:
                        fail(ln, "scale must be positive")
                    scenario["edits"].append((obj, "scale", vals[0]))
                else:
                    fail(ln, f"unknown edit operation: {op!r}")
            else:
                fail(ln, f"unknown directive: {head!r}")
    if scenario["episode"] is None:
        raise DataError(f"{path}: no episode directive")
    return scenario


def apply_edits(window, edits):
    for obj, op, vals in edits:
        if op == "translate":
            window = dyn.edit_object(window, obj, translation=vals)
        elif op == "rotate":
            axis = np.asarray(vals[:3], dtype=np.float64)
            quat = geo.quat_from_axis_angle(axis / np.linalg.norm(axis),
                                            np.deg2rad(vals[3]))
            window = dyn.edit_object(window, obj, rotation=quat)
        else:
            window = dyn.edit_object(window, obj, scale=vals)
    return window


def cmd_counterfactual(args):
    cfg = _load_cfg(args)
    spec = C.grid_spec(cfg)
    scenario = parse_scenario(args.scenario)
    ep_path = scenario["episode"]
    if not os.path.isabs(ep_path):
        ep_path = os.path.join(os.path.dirname(os.path.abspath(args.scenario)),
                               ep_path)
    ep = _load_episode_file(ep_path, scenario["index"])
    dyn_values = _load_ckpt(args.checkpoint_dyn)
    model = tr.motion_model_from(dyn_values)
    lift = _store_from(dyn_values, prefixes={"lift"})
    LiftEncoder(lift)
    window, background, _ = tr.scene_window(ep, 0, lift, spec)
    window = apply_edits(window, scenario["edits"])
    states = _rollout_states(model, window, ep, scenario["steps"])
    out = _ensure_out(args.out)
    if args.checkpoint_render:
        render_values = _load_ckpt(args.checkpoint_render)
        head = RenderHead(_store_from(render_values, prefixes={"render"}))
        _render_frames(out, states, window, background, ep,
                       scenario["views"], spec, head, args.format)
    tr.dump_trajectory(states, os.path.join(out, "trajectory.txt"))
    C.save_config(cfg, os.path.join(out, "config.json"))
    print(f"counterfactual rollout: {len(scenario['edits'])} edits, "
          f"{len(states) - 1} steps, results in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "plan": cmd_plan,
    "render": cmd_render,
    "counterfactual": cmd_counterfactual,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.cmd is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.cmd](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, UntrainedModelError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
