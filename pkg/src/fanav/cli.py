"""Command-line entry point wiring the whole pipeline.

Subcommands: gen-world, collect, dataset, train, eval, compare, pipeline.
Configuration is layered: built-in desk-scale defaults, then a config file
(``--config``), then generic ``--set section.key=value`` overrides, then
dedicated flags. Every value ends up echoed into the run artifacts, so no
hyperparameter is hidden.

Exit codes: 0 success, 2 usage, 3 configuration/protocol, 4 data format,
5 numeric failure, 6 I/O.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from importlib import resources

from . import __version__
from .configfile import ConfigTree, format_config, load_config, merge_tree, parse_config
from .data import (
    EncoderProfile,
    build_dataset,
    describe_dataset,
    load_dataset,
    save_dataset,
)
from .errors import (
    ConfigError,
    DataFormatError,
    FanavError,
    GenerationError,
    InvalidPoseError,
    NoPathError,
    NumericError,
    ProtocolError,
    ShapeError,
    WorldFormatError,
)
from .evaluation import (
    NetworkPolicy,
    compare,
    evaluate_suite,
    export_trajectories,
    load_eval_result,
    load_suite,
    make_suite,
    save_eval_result,
    save_suite,
)
from .expert import CLEAN, PERTURBED, ExpertConfig, collect, collect_to_ratio
from .sim import EpisodeConfig, RobotSpec, World, load_world, save_world
from .trainers import METHODS, TrainerConfig, train
from .worldgen import generate_world

DEFAULT_CONFIG: ConfigTree = {
    "run": {"seed": 0},
    "robot": {"radius": 0.2, "v_max": 0.5,
              "omega_max": math.pi / 2, "lidar_fov_deg": 270.0,
              "lidar_beams": 108, "lidar_range": 30.0, "control_dt": 0.2},
    "episode": {"gamma": 0.99, "t_max": 200, "r_success": 20.0,
                "r_collision": -20.0, "c1": 2.0, "goal_radius": 0.3},
    "expert": {"lookahead": 0.45, "gain_heading": 3.0, "speed_scale": 0.85,
               "noise_std_v": 0.3, "noise_std_omega": 1.2,
               "noise_prob": 0.4, "plan_inflation": 0.08,
               "min_separation": 3.0,
               "harvest_lookahead": 0.7, "harvest_gain": 2.0,
               "harvest_speed": 1.0, "harvest_noise_std_v": 0.3,
               "harvest_noise_std_omega": 1.0, "harvest_noise_prob": 0.15,
               "harvest_inflation": 0.0},
    "collect": {"min_transitions": 20000, "target_col_ratio": 0.1,
                "ratio_tol": 0.01},
    "trainer": {"method": "iql_ca", "expectile": 0.7, "gamma": 0.99,
                "weight_temp": 1.0, "max_weight": 100.0, "rho": 0.015,
                "batch_size": 256, "lr_value": 3e-4, "lr_critic": 3e-4,
                "lr_policy": 3e-4, "target_alpha": 0.005, "n_critics": 2,
                "total_steps": 30000, "epoch_steps": 1000,
                "eval_every": 10000, "hidden": [128, 128],
                "activation": "relu", "log_std_min": -5.0,
                "log_std_max": 2.0, "log_std_init": -0.5,
                "policy_final_scale": 0.01, "dtype": "float32"},
    "eval": {"n_tasks": 50, "n_trials": 3, "jitter_pos": 0.1,
             "jitter_heading": 0.1, "min_separation": 3.0},
    "pipeline": {"collect_world": "cluttered",
                 "eval_worlds": ["cluttered", "sparse", "dense"],
                 "methods": list(METHODS)},
}

BUNDLED_WORLDS = ("cluttered", "sparse", "dense")


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def _parse_set_overrides(pairs: list[str]) -> ConfigTree:
    tree: ConfigTree = {}
    for pair in pairs or []:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ConfigError(
                f"--set expects section.key=value, got '{pair}'")
        key_path, value = pair.split("=", 1)
        section, key = key_path.split(".", 1)
        sub = parse_config(f"[{section}]\n{key} = {value.strip()}\n",
                           source="--set")
        tree.setdefault(section.strip(), {}).update(sub[section.strip()])
    return tree


def resolve_config(config_path: str | None, set_pairs: list[str] | None,
                   flag_overrides: ConfigTree | None = None) -> ConfigTree:
    tree = {s: dict(kv) for s, kv in DEFAULT_CONFIG.items()}
    file_tree: ConfigTree = {}
    if config_path:
        file_tree = load_config(config_path)
        tree = merge_tree(tree, file_tree)
    tree = merge_tree(tree, _parse_set_overrides(set_pairs or []))
    if flag_overrides:
        tree = merge_tree(tree, flag_overrides)
    tree["_file"] = {"had_run_seed": "seed" in file_tree.get("run", {})}
    return tree


def resolve_seed(args_seed: int | None, tree: ConfigTree) -> int:
    if args_seed is not None:
        return int(args_seed)
    if tree.get("_file", {}).get("had_run_seed"):
        return int(tree["run"]["seed"])
    env = os.environ.get("FANAV_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"FANAV_SEED must be an integer, got '{env}'")
    return int(tree["run"]["seed"])


def _public_tree(tree: ConfigTree) -> ConfigTree:
    return {s: kv for s, kv in tree.items() if not s.startswith("_")}


def robot_spec_from(tree: ConfigTree) -> RobotSpec:
    r = tree["robot"]
    return RobotSpec(radius=float(r["radius"]), v_max=float(r["v_max"]),
                     omega_max=float(r["omega_max"]),
                     lidar_fov=math.radians(float(r["lidar_fov_deg"])),
                     lidar_beam_count=int(r["lidar_beams"]),
                     lidar_range_max=float(r["lidar_range"]),
                     control_dt=float(r["control_dt"]))


def episode_from(tree: ConfigTree) -> EpisodeConfig:
    e = tree["episode"]
    return EpisodeConfig(gamma=float(e["gamma"]), t_max=int(e["t_max"]),
                         r_success=float(e["r_success"]),
                         r_collision=float(e["r_collision"]),
                         c1=float(e["c1"]),
                         goal_radius=float(e["goal_radius"]))


def expert_from(tree: ConfigTree) -> ExpertConfig:
    x = tree["expert"]
    return ExpertConfig(lookahead=float(x["lookahead"]),
                        gain_heading=float(x["gain_heading"]),
                        speed_scale=float(x["speed_scale"]),
                        noise_std=(float(x["noise_std_v"]),
                                   float(x["noise_std_omega"])),
                        noise_prob=float(x["noise_prob"]),
                        plan_inflation=float(x["plan_inflation"]),
                        min_separation=float(x["min_separation"]),
                        harvest_lookahead=float(x["harvest_lookahead"]),
                        harvest_gain=float(x["harvest_gain"]),
                        harvest_speed=float(x["harvest_speed"]),
                        harvest_noise_std=(float(x["harvest_noise_std_v"]),
                                           float(x["harvest_noise_std_omega"])),
                        harvest_noise_prob=float(x["harvest_noise_prob"]),
                        harvest_inflation=float(x["harvest_inflation"]))


def trainer_from(tree: ConfigTree, seed: int,
                 method: str | None = None) -> TrainerConfig:
    t = dict(tree["trainer"])
    if method:
        t["method"] = method
    t["hidden"] = tuple(int(h) for h in t["hidden"])
    t["seed"] = seed
    return TrainerConfig(**t)


# ---------------------------------------------------------------------------
# manifests and world resolution
# ---------------------------------------------------------------------------

def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(target: str, command: str, argv: list[str],
                   tree: ConfigTree, seed: int,
                   inputs: dict[str, str] | None = None,
                   outputs: list[str] | None = None) -> str:
    """Write the run manifest atomically; returns its path.

    ``target`` is an output directory (manifest.json inside it) or an
    output file (sidecar <file>.manifest.json).
    """
    public = _public_tree(tree)
    digest = hashlib.sha256(
        json.dumps(public, sort_keys=True).encode()).hexdigest()
    payload = {
        "tool": "fanav",
        "version": __version__,
        "command": command,
        "argv": argv,
        "seed": seed,
        "config": public,
        "config_digest": digest,
        "inputs": {p: _sha256_file(p) for p in (inputs or {})},
        "outputs": outputs or [],
        "started_unix": time.time(),
    }
    if os.path.isdir(target) or target.endswith(os.sep):
        os.makedirs(target, exist_ok=True)
        path = os.path.join(target, "manifest.json")
    elif os.path.splitext(target)[1]:
        path = target + ".manifest.json"
    else:
        os.makedirs(target, exist_ok=True)
        path = os.path.join(target, "manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def bundled_world_path(name: str):
    return resources.files("fanav").joinpath("worlds", f"{name}.world")


def resolve_world(spec: str) -> World:
    """Load a world by file path, or by bundled name (cluttered/sparse/dense)."""
    if os.path.exists(spec):
        return load_world(spec)
    if spec in BUNDLED_WORLDS:
        ref = bundled_world_path(spec)
        from .sim import parse_world
        return parse_world(ref.read_text(encoding="utf-8"), source=str(ref))
    raise ConfigError(f"world '{spec}' is neither a file nor a bundled name "
                      f"{BUNDLED_WORLDS}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_world(args, argv) -> int:
    tree = resolve_config(args.config, args.set)
    seed = resolve_seed(args.seed, tree)
    world = generate_world(args.width, args.height, args.density, seed,
                           name=args.name,
                           robot_radius=float(tree["robot"]["radius"]))
    save_world(world, args.out)
    write_manifest(args.out, "gen-world", argv, tree, seed,
                   outputs=[args.out])
    print(f"wrote {args.out}: {len(world.obstacles)} obstacles in "
          f"{world.width:g}x{world.height:g} m")
    return 0


def cmd_collect(args, argv) -> int:
    flag_overrides: ConfigTree = {}
    if args.target_col_ratio is not None:
        flag_overrides = {"collect": {"target_col_ratio": args.target_col_ratio}}
    tree = resolve_config(args.config, args.set, flag_overrides)
    seed = resolve_seed(args.seed, tree)
    world = resolve_world(args.world)
    spec = robot_spec_from(tree)
    episode = episode_from(tree)
    expert_cfg = expert_from(tree)
    ccfg = tree["collect"]
    if args.episodes is not None:
        mode = args.mode or CLEAN
        trajs = collect(world, spec, episode, expert_cfg, args.episodes,
                        mode, seed)
    else:
        trajs = collect_to_ratio(world, spec, episode, expert_cfg,
                                 min_transitions=int(ccfg["min_transitions"]),
                                 target_col_ratio=float(ccfg["target_col_ratio"]),
                                 seed=seed,
                                 ratio_tol=float(ccfg["ratio_tol"]))
    profile = EncoderProfile.from_world_spec(world, spec)
    ds = build_dataset(trajs, profile, episode, meta={
        "command": "collect", "seed": seed, "world": world.name,
        "mode": args.mode or "ratio", "version": __version__})
    save_dataset(ds, args.out)
    inputs = {args.world: None} if os.path.exists(args.world) else {}
    write_manifest(args.out, "collect", argv, tree, seed, inputs=inputs,
                   outputs=[args.out])
    print(describe_dataset(ds))
    print(f"wrote {args.out}")
    return 0


def cmd_dataset(args, argv) -> int:
    if args.dataset_cmd == "inspect":
        ds = load_dataset(args.path)
        print(describe_dataset(ds))
        return 0
    raise ConfigError(f"unknown dataset action '{args.dataset_cmd}'")


def cmd_train(args, argv) -> int:
    flag_overrides: ConfigTree = {}
    if args.method:
        flag_overrides = {"trainer": {"method": args.method}}
    tree = resolve_config(args.config, args.set, flag_overrides)
    seed = resolve_seed(args.seed, tree)
    ds = load_dataset(args.dataset)
    cfg = trainer_from(tree, seed)
    os.makedirs(args.out_dir, exist_ok=True)
    write_manifest(args.out_dir, "train", argv, tree, seed,
                   inputs={args.dataset: None})
    with open(os.path.join(args.out_dir, "config.echo"), "w",
              encoding="utf-8") as fh:
        echo = _public_tree(tree)
        echo["trainer"] = {**echo["trainer"], "method": cfg.method,
                           "seed": seed}
        fh.write(format_config(echo))
    result = train(ds, cfg, out_dir=args.out_dir)
    last = result.report.rows[-1]
    print(f"{cfg.method}: {cfg.total_steps} steps in "
          f"{result.report.wall_clock:.1f}s, final losses "
          f"V={last.loss_value:.4f} Q={last.loss_critic:.4f} "
          f"pi={last.loss_policy:.4f}")
    print(f"policy digest {result.report.final_digest[:16]}")
    return 0


def cmd_eval(args, argv) -> int:
    tree = resolve_config(args.config, args.set)
    seed = resolve_seed(args.seed, tree)
    world = resolve_world(args.world)
    spec = robot_spec_from(tree)
    episode = episode_from(tree)
    policy = NetworkPolicy.from_checkpoint(args.checkpoint)
    suite = load_suite(args.suite, world.name, episode)
    ecfg = tree["eval"]
    n_trials = args.trials if args.trials is not None else int(ecfg["n_trials"])
    res = evaluate_suite(policy, world, spec, suite, n_trials=n_trials,
                         seed=seed,
                         jitter=(float(ecfg["jitter_pos"]),
                                 float(ecfg["jitter_heading"])),
                         method=policy.name)
    os.makedirs(args.out_dir, exist_ok=True)
    write_manifest(args.out_dir, "eval", argv, tree, seed,
                   inputs={args.checkpoint: None, args.suite: None})
    save_eval_result(res, os.path.join(args.out_dir, "result.json"))
    export_trajectories(res, suite, world,
                        os.path.join(args.out_dir, "trajectories"))
    print(f"{policy.name} on {world.name}: SR {res.sr:.2f} ± {res.sr_std:.2f}"
          f"  CR {res.cr:.2f} ± {res.cr_std:.2f}"
          f"  TR {res.tr:.2f} ± {res.tr_std:.2f}")
    return 0


def _method_sort_key(method: str):
    return (METHODS.index(method) if method in METHODS else len(METHODS),
            method)


def cmd_compare(args, argv) -> int:
    grouped: dict[str, list] = {}
    for d in args.results:
        path = os.path.join(d, "result.json")
        if not os.path.exists(path):
            raise ConfigError(f"no result.json under '{d}'")
        res = load_eval_result(path)
        grouped.setdefault(res.method, []).append(res)
    ordered = {}
    for method in sorted(grouped, key=_method_sort_key):
        ordered[method] = sorted(grouped[method], key=lambda r: r.world_name)
    rows, csv_text, table = compare(ordered)
    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "comparison.csv"), "w",
              encoding="utf-8") as fh:
        fh.write(csv_text)
    with open(os.path.join(out_dir, "comparison.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def cmd_pipeline(args, argv) -> int:
    tree = resolve_config(args.config, args.set)
    seed = resolve_seed(args.seed, tree)
    out = args.out_dir
    os.makedirs(out, exist_ok=True)
    write_manifest(out, "pipeline", argv, tree, seed,
                   inputs={args.config: None} if args.config else {})

    spec = robot_spec_from(tree)
    episode = episode_from(tree)
    expert_cfg = expert_from(tree)
    pcfg = tree["pipeline"]
    methods = [str(m) for m in pcfg["methods"]]
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method '{m}' in pipeline.methods")

    eval_worlds = [resolve_world(str(w)) for w in pcfg["eval_worlds"]]
    collect_world = resolve_world(str(pcfg["collect_world"]))

    print(f"[1/5] collecting demonstrations in '{collect_world.name}'")
    ccfg = tree["collect"]
    trajs = collect_to_ratio(collect_world, spec, episode, expert_cfg,
                             min_transitions=int(ccfg["min_transitions"]),
                             target_col_ratio=float(ccfg["target_col_ratio"]),
                             seed=seed, ratio_tol=float(ccfg["ratio_tol"]))
    profile = EncoderProfile.from_world_spec(collect_world, spec)
    ds = build_dataset(trajs, profile, episode, meta={
        "command": "pipeline", "seed": seed, "world": collect_world.name,
        "version": __version__})
    ds_path = os.path.join(out, "dataset.fanav")
    save_dataset(ds, ds_path)
    print(describe_dataset(ds))

    print("[2/5] building task suites")
    ecfg = tree["eval"]
    suites = {}
    suite_dir = os.path.join(out, "suites")
    os.makedirs(suite_dir, exist_ok=True)
    for wi, world in enumerate(eval_worlds):
        suite = make_suite(world, spec, episode, int(ecfg["n_tasks"]),
                           seed=seed + wi,
                           min_separation=float(ecfg["min_separation"]))
        save_suite(suite, os.path.join(suite_dir, f"{world.name}.suite"))
        suites[world.name] = suite

    print("[3/5] training " + ", ".join(methods))
    checkpoints = {}
    for method in methods:
        cfg = trainer_from(tree, seed, method=method)
        mdir = os.path.join(out, "train", method)
        os.makedirs(mdir, exist_ok=True)
        with open(os.path.join(mdir, "config.echo"), "w",
                  encoding="utf-8") as fh:
            echo = _public_tree(tree)
            echo["trainer"] = {**echo["trainer"], "method": method,
                               "seed": seed}
            fh.write(format_config(echo))
        result = train(ds, cfg, out_dir=mdir)
        checkpoints[method] = os.path.join(
            mdir, f"ckpt_{cfg.total_steps:08d}.famlp")
        print(f"  {method}: done in {result.report.wall_clock:.1f}s")

    print("[4/5] evaluating on " + ", ".join(w.name for w in eval_worlds))
    results: dict[str, list] = {m: [] for m in methods}
    for method in methods:
        policy = NetworkPolicy.from_checkpoint(checkpoints[method])
        for world in eval_worlds:
            res = evaluate_suite(policy, world, spec, suites[world.name],
                                 n_trials=int(ecfg["n_trials"]), seed=seed,
                                 jitter=(float(ecfg["jitter_pos"]),
                                         float(ecfg["jitter_heading"])),
                                 method=method)
            rdir = os.path.join(out, "eval", method, world.name)
            os.makedirs(rdir, exist_ok=True)
            save_eval_result(res, os.path.join(rdir, "result.json"))
            export_trajectories(res, suites[world.name], world,
                                os.path.join(rdir, "trajectories"))
            results[method].append(res)
            print(f"  {method}/{world.name}: SR {res.sr:.2f} CR {res.cr:.2f} "
                  f"TR {res.tr:.2f}")

    print("[5/5] comparison")
    for m in results:
        results[m].sort(key=lambda r: r.world_name)
    rows, csv_text, table = compare(results)
    cdir = os.path.join(out, "compare")
    os.makedirs(cdir, exist_ok=True)
    with open(os.path.join(cdir, "comparison.csv"), "w",
              encoding="utf-8") as fh:
        fh.write(csv_text)
    with open(os.path.join(cdir, "comparison.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (key-value format)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override any config key; repeatable")
    p.add_argument("--seed", type=int, default=None,
                   help="random seed (overrides config and FANAV_SEED)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fanav",
        description="Failure-aware offline RL for mapless 2-D navigation")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-world", help="generate a procedural world file")
    g.add_argument("--width", type=float, default=10.0)
    g.add_argument("--height", type=float, default=10.0)
    g.add_argument("--density", type=float, required=True,
                   help="obstacle area fraction in [0, 1]")
    g.add_argument("--name", default="generated")
    g.add_argument("--out", required=True, help="output world file")
    _add_common(g)
    g.set_defaults(fn=cmd_gen_world)

    c = sub.add_parser("collect", help="collect demonstrator episodes")
    c.add_argument("--world", required=True,
                   help="world file or bundled name")
    c.add_argument("--episodes", type=int, default=None,
                   help="episode count (omit to target a collision ratio)")
    c.add_argument("--mode", choices=(CLEAN, PERTURBED), default=None)
    c.add_argument("--target-col-ratio", type=float, default=None,
                   help="collision transition fraction to aim for")
    c.add_argument("--out", required=True, help="output dataset path")
    _add_common(c)
    c.set_defaults(fn=cmd_collect)

    d = sub.add_parser("dataset", help="dataset utilities")
    dsub = d.add_subparsers(dest="dataset_cmd", required=True)
    di = dsub.add_parser("inspect", help="print counts and ratio")
    di.add_argument("path")
    d.set_defaults(fn=cmd_dataset)

    t = sub.add_parser("train", help="train one method on a dataset")
    t.add_argument("--method", choices=METHODS, default=None)
    t.add_argument("--dataset", required=True)
    t.add_argument("--out-dir", required=True)
    _add_common(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a task suite")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--world", required=True)
    e.add_argument("--suite", required=True, help="task suite file")
    e.add_argument("--trials", type=int, default=None)
    e.add_argument("--out-dir", required=True)
    _add_common(e)
    e.set_defaults(fn=cmd_eval)

    cp = sub.add_parser("compare", help="aggregate eval results into a table")
    cp.add_argument("--results", nargs="+", required=True,
                    help="eval output directories")
    cp.add_argument("--out-dir", default=".")
    cp.set_defaults(fn=cmd_compare)

    pl = sub.add_parser("pipeline",
                        help="collect, train all methods, evaluate, compare")
    pl.add_argument("--out-dir", required=True)
    _add_common(pl)
    pl.set_defaults(fn=cmd_pipeline)
    return p


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.fn(args, ["fanav"] + list(argv))


_EXIT_CODES = (
    ((ConfigError, WorldFormatError, ProtocolError, InvalidPoseError,
      NoPathError, GenerationError), 3),
    ((DataFormatError, ShapeError), 4),
    ((NumericError,), 5),
    ((OSError,), 6),
)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return dispatch(argv)
    except FanavError as exc:
        for types, code in _EXIT_CODES:
            if isinstance(exc, types):
                print(f"error: {exc}", file=sys.stderr)
                return code
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 6


if __name__ == "__main__":
    sys.exit(main())
