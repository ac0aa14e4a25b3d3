"""Command-line entry points: train, eval, probe, render, maps-validate."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_run_config
from .env import ScenarioConfig, reset, reset_with_targets
from .evaluation import HeuristicPolicy, NetPolicy, evaluate, probe
from .maps import MapFormatError, build_map_pool, load_map_file, load_scenario, pad_map
from .net import load_checkpoint
from .render import render_episode
from .trainer import ENSEMBLE_MODES, TrainerConfig, make_probe_states, train

logger = logging.getLogger(__name__)


class CliError(SystemExit):
    def __init__(self, message: str):
        print(f"error: {message}", file=sys.stderr)
        super().__init__(2)


def _load_net_and_mode(checkpoint: str):
    """Accepts a run directory (net_final.ckpt + config.json) or a bare .ckpt file."""
    path = Path(checkpoint)
    if path.is_dir():
        ckpt = path / "net_final.ckpt"
        if not ckpt.exists():
            ckpt = path / "ckpt_final" / "net.ckpt"
        if not ckpt.exists():
            raise CliError(f"no net_final.ckpt or ckpt_final/net.ckpt under {path}")
        mode = None
        scfg = None
        cfgfile = path / "config.json"
        if cfgfile.exists():
            blob = json.loads(cfgfile.read_text(encoding="utf-8"))
            mode = blob.get("trainer", {}).get("agent_mode")
            scen = blob.get("scenario")
            if scen:
                scfg = ScenarioConfig(**scen)
        return load_checkpoint(ckpt), mode, scfg
    if not path.exists():
        raise CliError(f"checkpoint {path} not found")
    return load_checkpoint(path), None, None


def _eval_maps(paths: list[str], net) -> list:
    maps = [load_map_file(p) for p in paths]
    out = []
    for mp in maps:
        if mp.m > net.arch.m:
            raise CliError(
                f"map {mp.name!r} is {mp.m}x{mp.m} but the checkpoint expects at most "
                f"{net.arch.m}x{net.arch.m}"
            )
        out.append(pad_map(mp, net.arch.m))
    return out


def cmd_train(args) -> int:
    try:
        spec = load_run_config(args.config)
    except (ConfigError, FileNotFoundError) as err:
        raise CliError(str(err))
    try:
        maps = [load_map_file(p) for p in spec.map_paths]
    except (MapFormatError, FileNotFoundError) as err:
        raise CliError(str(err))
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [spec.trainer.seed]
    out_root = Path(args.out) if args.out else Path("runs") / spec.name
    if args.resume and len(seeds) != 1:
        raise CliError("--resume works with a single seed")
    for seed in seeds:
        tcfg = dataclasses.replace(spec.trainer, seed=seed)
        run_dir = out_root / f"seed_{seed}"
        summary = train(maps, tcfg, spec.scenario, run_dir, resume=args.resume)
        print(f"seed {seed}: {summary['rollouts']} rollouts, {summary['env_steps']} steps -> {run_dir}")
    return 0


def cmd_eval(args) -> int:
    if args.policy == "heuristic":
        if not args.maps:
            raise CliError("eval needs --maps")
        maps = build_map_pool([load_map_file(p) for p in args.maps])
        policy_factory = HeuristicPolicy
        scfg = ScenarioConfig()
    else:
        net, mode, scfg = _load_net_and_mode(args.checkpoint)
        if scfg is None:
            scfg = ScenarioConfig()
        kind = args.policy or ("ensemble" if mode in ENSEMBLE_MODES else "raw")
        maps = _eval_maps(args.maps, net)
        policy_factory = lambda: NetPolicy(net, kind)
    report = evaluate(
        policy_factory, maps, scfg, n_scenarios=args.scenarios, base_seed=args.seed, rotations=args.rotations
    )
    out = Path(args.out) if args.out else Path("eval_out")
    out.mkdir(parents=True, exist_ok=True)
    (out / "records.csv").write_text(report.records_csv(), encoding="utf-8")
    (out / "summary.csv").write_text(report.summary_csv(), encoding="utf-8")
    for metric, (value, spread) in report.aggregates.items():
        print(f"{metric}: {value:.4f} (spread {spread:.4f})")
    return 0


def cmd_probe(args) -> int:
    net, mode, scfg = _load_net_and_mode(args.checkpoint)
    if scfg is None:
        scfg = ScenarioConfig()
    maps = _eval_maps(args.maps, net)
    states = make_probe_states(maps, scfg, args.states, args.seed)
    report = probe(net, states, scfg, ensemble=args.ensemble)
    out = Path(args.out) if args.out else Path("probe_out")
    out.mkdir(parents=True, exist_ok=True)
    (out / "probe.csv").write_text(report.records_csv(), encoding="utf-8")
    print(f"mean_kl_spread: {report.mean_kl_spread:.6g}")
    print(f"mean_value_spread: {report.mean_value_spread:.6g}")
    return 0


def cmd_render(args) -> int:
    scfg = ScenarioConfig()
    if args.policy == "heuristic":
        policy = HeuristicPolicy()
    else:
        net, mode, loaded_scfg = _load_net_and_mode(args.policy)
        if loaded_scfg is not None:
            scfg = loaded_scfg
        policy = NetPolicy(net, "ensemble" if mode in ENSEMBLE_MODES else "raw")
    mp = load_map_file(args.map)
    if args.scenario:
        scen = load_scenario(Path(args.scenario).read_text(encoding="utf-8"))
        state = reset_with_targets(mp, scfg, scen.targets, scen.seed)
    else:
        state = reset(mp, scfg, args.seed)
    render_episode(policy, state, scfg, out=sys.stdout)
    return 0


def cmd_maps_validate(args) -> int:
    status = 0
    for path in args.paths:
        try:
            mp = load_map_file(path)
            print(f"{path}: ok ({mp.m}x{mp.m}, {int(mp.landing.sum())} landing cells)")
        except (MapFormatError, FileNotFoundError) as err:
            print(f"{path}: INVALID ({err})")
            status = 1
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="symrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run per seed from a YAML run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", default="", help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--out", default="")
    p.add_argument("--resume", default=None, help="trainer checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation over generated scenarios")
    p.add_argument("--checkpoint", default="", help="run directory or .ckpt file")
    p.add_argument("--policy", default="", choices=["", "raw", "ensemble", "heuristic"])
    p.add_argument("--maps", nargs="+", required=True)
    p.add_argument("--scenarios", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rotations", action="store_true", help="run each scenario under all four rotations")
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="per-rotation distributions and value spreads")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--maps", nargs="+", required=True)
    p.add_argument("--states", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ensemble", action="store_true", help="probe the ensemble wrapper instead of the raw net")
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("render", help="ASCII playback of one episode")
    p.add_argument("--policy", required=True, help="'heuristic' or a checkpoint path")
    p.add_argument("--map", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenario", default="", help="CPPSCEN v1 file with explicit targets")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("maps-validate", help="validate CPPMAP v1 files")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_maps_validate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
