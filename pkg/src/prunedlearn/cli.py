"""Command-line front end: ``prunedlearn <subcommand> [options]``.

Every run writes its outputs as ``<command>-<UTC stamp>-<config hash>.*``
into ``--out-dir`` together with a JSON manifest holding the resolved
configuration and a SHA-256 hash of every file. ``prunedlearn rerun
MANIFEST`` repeats a run from its manifest and checks that the outputs come
out byte-identical.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from typing import Dict, List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import DEFAULTS, ConfigError, parse_config
from .experiments import make_spec, run_grid
from .manifest import (
    OutputWriter,
    RunManifest,
    check_inputs,
    config_hash,
    input_record,
    utc_stamp,
    verify_outputs,
)
from .model import OracleNetwork, generate_oracle, sample_dataset, sigma_for_noise_level
from .risk import PROBE_CSV_HEADER, hessian_probe
from .trainer import TrainConfig, agd_train, random_ball_init

EXPERIMENT_OF = {
    "phase-radius": "radius_phase_diagram",
    "rate-sweep": "rate_sweep",
    "noise-sweep": "noise_sweep",
    "grasp-sweep": "inaccurate_mask_sweep",
    "imp-sweep": "imp_sweep",
}

HELP = {
    "gen-oracle": "draw a pruned oracle network (JSON) and its mask (CSV)",
    "train": "train the learner with masked AGD and write the iteration trace",
    "probe-hessian": "extreme Hessian eigenvalues at random points near W*",
    "phase-radius": "success rate over r_tilde x initial distance",
    "rate-sweep": "convergence rate over r_tilde x momentum",
    "sample-complexity": "success rate over r_tilde x N (or architecture x N)",
    "noise-sweep": "final relative error over r_tilde x noise level",
    "grasp-sweep": "GraSP masks: test error by pruning ratio and mask accuracy",
    "imp-sweep": "iterative magnitude pruning: test error by N and pruning ratio",
}


def _seeds(seed: int, n: int) -> List[np.random.SeedSequence]:
    return np.random.SeedSequence(int(seed)).spawn(n)


def _oracle_from_config(cfg: Dict, seed, inputs: List[Dict]) -> OracleNetwork:
    if cfg.get("oracle"):
        with open(cfg["oracle"], encoding="utf-8") as fh:
            oracle = OracleNetwork.from_json_dict(json.load(fh))
        inputs.append(input_record(cfg["oracle"]))
        return oracle
    oracle_seed, ref_seed = np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key).spawn(2)
    oracle = generate_oracle(cfg["d"], cfg["K"], [cfg["r"]] * cfg["K"], cfg["overlap_mode"],
                             seed=oracle_seed, weight_scale=cfg.get("weight_scale", 0.5))
    if cfg["noise_level"] > 0:
        ref = sample_dataset(oracle, 20_000, ref_seed)
        oracle = oracle.with_noise(sigma_for_noise_level(oracle, cfg["noise_level"], ref))
    return oracle


# --------------------------------------------------------------------------
# Command bodies: each writes through ``out`` and returns a summary dict.


def cmd_gen_oracle(cfg: Dict, out: OutputWriter, threads: int) -> Dict:
    oracle = _oracle_from_config(cfg, np.random.SeedSequence(cfg["seed"]), out.manifest.inputs)
    out.write("oracle.json", json.dumps(oracle.to_json_dict(), sort_keys=True) + "\n")
    out.write("mask.csv", oracle.mask.to_csv())
    return {"d": oracle.d, "K": oracle.K, "noise_sigma": oracle.noise_sigma, "n_params": oracle.mask.n_params}


def cmd_train(cfg: Dict, out: OutputWriter, threads: int) -> Dict:
    s_oracle, s_data, s_init = _seeds(cfg["seed"], 3)
    oracle = _oracle_from_config(cfg, s_oracle, out.manifest.inputs)
    data = sample_dataset(oracle, cfg["N"], s_data)
    W0 = random_ball_init(oracle, cfg["lam"], oracle.mask, s_init)
    config = TrainConfig(cfg["eta"], cfg["beta"], cfg["max_iters"], cfg["rel_change_tol"],
                         cfg["partition_mode"], cfg["n_subsets"], cfg["seed"])
    trace = agd_train(data, oracle.mask, W0, config, oracle)
    out.write("trace.csv", trace.to_csv())
    err = trace.final_rel_error
    return {"reason": trace.reason, "iterations": trace.n_iterations, "final_rel_error": err,
            "success": bool(err < cfg["success_tol"])}


def cmd_probe_hessian(cfg: Dict, out: OutputWriter, threads: int) -> Dict:
    seeds = _seeds(cfg["seed"], 2 + cfg["n_probes"])
    oracle = _oracle_from_config(cfg, seeds[0], out.manifest.inputs)
    data = sample_dataset(oracle, cfg["N"], seeds[1])
    rows = [",".join(PROBE_CSV_HEADER)]
    positive = 0
    for i in range(cfg["n_probes"]):
        W = random_ball_init(oracle, cfg["probe_distance"], oracle.mask, seeds[2 + i])
        probe = hessian_probe(W, data, oracle.weights, cfg["method"], cfg["max_params"], seed=i)
        positive += probe.lambda_min > 0
        rows.append(",".join(str(v) for v in probe.csv_row()))
    out.write("probes.csv", "\n".join(rows) + "\n")
    return {"n_probes": cfg["n_probes"], "fraction_positive": positive / cfg["n_probes"]}


def cmd_grid(command: str):
    def body(cfg: Dict, out: OutputWriter, threads: int) -> Dict:
        name = EXPERIMENT_OF.get(command)
        if command == "sample-complexity":
            name = "sample_complexity_fixed_r" if cfg["mode"] == "fixed_r" else "sample_complexity_diagram"
        spec = make_spec(name, cfg)
        result = run_grid(spec, threads=threads)
        out.write("trials.csv", result.trials_csv())
        out.write("cells.csv", result.cells_csv())
        return {"experiment": name, "grid_hash": spec.spec_hash(), "fits": result.summary}
    return body


COMMANDS = {
    "gen-oracle": cmd_gen_oracle,
    "train": cmd_train,
    "probe-hessian": cmd_probe_hessian,
    **{c: cmd_grid(c) for c in ("phase-radius", "rate-sweep", "sample-complexity", "noise-sweep",
                                "grasp-sweep", "imp-sweep")},
}


def execute(command: str, cfg: Dict, out_dir: str, threads: int = 1, stamp: Optional[str] = None) -> RunManifest:
    """Run ``command`` with a resolved config; returns the written manifest."""
    manifest = RunManifest(command, cfg, int(cfg.get("seed", 0)), stamp or utc_stamp(),
                           config_hash(command, cfg), threads=threads)
    out = OutputWriter(out_dir, manifest)
    start = time.perf_counter()
    with threadpool_limits(1):
        manifest.summary = _clean(COMMANDS[command](cfg, out, threads))
    manifest.runtime_seconds = round(time.perf_counter() - start, 3)
    out.finish()
    return manifest


def rerun(manifest_path: str, out_dir: str, threads: int = 1) -> List[str]:
    """Repeat a recorded run into ``out_dir``; returns mismatching output names."""
    old = RunManifest.load(manifest_path)
    problem = check_inputs(old)
    if problem:
        raise ValueError(problem)
    cfg = parse_config(old.command, overrides=old.config)
    if os.path.abspath(out_dir) == os.path.abspath(os.path.dirname(manifest_path) or "."):
        raise ValueError("rerun into a different directory than the original outputs")
    execute(old.command, cfg, out_dir, threads, stamp=old.stamp)
    return verify_outputs(old, out_dir)


def _clean(value):
    """JSON-friendly copy: tuples to lists, non-finite floats to None."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (np.floating, float)):
        return float(value) if math.isfinite(value) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


# --------------------------------------------------------------------------
# Argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value (sections allowed) or JSON config file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--threads", type=int, default=1, help="worker processes for grid experiments")
    p.add_argument("--out-dir", default="runs", help="output directory (default: runs)")
    p.add_argument("--paper-scale", action="store_true", help="use the full reference grid sizes")
    p.add_argument("--trials", type=int, help="trials per grid cell")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prunedlearn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, keys in DEFAULTS.items():
        p = sub.add_parser(command, help=HELP[command])
        _add_common(p)
        group = p.add_argument_group("parameter overrides")
        for key in keys:
            if key in ("seed", "trials"):
                continue
            flag = "--" + key.replace("_", "-")
            group.add_argument(flag, dest=f"param_{key}", metavar=key.upper() if len(key) > 1 else key,
                               help=f"default: {_show(keys[key])}")
    p = sub.add_parser("rerun", help="repeat a run from its manifest and verify the outputs")
    p.add_argument("manifest")
    p.add_argument("--out-dir", default=None, help="where to write (default: <manifest dir>/rerun)")
    p.add_argument("--threads", type=int, default=1)
    return parser


def _show(value) -> str:
    return ",".join(str(v) for v in value) if isinstance(value, tuple) else str(value)


def _overrides(args: argparse.Namespace) -> Dict:
    out: Dict = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for name, value in vars(args).items():
        if name.startswith("param_") and value is not None:
            out[name[len("param_"):]] = value
    if args.seed is not None:
        out["seed"] = args.seed
    if args.trials is not None:
        out["trials"] = args.trials
    return out


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "rerun":
            out_dir = args.out_dir or os.path.join(os.path.dirname(args.manifest) or ".", "rerun")
            bad = rerun(args.manifest, out_dir, args.threads)
            if bad:
                print("outputs differ from the manifest: " + ", ".join(bad), file=sys.stderr)
                return 3
            print(f"reproduced all outputs in {out_dir}")
            return 0
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        overrides = _overrides(args)
        if "trials" in overrides and "trials" not in DEFAULTS[args.command]:
            raise ConfigError(f"--trials does not apply to {args.command}")
        cfg = parse_config(args.command, args.config, overrides, args.paper_scale)
        manifest = execute(args.command, cfg, args.out_dir, args.threads)
    except (ConfigError, ValueError, OSError) as err:
        print(f"prunedlearn {args.command}: error: {err}", file=sys.stderr)
        return 2
    print(os.path.join(args.out_dir, manifest.prefix + ".manifest.json"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
