"""Command-line entry point: one subcommand per analysis."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .cost_model import CostInputs, bypass_overhead, tera_string, total_flops
from .harness import ScenarioSpec, generate_scenario, run_experiment, save_offset_vectors
from .io import (
    load_model,
    read_json,
    read_profile_csv,
    save_model,
    save_tensor,
    write_json,
    write_matrix_csv,
    write_profile_csv,
)
from .layer_select import normalize_profiles, optimal_pruning_layers, profile_selection_capability
from .metrics import cross_layer_overlap_matrix, group_offset_report
from .model import ModelConfig, forward_full, init_model
from .pruning import PruneSchedule, run_with_schedule


def _scenario(path, model_path=None):
    spec = ScenarioSpec.from_dict(read_json(path))
    scen = generate_scenario(spec)
    if model_path:
        scen._weights = load_model(model_path)
    return scen


def cmd_gen_model(args):
    cfg = ModelConfig.from_dict(read_json(args.config))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(init_model(cfg, args.seed), out)
    print(json.dumps({"model": str(out), "config": str(out.with_suffix(".json"))}))
    return 0


def cmd_gen_scenario(args):
    raw = read_json(args.spec)
    if args.seed is not None:
        raw["embed_seed"] = args.seed
    scen = generate_scenario(ScenarioSpec.from_dict(raw))
    out = Path(args.out)
    write_json(out / f"{scen.id}.json", scen.spec.to_dict())
    save_tensor(scen.sequence.embeddings, out / f"{scen.id}.embeddings.tflx")
    write_json(out / f"{scen.id}.meta.json", {
        "roles": scen.sequence.roles, "positions": scen.sequence.positions,
        "signal_positions": scen.signal_positions,
    })
    return 0


def cmd_run(args):
    summary = run_experiment(read_json(args.config), args.out)
    print(json.dumps({"output_dir": summary["output_dir"], "ok": summary["ok"],
                      "failures": len(summary["failures"])}))
    return 0 if summary["ok"] else 1


def cmd_profile_layers(args):
    profiles = []
    for path in args.scenario:
        scen = _scenario(path, args.model)
        profiles.append(profile_selection_capability(scen.sequence, scen.weights, args.retain))
    profile = profiles[0] if len(profiles) == 1 else normalize_profiles(profiles)
    out = Path(args.out)
    write_profile_csv(out / "profile.csv", profile)
    write_json(out / "profile.meta.json", {"retain": args.retain, "scenarios": args.scenario,
                                           "normalization": "min-max" if len(profiles) > 1 else None})
    return 0


def cmd_select_layers(args):
    res = optimal_pruning_layers(read_profile_csv(args.profile), args.budget)
    payload = res.to_dict()
    if args.out:
        write_json(Path(args.out) / "selection.json", payload)
    print(json.dumps(payload))
    return 0


def cmd_flops(args):
    inputs = CostInputs.from_dict(read_json(args.inputs))
    flops = total_flops(inputs)
    payload = {"flops": flops, "tera": tera_string(flops), "n_hat": inputs.n_hat}
    if inputs.R:
        payload["bypass_overhead"] = bypass_overhead(inputs)
    if args.out:
        write_json(Path(args.out) / "flops.json", payload)
    print(json.dumps(payload))
    return 0


def cmd_overlap(args):
    scen = _scenario(args.scenario, args.model)
    _, trace = forward_full(scen.sequence, scen.weights)
    res = cross_layer_overlap_matrix(trace, args.bottom_frac, args.top_frac)
    out = Path(args.out)
    write_matrix_csv(out / "overlap.csv", res["early_layers"], res["late_layers"], res["matrix"])
    write_json(out / "overlap.json", {**res, "matrix": np.asarray(res["matrix"]).tolist(),
                                      "mean": float(np.mean(res["matrix"]))})
    return 0


def cmd_offsets(args):
    scen = _scenario(args.scenario, args.model)
    schedule = PruneSchedule.from_dict(read_json(args.schedule))
    _, trace = forward_full(scen.sequence, scen.weights)
    run = run_with_schedule(scen.sequence, scen.weights, schedule)
    rep = group_offset_report(run, trace)
    out = Path(args.out)
    write_json(out / "offsets.json", rep.to_dict())
    save_offset_vectors(rep, out / "offsets.tflx")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tokenflux", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-model", help="initialize a seeded model and write it as TFLX")
    s.add_argument("--config", required=True, help="model config JSON")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output .tflx path (a .json mirror is written beside it)")
    s.set_defaults(func=cmd_gen_model)

    s = sub.add_parser("gen-scenario", help="materialize a scenario spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--seed", type=int, default=None, help="override embed_seed")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_scenario)

    s = sub.add_parser("run", help="run an experiment config or manifest")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("profile-layers", help="per-layer selection-capability profile")
    s.add_argument("--scenario", required=True, nargs="+")
    s.add_argument("--model", default=None, help="TFLX model; default: seeded from the scenario")
    s.add_argument("--retain", type=float, default=0.2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_profile_layers)

    s = sub.add_parser("select-layers", help="choose pruning layers from a profile CSV")
    s.add_argument("--profile", required=True)
    s.add_argument("--budget", type=int, required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_select_layers)

    s = sub.add_parser("flops", help="analytical FLOPs for cost inputs JSON")
    s.add_argument("--inputs", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("overlap", help="cross-layer bottom/top overlap matrix")
    s.add_argument("--scenario", required=True)
    s.add_argument("--model", default=None)
    s.add_argument("--bottom-frac", type=float, default=0.5)
    s.add_argument("--top-frac", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_overlap)

    s = sub.add_parser("offsets", help="bypass group-offset report")
    s.add_argument("--scenario", required=True)
    s.add_argument("--schedule", required=True)
    s.add_argument("--model", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_offsets)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
