"""Command-line interface: run scenarios, plan channels, replay CSI traces."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace

from . import channel as chan
from . import csi as csimod
from . import harness


def _cmd_run(args) -> int:
    if args.scenario == "paper":
        scenario = harness.paper_scenario(seed=args.seed,
                                          noise_scale=args.noise_scale,
                                          window_size=args.window_size)
    else:
        scenario = harness.load_scenario(args.scenario)
        scenario = replace(scenario, seed=args.seed,
                           noise_scale=args.noise_scale,
                           window_size=args.window_size)
    report = harness.run_scenario(scenario, out_dir=args.out_dir)
    print(json.dumps(asdict(report), sort_keys=True, indent=2))
    return 0


def _cmd_plan_channels(args) -> int:
    try:
        plan = chan.plan_channels(args.tags, args.excitation)
    except chan.CapacityExceededError as e:
        print(str(e), file=sys.stderr)
        return 1
    sys.stdout.write(chan.export_plan(plan))
    return 0


def _cmd_estimate(args) -> int:
    with open(args.trace) as f:
        records = csimod.load_csi_records(f.read())
    for t, tag_id, m in records:
        geom = csimod.geometry_for(m.center_freq_hz)
        try:
            peaks = csimod.estimate_aoa_tof(m, geom)
            est = csimod.direct_path_aoa(peaks, tag_id=tag_id, timestamp=t)
        except csimod.EstimationFailedError as e:
            print(f"{t:.6f} {tag_id} failed: {e}", file=sys.stderr)
            continue
        print(f"{t:.6f} {tag_id} theta={est.theta:.6f} tau={est.tau:.3e}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="aoaslam",
        description="Simulated backscatter-tag localization pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a full scenario")
    p_run.add_argument("--scenario", default="paper",
                       help="'paper' or path to a scenario JSON file")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--out-dir", default="out")
    p_run.add_argument("--noise-scale", type=float, default=1.0)
    p_run.add_argument("--window-size", type=int, default=10)
    p_run.set_defaults(func=_cmd_run)

    p_plan = sub.add_parser("plan-channels", help="print a channel plan")
    p_plan.add_argument("--tags", type=int, required=True)
    p_plan.add_argument("--excitation", type=int, default=165)
    p_plan.set_defaults(func=_cmd_plan_channels)

    p_est = sub.add_parser("estimate", help="replay a CSI trace file")
    p_est.add_argument("trace")
    p_est.set_defaults(func=_cmd_estimate)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
