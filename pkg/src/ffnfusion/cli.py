"""Command-line entry point: ``ffnf <subcommand> ...``.

Exit codes: 0 success, 1 validation failure, 2 I/O or corrupt input.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, checkpoint, dependency, fusion, parallel
from .errors import (
    CorruptCalibrationError,
    CorruptCheckpointError,
    FFNFusionError,
    InvalidArgumentError,
)
from .model import generate_random_model, model_forward

FUSION_TOLERANCE = 1e-9


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def _parse_indices(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad index list {text!r}")


def _parse_range(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"range must look like i:j, got {text!r}")


def _default_workers() -> int:
    env = os.environ.get("FFNF_DEFAULT_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ffnf", description="FFN fusion and block-parallel analysis toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a seeded random model")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=_parse_u64, required=True)
    g.add_argument("--out", required=True)

    v = sub.add_parser("verify-fusion", help="check fused weights against parallel FFN evaluation")
    v.add_argument("--model", required=True)
    src = v.add_mutually_exclusive_group(required=True)
    src.add_argument("--plan")
    src.add_argument("--auto", action="store_true")
    v.add_argument("--budget", type=int)
    v.add_argument("--exclude-last", action="store_true")
    v.add_argument("--scale-mode", choices=fusion.SCALE_MODES, default="literal")
    v.add_argument("--calib", required=True)

    a = sub.add_parser("analyze", help="dependency matrix or per-layer metrics to CSV")
    a.add_argument("what", choices=["deps", "layer-metrics"])
    a.add_argument("--model", required=True)
    a.add_argument("--calib", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--workers", type=int, default=_default_workers())

    pl = sub.add_parser("plan", help="build a fusion or block-parallel plan")
    pl.add_argument("kind", choices=["ffn", "blocks"])
    pl.add_argument("--model")
    pl.add_argument("--budget", type=int)
    pl.add_argument("--exclude-last", action="store_true")
    pl.add_argument("--scale-mode", choices=fusion.SCALE_MODES, default="literal")
    pl.add_argument("--deps")
    pl.add_argument("--w", type=int, default=4)
    pl.add_argument("--out", required=True)

    f = sub.add_parser("fuse", help="apply a fusion plan")
    f.add_argument("--model", required=True)
    f.add_argument("--plan", required=True)
    f.add_argument("--out", required=True)

    r = sub.add_parser("remove", help="remove FFNs at the given block indices")
    r.add_argument("--model", required=True)
    r.add_argument("--indices", type=_parse_indices, required=True)
    r.add_argument("--out", required=True)

    rv = sub.add_parser("reverse", help="reverse an attention-removed range")
    rv.add_argument("--model", required=True)
    rv.add_argument("--range", type=_parse_range, required=True)
    rv.add_argument("--out", required=True)

    pa = sub.add_parser("parallelize", help="apply a block-parallel plan")
    pa.add_argument("--model", required=True)
    pa.add_argument("--plan", required=True)
    pa.add_argument("--out", required=True)

    b = sub.add_parser("bench", help="analytic and wall-clock latency")
    b.add_argument("--model", required=True)
    b.add_argument("--compare")
    b.add_argument("--params", default="")
    b.add_argument("--workers", type=int, default=_default_workers())
    b.add_argument("--sync-cost", type=float, default=0.0,
                   help="busy-wait seconds injected per stage barrier")
    b.add_argument("--seed", type=_parse_u64, default=0, help="seed of the benchmark input")
    b.add_argument("--out", required=True)
    return p


def load_calib(spec: str, d_e: int) -> list[np.ndarray]:
    """Load a calibration file, or generate one from ``gen:seed=..,count=..,n=..``."""
    if not spec.startswith("gen:"):
        return checkpoint.load_calibration(spec)
    opts = {"seed": 0, "count": 4, "n": 8}
    for item in filter(None, spec[4:].split(",")):
        key, _, value = item.partition("=")
        if key not in opts:
            raise InvalidArgumentError(f"unknown calibration option {key!r}")
        try:
            opts[key] = int(value, 0)
        except ValueError as exc:
            raise InvalidArgumentError(f"bad calibration value {item!r}") from exc
    return checkpoint.generate_calibration(opts["seed"], opts["count"], opts["n"], d_e)


def _cmd_gen(args) -> int:
    try:
        doc = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{args.config}: not valid JSON ({exc.msg})")
    config = checkpoint.config_from_document(doc)
    checkpoint.save_model(generate_random_model(config, args.seed), args.out)
    return 0


def _fusion_error(model, plan, samples) -> float:
    fused = fusion.apply_fusion_plan(model, plan)
    worst = 0.0
    for X in samples:
        ref = fusion.parallel_reference_forward(model, plan, X)
        got, _ = model_forward(fused, X)
        worst = max(worst, fusion.max_relative_error(got, ref))
    return worst


def _cmd_verify(args) -> int:
    model = checkpoint.load_model(args.model)
    if args.plan:
        plan = checkpoint.load_plan(args.plan)
        if not isinstance(plan, fusion.FusionPlan):
            raise InvalidArgumentError(f"{args.plan} is not a fusion plan")
    else:
        if args.budget is None:
            raise InvalidArgumentError("--auto needs --budget")
        plan = fusion.plan_ffn_fusion(model, args.budget, args.exclude_last, args.scale_mode)
    if not plan.ranges:
        print("no fusible ranges")
        return 0
    samples = load_calib(args.calib, model.d_e)
    err = _fusion_error(model, plan, samples)
    print(f"max fusion error: {err:.3e} over {len(plan.ranges)} ranges")
    return 0 if err <= FUSION_TOLERANCE else 1


def _cmd_analyze(args) -> int:
    model = checkpoint.load_model(args.model)
    samples = load_calib(args.calib, model.d_e)
    if args.what == "deps":
        values = dependency.compute_dependency_matrix(model, samples, workers=args.workers)
    else:
        values = np.column_stack(
            [
                dependency.layer_direction_metric(model, samples),
                dependency.layer_contribution_ratio(model, samples),
            ]
        )
    checkpoint.export_csv(values, args.out)
    return 0


def _cmd_plan(args) -> int:
    if args.kind == "ffn":
        if args.model is None or args.budget is None:
            raise InvalidArgumentError("plan ffn needs --model and --budget")
        model = checkpoint.load_model(args.model)
        plan = fusion.plan_ffn_fusion(model, args.budget, args.exclude_last, args.scale_mode)
    else:
        if args.deps is None:
            raise InvalidArgumentError("plan blocks needs --deps")
        M = checkpoint.read_csv(args.deps)
        if M.shape[0] != M.shape[1]:
            raise InvalidArgumentError("dependency CSV must be square")
        if args.model is not None:
            model = checkpoint.load_model(args.model)
            if model.m != M.shape[0]:
                raise InvalidArgumentError("dependency matrix size does not match the model")
            eligible = parallel.attention_eligibility(model)
        else:
            eligible = [True] * M.shape[0]
        plan = parallel.greedy_select(M, eligible, args.w)
    checkpoint.save_plan(plan, args.out)
    return 0


def _cmd_fuse(args) -> int:
    model = checkpoint.load_model(args.model)
    plan = checkpoint.load_plan(args.plan)
    if not isinstance(plan, fusion.FusionPlan):
        raise InvalidArgumentError(f"{args.plan} is not a fusion plan")
    checkpoint.save_model(fusion.apply_fusion_plan(model, plan), args.out)
    return 0


def _cmd_remove(args) -> int:
    model = checkpoint.load_model(args.model)
    checkpoint.save_model(fusion.remove_ffns(model, args.indices), args.out)
    return 0


def _cmd_reverse(args) -> int:
    model = checkpoint.load_model(args.model)
    checkpoint.save_model(fusion.reverse_ffn_range(model, *args.range), args.out)
    return 0


def _cmd_parallelize(args) -> int:
    model = checkpoint.load_model(args.model)
    plan = checkpoint.load_plan(args.plan)
    if not isinstance(plan, parallel.ParallelPlan):
        raise InvalidArgumentError(f"{args.plan} is not a parallel plan")
    checkpoint.save_model(parallel.apply_block_parallel_plan(model, plan), args.out)
    return 0


def _cmd_bench(args) -> int:
    params = bench.LatencyParams.from_string(args.params)
    if args.workers < 1:
        raise InvalidArgumentError("--workers must be >= 1")
    model = checkpoint.load_model(args.model)
    X = checkpoint.generate_calibration(args.seed, 1, params.n, model.d_e)[0]
    if args.compare:
        other = checkpoint.load_model(args.compare)
        cmp = bench.compare_models(model, other, X, params, args.workers, args.sync_cost)
        sections = [("model", cmp.analytic_a, cmp.wall_a), ("compare", cmp.analytic_b, cmp.wall_b)]
    else:
        sections = [
            (
                "model",
                bench.analytic_latency(model, params),
                bench.wall_clock_bench(model, X, args.workers, args.sync_cost),
            )
        ]

    # the file holds only deterministic analytic numbers; timings go to stdout
    text = []
    for label, report, wall in sections:
        text.append(f"# {label}\n{report.to_csv()}")
        print(f"{label} analytic: {report.summary()}")
        print(f"{label} measured: {wall.summary()}")
    if args.compare:
        text.append(f"divergence={cmp.divergence:.17g}\n")
        print(f"divergence={cmp.divergence:.6g}")
    with open(args.out, "w", newline="\n") as fh:
        fh.write("".join(text))
    return 0


COMMANDS = {
    "gen": _cmd_gen,
    "verify-fusion": _cmd_verify,
    "analyze": _cmd_analyze,
    "plan": _cmd_plan,
    "fuse": _cmd_fuse,
    "remove": _cmd_remove,
    "reverse": _cmd_reverse,
    "parallelize": _cmd_parallelize,
    "bench": _cmd_bench,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ffnf: error: {exc}", file=sys.stderr)
        return 1
    except (CorruptCheckpointError, CorruptCalibrationError, OSError) as exc:
        print(f"ffnf: error: {exc}", file=sys.stderr)
        return 2
    except (FFNFusionError, ValueError) as exc:
        print(f"ffnf: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
