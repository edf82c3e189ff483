"""``quant2pc`` command line: run, compare and plan.

Exit codes: 0 success, 1 runtime or peer failure, 2 oracle mismatch,
3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from .graph import GraphError, load_config
from .planner import (
    DEFAULT_CANDIDATES,
    InfeasiblePlanError,
    QuantPlan,
    SensitivityTable,
    layer_weight_counts,
    plan_network,
    synthetic_sensitivity,
)
from .runner import BASELINES, compare, default_seed, format_table, run_graph
from .transport import ChannelError

EXIT_OK, EXIT_FAIL, EXIT_MISMATCH, EXIT_CONFIG = 0, 1, 2, 3

CORPUS = Path(__file__).parent / "corpus"


def resolve_graph(name: str) -> Path:
    """A path, or the name of a bundled corpus graph."""
    p = Path(name)
    if p.exists():
        return p
    for cand in (CORPUS / name, CORPUS / f"{name}.yaml"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no graph file {name!r} (bundled: {', '.join(corpus_names())})")


def corpus_names() -> list[str]:
    return sorted(p.stem for p in CORPUS.glob("*.yaml"))


def _parse_bits(text: str) -> float:
    """Bit counts with an optional unit: ``123``, ``64KiB``, ``1.5MB``, ``inf``."""
    t = text.strip()
    if t.lower() in ("inf", "infinity"):
        return float("inf")
    units = {"kib": 8 * 1024, "mib": 8 * 1024**2, "gib": 8 * 1024**3, "kb": 8e3, "mb": 8e6, "gb": 8e9, "b": 1}
    for suffix, mult in units.items():
        if t.lower().endswith(suffix) and t[: -len(suffix)].strip():
            return float(t[: -len(suffix)]) * mult
    return float(t)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--graph", required=True, help="graph config file or bundled corpus name")
    p.add_argument("--plan", help="plan file with per-layer bit-widths")
    p.add_argument("--seed", type=int, default=None, help="seed for weights, input and protocol randomness")
    p.add_argument("--lambda", dest="lam", type=int, default=128, choices=(80, 128, 256))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="quant2pc", description="Quantized two-party inference runner.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run secure inference and check it against the plaintext oracle")
    _add_common(run)
    run.add_argument("--role", choices=("server", "client", "both"), default="both")
    run.add_argument("--mode", choices=("inproc", "tcp"), default="inproc")
    run.add_argument("--addr", help="host:port for a single role over TCP (default $QUANT2PC_ADDR)")
    run.add_argument("--backend", choices=("simulated", "dh"), default="simulated")
    run.add_argument("--report", help="write the JSON run report here")
    run.add_argument("--no-fusion", action="store_true")
    run.add_argument("--no-signs", action="store_true")
    run.add_argument("--no-simplified-residual", action="store_true")
    run.add_argument("--variant", default="adaptive", help="adaptive, sirnn or 1-4")

    cmp_ = sub.add_parser("compare", help="ablate optimizations and print block-wise ratios")
    _add_common(cmp_)
    cmp_.add_argument("--baselines", nargs="+", default=list(BASELINES), choices=sorted(BASELINES))
    cmp_.add_argument("--estimate", action="store_true", help="use the cost model instead of running")
    cmp_.add_argument("--report", help="write the JSON comparison here")

    plan = sub.add_parser("plan", help="choose per-layer weight bit-widths under a communication limit")
    plan.add_argument("--graph", required=True)
    plan.add_argument("--sens", help="sensitivity file; synthetic sensitivities are used if omitted")
    plan.add_argument("--limit", required=True, type=_parse_bits, help="bits, or with a unit such as 64MiB")
    plan.add_argument("--candidates", default=",".join(map(str, DEFAULT_CANDIDATES)))
    plan.add_argument("--act-bits", type=int, default=None, help="fixed activation bit-width")
    plan.add_argument("--granularity", type=int, default=None, help="cost grid in bits (exact if omitted)")
    plan.add_argument("--seed", type=int, default=None)
    plan.add_argument("--lambda", dest="lam", type=int, default=128, choices=(80, 128, 256))
    plan.add_argument("--out", help="plan file to write (stdout if omitted)")
    plan.add_argument("--write-sens", help="also write the sensitivity table used")
    return ap


def _variant(text: str):
    if text in ("adaptive", "sirnn"):
        return text
    v = int(text)
    if v not in (1, 2, 3, 4):
        raise ValueError("variant must be adaptive, sirnn or 1-4")
    return v


def cmd_run(args) -> int:
    cfg = load_config(resolve_graph(args.graph))
    plan = QuantPlan.read_csv(args.plan) if args.plan else None
    rep = run_graph(
        cfg,
        plan,
        seed=args.seed,
        mode=args.mode,
        role=args.role,
        lam=args.lam,
        backend=args.backend,
        addr=args.addr,
        residual="baseline" if args.no_simplified_residual else "simplified",
        signs=not args.no_signs,
        fuse=not args.no_fusion,
        variant=_variant(args.variant),
    )
    text = rep.to_json()
    if args.report:
        Path(args.report).write_text(text)
    t = rep.totals
    print(f"{rep.graph}: verdict={rep.verdict} measured={t['measured_bits']} bits "
          f"predicted={t['predicted_bits']} bits rounds={rep.rounds}")
    return EXIT_MISMATCH if rep.verdict == "MISMATCH" else EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(resolve_graph(args.graph))
    plan = QuantPlan.read_csv(args.plan) if args.plan else None
    res = compare(cfg, args.baselines, plan, args.seed, args.lam, measure=not args.estimate)
    sys.stdout.write(format_table(res))
    if args.report:
        Path(args.report).write_text(json.dumps(res, indent=2) + "\n")
    bad = [k for k, v in res["verdicts"].items() if v != "PASS"]
    return EXIT_MISMATCH if bad else EXIT_OK


def cmd_plan(args) -> int:
    cfg = load_config(resolve_graph(args.graph))
    cands = tuple(int(c) for c in args.candidates.split(","))
    if args.sens:
        sens = SensitivityTable.read_csv(args.sens)
    else:
        counts = layer_weight_counts(cfg)
        sens = synthetic_sensitivity(counts, cands, default_seed(args.seed))
    if args.write_sens:
        sens.write_csv(args.write_sens)
    plan = plan_network(cfg, sens, args.limit, cands, args.act_bits, args.lam, args.granularity)
    if args.out:
        plan.write_csv(args.out)
    else:
        sys.stdout.write(plan.to_csv())
    summary = " ".join(f"{k}=W{v}" for k, v in plan.weight_bits.items())
    print(f"plan: predicted {plan.total_comm} bits, perturbation {plan.total_omega!r}: {summary}",
          file=sys.stdout if args.out else sys.stderr)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"run": cmd_run, "compare": cmd_compare, "plan": cmd_plan}
    try:
        return handlers[args.cmd](args)
    except InfeasiblePlanError as exc:
        print(f"error: infeasible: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GraphError, FileNotFoundError, yaml.YAMLError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ChannelError as exc:
        print(f"error: peer failure: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
