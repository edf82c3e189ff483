"""End-to-end runs of a configured network and the reports they produce."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .graph import (
    Graph,
    GraphError,
    build_graph,
    configure,
    estimate_graph_comm,
    make_input,
    make_weights,
    node_cost,
    run_plain,
    run_secure,
)
from .party import make_party, run_pair
from .planner import QuantPlan, apply_plan
from .transport import Role, open_tcp

SEED_ENV = "QUANT2PC_SEED"

# switches of the fully optimized pipeline
OPTIMIZED = {"residual": "simplified", "signs": True, "fuse": True, "variant": "adaptive"}

BASELINES = {
    "sirnn-default": {"variant": "sirnn"},
    "no-fusion": {"fuse": False},
    "no-signs": {"signs": False},
    "no-simplified-residual": {"residual": "baseline"},
    "all-off": {"residual": "baseline", "signs": False, "fuse": False, "variant": "sirnn"},
}


def default_seed(seed: int | None = None) -> int:
    if seed is not None:
        return seed
    return int(os.environ.get(SEED_ENV, "0"))


def prepare_graph(config: dict, plan: QuantPlan | None = None, **switches) -> Graph:
    """Build the graph for a config (and plan) with the given pass switches."""
    if plan is not None:
        config = apply_plan(config, plan)
    opts = {**OPTIMIZED, **switches}
    return configure(build_graph(config), opts["residual"], opts["signs"], opts["fuse"], opts["variant"])


def block_of(node_id: str) -> str:
    return node_id.split(".", 1)[0]


@dataclass
class RunReport:
    graph: str
    seed: int
    mode: str
    role: str
    lam: int
    options: dict
    nodes: list[dict]
    labels: dict
    verdict: str | None
    rounds: int
    framing_bits: int
    totals: dict = field(default_factory=dict)

    def __post_init__(self):
        self.totals = {
            "measured_bits": sum(n["measured_bits"] for n in self.nodes),
            "predicted_bits": sum(n["predicted_bits"] for n in self.nodes),
            "rounds": sum(n["rounds"] for n in self.nodes),
        }

    def to_dict(self) -> dict:
        return {
            "graph": self.graph,
            "seed": self.seed,
            "mode": self.mode,
            "role": self.role,
            "lambda": self.lam,
            "options": self.options,
            "verdict": self.verdict,
            "totals": self.totals,
            "framing_bits": self.framing_bits,
            "labels": self.labels,
            "nodes": self.nodes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @property
    def passed(self) -> bool:
        return self.verdict == "PASS"


def _label_bits(meter) -> dict:
    labels = {}
    for path, (nbytes, _) in meter.breakdown().items():
        labels[path] = 8 * nbytes
    for key in ("ot", "mm.ot", "mm.ext", "mm.wrap"):
        labels[key] = meter.bits(key)
    return dict(sorted(labels.items()))


def _node_rows(g: Graph, runs, lam: int, setup_bits: int) -> list[dict]:
    rows = [
        {
            "id": "__setup",
            "op": "Setup",
            "label": "ot.setup",
            "measured_bits": setup_bits,
            "predicted_bits": lam,
            "rounds": 1 if setup_bits else 0,
            "variant": None,
        }
    ]
    for r in runs:
        node = g[r.id]
        cost = node_cost(g, node, lam)
        rows.append(
            {
                "id": r.id,
                "op": r.op,
                "label": "+".join(sorted(cost)) if cost else "local",
                "measured_bits": r.measured_bits,
                "predicted_bits": int(sum(cost.values())),
                "rounds": r.rounds,
                "variant": r.variant,
            }
        )
    return rows


def run_graph(
    config: dict,
    plan: QuantPlan | None = None,
    seed: int | None = None,
    mode: str = "inproc",
    role: str = "both",
    lam: int = 128,
    backend: str = "simulated",
    addr: str | None = None,
    **switches,
) -> RunReport:
    """Run the configured network end to end and check it against the oracle.

    Weights and the input are derived from ``seed``. With ``role="both"``
    the two parties run in-process (over queues or TCP loopback); otherwise
    this process plays one role over TCP at ``addr``.
    """
    seed = default_seed(seed)
    g = prepare_graph(config, plan, **switches)
    weights = make_weights(g, seed)
    x = make_input(g, seed)
    if role == "both":
        res = run_pair(
            lambda p: run_secure(p, g, weights, None),
            lambda p: run_secure(p, g, None, x),
            transport=mode,
            seed=seed,
            lam=lam,
            backend=backend,
        )
        out, runs, _ = res.client
        meter = res.client_meter
    else:
        if mode != "tcp":
            raise GraphError("a single role needs --mode tcp")
        r = Role.SERVER if role == "server" else Role.CLIENT
        ep = open_tcp(r, listen_addr=addr or "", connect_addr=None) if r == Role.SERVER else open_tcp(r, connect_addr=addr or "")
        try:
            p = make_party(r, ep, seed, lam, backend)
            out, runs, _ = run_secure(p, g, weights if r == Role.SERVER else None, x if r == Role.CLIENT else None)
        finally:
            ep.close()
        meter = ep.meter
    setup_bits = meter.bits("ot.setup")
    verdict = None
    if out is not None:
        ref = run_plain(g, weights, x)["output"]
        verdict = "PASS" if np.array_equal(out.data, ref.data) and out.meta == ref.meta else "MISMATCH"
    opts = {**OPTIMIZED, **switches}
    return RunReport(
        graph=g.name,
        seed=seed,
        mode=mode,
        role=role,
        lam=lam,
        options={k: opts[k] for k in sorted(opts)},
        nodes=_node_rows(g, runs, lam, setup_bits),
        labels=_label_bits(meter),
        verdict=verdict,
        rounds=meter.rounds,
        framing_bits=8 * meter.framing_bytes,
    )


def compare(
    config: dict,
    baselines=tuple(BASELINES),
    plan: QuantPlan | None = None,
    seed: int | None = None,
    lam: int = 128,
    measure: bool = True,
) -> dict:
    """Block-wise communication of the optimized pipeline and its ablations.

    With ``measure`` every configuration is executed and metered; otherwise
    the cost model is used.
    """
    unknown = [b for b in baselines if b not in BASELINES]
    if unknown:
        raise GraphError(f"unknown baselines {unknown}; choose from {sorted(BASELINES)}")
    runs = {"optimized": {}}
    for b in baselines:
        runs[b] = BASELINES[b]
    per_config, verdicts = {}, {}
    for name, sw in runs.items():
        if measure:
            rep = run_graph(config, plan, seed, lam=lam, **sw)
            rows = [(r["id"], r["measured_bits"]) for r in rep.nodes]
            verdicts[name] = rep.verdict
        else:
            g = prepare_graph(config, plan, **sw)
            est = estimate_graph_comm(g, lam, include_io=True)
            rows = [(k, sum(v.values())) for k, v in est.per_node.items()] + [("__setup", lam)]
        blocks: dict[str, int] = {}
        for nid, bits in rows:
            blocks[block_of(nid)] = blocks.get(block_of(nid), 0) + bits
        per_config[name] = blocks
    order = list(per_config["optimized"])
    for blocks in per_config.values():
        order += [b for b in blocks if b not in order]
    table = []
    for blk in order + ["total"]:
        row = {"block": blk}
        for name, blocks in per_config.items():
            row[name] = sum(blocks.values()) if blk == "total" else blocks.get(blk, 0)
        base = row["optimized"]
        for b in baselines:
            row[f"ratio:{b}"] = _ratio(row[b], base)
        table.append(row)
    return {"graph": config.get("name", "graph"), "measured": measure, "verdicts": verdicts, "table": table}


def _ratio(a: int, b: int):
    if b == 0:
        return 1.0 if a == 0 else None
    return round(a / b, 6)


def format_table(result: dict) -> str:
    rows = result["table"]
    cols = [c for c in rows[0] if c != "block"]
    width = max(len(r["block"]) for r in rows) + 2
    head = "block".ljust(width) + "".join(c.rjust(max(len(c), 14) + 2) for c in cols)
    lines = [head]
    for r in rows:
        cells = []
        for c in cols:
            v = r[c]
            s = "-" if v is None else (f"{v:.3f}" if isinstance(v, float) else str(v))
            cells.append(s.rjust(max(len(c), 14) + 2))
        lines.append(r["block"].ljust(width) + "".join(cells))
    return "\n".join(lines) + "\n"
