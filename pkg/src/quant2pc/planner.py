"""Communication-aware mixed bit-width allocation.

Each layer picks one weight bit-width from its candidates. The objective is
the summed quantization perturbation, subject to a budget on the summed
communication of the layers. This is a multiple-choice knapsack; it is
solved exactly by a dynamic program over the Pareto frontier of
(communication, perturbation) prefixes, or over a communication grid.

Ties are broken towards lower communication, then towards wider bit-widths
in earlier layers, so plans are deterministic.
"""

from __future__ import annotations

import copy
import csv
import io
import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .graph import build_graph, estimate_graph_comm, propagate_signs
from .ring import ConvGeometry

DEFAULT_CANDIDATES = (2, 3, 4, 5)
ACT_BITS = {"minionn": 4, "resnet": 6}
KIB_BITS = 8 * 1024


class InfeasiblePlanError(ValueError):
    """No assignment fits the communication limit."""

    def __init__(self, limit: float, min_comm: int):
        super().__init__(f"limit {limit} bits is below the minimum achievable {min_comm} bits")
        self.limit = limit
        self.min_comm = min_comm


@dataclass
class SensitivityTable:
    """Perturbation of every layer at every candidate weight bit-width."""

    omega: dict[str, dict[int, float]]

    def __post_init__(self):
        for lid, row in self.omega.items():
            if not row:
                raise ValueError(f"layer {lid} has no candidates")
            for b, w in row.items():
                if not (w >= 0 and math.isfinite(w)):
                    raise ValueError(f"omega of {lid} at {b} bits must be a finite non-negative number")
            vals = [row[b] for b in sorted(row)]
            if any(later > earlier for earlier, later in zip(vals, vals[1:])):
                warnings.warn(f"omega of layer {lid} is not non-increasing in the bit-width", stacklevel=2)

    @property
    def layers(self) -> list[str]:
        return list(self.omega)

    def candidates(self, layer: str) -> list[int]:
        return sorted(self.omega[layer])

    def to_rows(self) -> list[dict]:
        return [
            {"layer_id": lid, "bit_width": b, "omega": w}
            for lid, row in self.omega.items()
            for b, w in sorted(row.items())
        ]

    def write_csv(self, path) -> None:
        _write_rows(path, ["layer_id", "bit_width", "omega"], self.to_rows())

    @classmethod
    def read_csv(cls, path) -> "SensitivityTable":
        omega: dict[str, dict[int, float]] = {}
        for row in _read_rows(path, ["layer_id", "bit_width", "omega"]):
            lid, b = row["layer_id"], int(row["bit_width"])
            if b in omega.setdefault(lid, {}):
                raise ValueError(f"duplicate row for {lid} at {b} bits")
            omega[lid][b] = float(row["omega"])
        return cls(omega)


@dataclass
class QuantPlan:
    """Chosen weight bit-width (and fixed activation bit-width) per layer."""

    weight_bits: dict[str, int]
    act_bits: dict[str, int] = field(default_factory=dict)
    predicted_bits: dict[str, int] = field(default_factory=dict)
    total_omega: float = 0.0

    @property
    def total_comm(self) -> int:
        return int(sum(self.predicted_bits.values()))

    def to_rows(self) -> list[dict]:
        return [
            {
                "layer_id": lid,
                "weight_bits": b,
                "act_bits": self.act_bits.get(lid, ""),
                "predicted_bits": self.predicted_bits.get(lid, ""),
            }
            for lid, b in self.weight_bits.items()
        ]

    def to_csv(self) -> str:
        return _format_rows(["layer_id", "weight_bits", "act_bits", "predicted_bits"], self.to_rows())

    def write_csv(self, path) -> None:
        _write_rows(path, ["layer_id", "weight_bits", "act_bits", "predicted_bits"], self.to_rows())

    @classmethod
    def read_csv(cls, path) -> "QuantPlan":
        plan = cls({})
        for row in _read_rows(path, ["layer_id", "weight_bits", "act_bits", "predicted_bits"]):
            lid = row["layer_id"]
            if lid in plan.weight_bits:
                raise ValueError(f"duplicate plan row for {lid}")
            plan.weight_bits[lid] = int(row["weight_bits"])
            if row["act_bits"] not in ("", None):
                plan.act_bits[lid] = int(row["act_bits"])
            if row["predicted_bits"] not in ("", None):
                plan.predicted_bits[lid] = int(row["predicted_bits"])
        return plan


def _format_rows(header, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for r in rows:
        # repr keeps floats lossless through the text file
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_format_rows(header, rows))


def _read_rows(path, header) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(header) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return list(reader)


# ---------------------------------------------------------------------------
# cost model


def layer_comm(geometry, weight_bits: int, act_bits: int, lam: int = 128, nonneg: bool = False) -> int:
    """Predicted bits of one conv (``ConvGeometry``) or fc (``(d1, d2)``) layer.

    Evaluated as a single-layer graph with adaptive variant selection.
    """
    if isinstance(geometry, ConvGeometry):
        if 0 in (geometry.c_in, geometry.c_out, geometry.height, geometry.width):
            return 0
        cfg_layer = {
            "id": "layer",
            "type": "conv",
            "out_channels": geometry.c_out,
            "kernel": geometry.kernel,
            "stride": geometry.stride,
            "pad": geometry.pad,
            "weight_bits": weight_bits,
        }
        shape = [geometry.c_in, geometry.height, geometry.width]
    else:
        d1, d2 = geometry
        if d1 == 0 or d2 == 0:
            return 0
        cfg_layer = {"id": "layer", "type": "fc", "out_features": d1, "weight_bits": weight_bits}
        shape = [d2, 1, 1]
    cfg = {"input": {"shape": shape, "bits": act_bits, "nonneg": nonneg}, "layers": [cfg_layer]}
    g = build_graph(cfg)
    if nonneg:
        g = propagate_signs(g)
    g.options["variant"] = "adaptive"
    return estimate_graph_comm(g, lam).total


def planned_layers(config: dict) -> list[str]:
    """Ids of the layers whose weight bit-width the planner chooses."""
    out = []
    for idx, layer in enumerate(config["layers"]):
        kind = str(layer.get("type", "")).lower()
        if kind in ("conv", "fc"):
            out.append(str(layer.get("id", f"{kind}{idx}")))
    return out


def apply_plan(config: dict, plan: QuantPlan) -> dict:
    """A copy of the config with the plan's bit-widths filled in."""
    cfg = copy.deepcopy(config)
    ids = set(planned_layers(cfg))
    unknown = set(plan.weight_bits) - ids
    if unknown:
        raise ValueError(f"plan names layers not in the graph: {sorted(unknown)}")
    missing = ids - set(plan.weight_bits)
    if missing:
        raise ValueError(f"plan has no entry for layers {sorted(missing)}")
    for idx, layer in enumerate(cfg["layers"]):
        lid = str(layer.get("id", f"{str(layer.get('type', '')).lower()}{idx}"))
        if lid in plan.weight_bits:
            layer["id"] = lid
            layer["weight_bits"] = plan.weight_bits[lid]
            layer.pop("weight_scale", None)
            if lid in plan.act_bits:
                layer["act_bits"] = plan.act_bits[lid]
                layer.pop("act_scale", None)
    return cfg


def network_comm_table(
    config: dict, candidates=DEFAULT_CANDIDATES, act_bits: int | None = None, lam: int = 128, signs: bool = True
) -> dict[str, dict[int, int]]:
    """``layer_comm`` of every planned layer at every candidate width."""
    cfg = copy.deepcopy(config)
    if act_bits is not None:
        cfg["input"]["bits"] = act_bits
        cfg["input"].pop("scale", None)
        for layer in cfg["layers"]:
            if str(layer.get("type", "")).lower() in ("conv", "fc", "add"):
                layer["act_bits"] = act_bits
                layer.pop("act_scale", None)
    g = build_graph(cfg)
    if signs:
        g = propagate_signs(g)
    table = {}
    for lid in planned_layers(cfg):
        node = g[lid]
        src = g[node.inputs[0]]
        geom = node.attrs["geometry"] if node.op == "Conv" else (node.attrs["d1"], node.attrs["d2"])
        nn = src.sign.value == "nonneg"
        table[lid] = {b: layer_comm(geom, b, src.meta.bits, lam, nn) for b in candidates}
    return table


def synthetic_sensitivity(
    layers: dict[str, int], candidates=DEFAULT_CANDIDATES, seed: int = 0, samples: int = 4096
) -> SensitivityTable:
    """Seeded stand-in for measured sensitivities.

    ``layers`` maps layer id to its weight count. Each layer gets a
    log-normal curvature trace and Gaussian weights (at most ``samples`` of
    them); the perturbation at ``b`` bits is the trace times the squared
    error of symmetric uniform quantization, scaled to the full weight count.
    """
    rng = np.random.default_rng(seed)
    omega = {}
    for lid, count in layers.items():
        trace = float(rng.lognormal(0.0, 1.0))
        n = max(1, min(int(count), samples))
        w = rng.normal(0.0, 1.0 / math.sqrt(max(count, 1)), n)
        row = {}
        for b in candidates:
            q = (1 << (b - 1)) - 1 or 1
            step = np.abs(w).max() / q
            err = np.clip(np.round(w / step), -q - 1, q) * step - w
            row[b] = trace * float(err @ err) * (count / n)
        omega[lid] = row
    return SensitivityTable(omega)


# ---------------------------------------------------------------------------
# solvers


def _key(omega: float, comm: int, bits: tuple) -> tuple:
    return (omega, comm, tuple(-b for b in bits))


def _options(sens: SensitivityTable, comm: dict, candidates) -> list[list[tuple[int, int, float]]]:
    opts = []
    for lid in sens.layers:
        cands = candidates.get(lid) if isinstance(candidates, dict) else candidates
        cands = sorted(cands) if cands is not None else sens.candidates(lid)
        row = []
        for b in cands:
            if b not in sens.omega[lid]:
                raise ValueError(f"no sensitivity for {lid} at {b} bits")
            if b not in comm.get(lid, {}):
                raise ValueError(f"no communication cost for {lid} at {b} bits")
            row.append((b, int(comm[lid][b]), float(sens.omega[lid][b])))
        if not row:
            raise ValueError(f"layer {lid} has no candidates")
        opts.append(row)
    return opts


def _finish(sens, bits, comm, omega_total, act_bits) -> QuantPlan:
    wb = dict(zip(sens.layers, bits))
    acts = {lid: act_bits for lid in sens.layers} if act_bits is not None else {}
    pred = {lid: int(comm[lid][b]) for lid, b in wb.items()}
    return QuantPlan(wb, acts, pred, omega_total)


def solve_plan(
    sens: SensitivityTable,
    comm: dict[str, dict[int, int]],
    limit: float,
    candidates=None,
    granularity: int | None = None,
    act_bits: int | None = None,
) -> QuantPlan:
    """Minimize total perturbation subject to total communication <= limit.

    Without ``granularity`` the frontier dynamic program is exact. With it,
    costs are rounded up to multiples of ``granularity`` bits and the grid
    program is exact for the rounded problem (so its plans always fit).
    """
    opts = _options(sens, comm, candidates)
    min_comm = sum(min(c for _, c, _ in row) for row in opts)
    if min_comm > limit:
        raise InfeasiblePlanError(limit, min_comm)
    if granularity:
        bits = _solve_grid(opts, limit, granularity)
    else:
        bits = _solve_frontier(opts, limit)
    if bits is None:
        raise InfeasiblePlanError(limit, min_comm)
    omega = 0.0
    for row, b in zip(opts, bits):
        omega += next(w for bb, _, w in row if bb == b)
    return _finish(sens, bits, comm, omega, act_bits)


def _solve_frontier(opts, limit) -> tuple | None:
    # states: (comm, omega, bits); keep only non-dominated prefixes
    states = [(0, 0.0, ())]
    for row in opts:
        nxt = {}
        for c0, w0, bits in states:
            for b, c, w in row:
                cc = c0 + c
                if cc > limit:
                    continue
                cand = (cc, w0 + w, bits + (b,))
                prev = nxt.get(cc)
                if prev is None or _key(cand[1], cc, cand[2]) < _key(prev[1], cc, prev[2]):
                    nxt[cc] = cand
        frontier, best_w = [], math.inf
        for cc in sorted(nxt):
            s = nxt[cc]
            if s[1] < best_w:
                frontier.append(s)
                best_w = s[1]
        states = frontier
        if not states:
            return None
    best = min(states, key=lambda s: _key(s[1], s[0], s[2]))
    return best[2]


def _solve_grid(opts, limit, granularity: int) -> tuple | None:
    cap = int(limit // granularity)
    # dp[u] = best key reachable with exactly u rounded units
    dp: dict[int, tuple] = {0: (0.0, 0, ())}
    for row in opts:
        nxt: dict[int, tuple] = {}
        for u0, (w0, c0, bits) in dp.items():
            for b, c, w in row:
                u = u0 + -(-c // granularity)
                if u > cap:
                    continue
                cand = (w0 + w, c0 + c, bits + (b,))
                prev = nxt.get(u)
                if prev is None or _key(*cand) < _key(*prev):
                    nxt[u] = cand
        dp = nxt
        if not dp:
            return None
    return min(dp.values(), key=lambda s: _key(*s))[2]


def brute_force_plan(sens: SensitivityTable, comm, limit, candidates=None, act_bits=None) -> QuantPlan:
    """Exhaustive reference solver for small instances."""
    opts = _options(sens, comm, candidates)
    best = None
    for combo in itertools.product(*opts):
        c = sum(x[1] for x in combo)
        if c > limit:
            continue
        w = 0.0
        for x in combo:
            w += x[2]
        key = _key(w, c, tuple(x[0] for x in combo))
        if best is None or key < best[0]:
            best = (key, tuple(x[0] for x in combo), w)
    if best is None:
        raise InfeasiblePlanError(limit, sum(min(x[1] for x in row) for row in opts))
    return _finish(sens, best[1], comm, best[2], act_bits)


def plan_network(
    config: dict,
    sens: SensitivityTable,
    limit: float,
    candidates=DEFAULT_CANDIDATES,
    act_bits: int | None = None,
    lam: int = 128,
    granularity: int | None = None,
) -> QuantPlan:
    """Cost every planned layer of a network and solve for the limit."""
    ids = planned_layers(config)
    if set(ids) != set(sens.layers):
        raise ValueError(f"sensitivity layers {sens.layers} do not match the graph layers {ids}")
    sens = SensitivityTable({lid: sens.omega[lid] for lid in ids})
    comm = network_comm_table(config, candidates, act_bits, lam)
    return solve_plan(sens, comm, limit, candidates, granularity, act_bits)


def layer_weight_counts(config: dict) -> dict[str, int]:
    g = build_graph(config)
    out = {}
    for lid in planned_layers(config):
        n = g[lid]
        if n.op == "Conv":
            geo = n.attrs["geometry"]
            out[lid] = geo.c_out * geo.c_in * geo.kernel**2
        else:
            out[lid] = n.attrs["d1"] * n.attrs["d2"]
    return out
