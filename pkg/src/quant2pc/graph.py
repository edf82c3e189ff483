"""Quantized-network IR, graph passes, cost estimation and executors.

A graph is built from a layer list (see ``build_graph``) into protocol-level
nodes with explicit metadata. Residual additions are first lowered into the
baseline chain: re-quantize the convolution output and the skip operand to
the residual format, extend both by one bit, add, re-quantize. Passes then
rewrite the graph:

* ``lower_residual_simplified`` aligns the skip operand to the convolution
  accumulator and adds there, dropping the standalone re-quantization of the
  convolution output.
* ``propagate_signs`` runs an interval analysis and marks every tensor whose
  values are provably non-negative.
* ``fuse_protocols`` expands re-quantizations into their primitive steps and
  rewrites truncation/extension chains into cheaper equivalent ones.

Both executors walk the same node list: ``run_plain`` with the plaintext ring
ops, ``run_secure`` with the two-party protocols.
"""

from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import costs
from .matmul import MatmulDims, resolve_variant, secure_conv, secure_matmul
from .party import Party
from .primitives import (
    Share,
    SignFact,
    add,
    avg_pool,
    ext,
    max_pool,
    relu,
    requant,
    reveal,
    share_input,
    trunc,
    trunc_reduce,
)
from .ring import (
    ConvGeometry,
    QuantMeta,
    RingTensor,
    accumulator_extra_bits,
    conv_plain,
    ext_plain,
    mask,
    matmul_plain,
    max_pool_plain,
    pool_shift,
    relu_plain,
    requant_plain,
    shl,
    sum_pool_plain,
    tr_plain,
    trunc_plain,
)
from .transport import Role

OPS = (
    "Input",
    "Conv",
    "FC",
    "ReLU",
    "ResidualAdd",
    "AvgPool",
    "MaxPool",
    "Requant",
    "Ext",
    "Trunc",
    "TR",
    "Cast",
    "Output",
)


class GraphError(ValueError):
    """Invalid graph configuration or inconsistent metadata."""


@dataclass
class Node:
    id: str
    op: str
    inputs: list[str]
    meta: QuantMeta
    shape: tuple
    attrs: dict = field(default_factory=dict)
    sign: SignFact = SignFact.UNKNOWN
    bounds: tuple[int, int] | None = None

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "op": self.op,
            "inputs": list(self.inputs),
            "bits": self.meta.bits,
            "scale_log2": self.meta.scale_log2,
            "shape": list(self.shape),
            "sign": self.sign.value,
        }
        attrs = {}
        for k, v in self.attrs.items():
            if isinstance(v, ConvGeometry):
                v = {f: getattr(v, f) for f in ("c_in", "c_out", "height", "width", "kernel", "stride", "pad")}
            elif isinstance(v, QuantMeta):
                v = {"bits": v.bits, "scale_log2": v.scale_log2}
            elif isinstance(v, tuple):
                v = list(v)
            attrs[k] = v
        if attrs:
            d["attrs"] = attrs
        return d


@dataclass
class Graph:
    name: str
    nodes: list[Node]
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        self._reindex()

    def _reindex(self) -> None:
        self._by_id = {n.id: n for n in self.nodes}
        if len(self._by_id) != len(self.nodes):
            raise GraphError("duplicate node ids")

    def __getitem__(self, node_id: str) -> Node:
        return self._by_id[node_id]

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._by_id

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def output(self) -> Node:
        outs = [n for n in self.nodes if n.op == "Output"]
        return outs[-1] if outs else self.nodes[-1]

    def consumers(self, node_id: str) -> list[Node]:
        return [n for n in self.nodes if node_id in n.inputs]

    def copy(self) -> "Graph":
        return Graph(self.name, copy.deepcopy(self.nodes), copy.deepcopy(self.options))

    def replace_nodes(self, old_ids: list[str], new_nodes: list[Node]) -> None:
        """Swap a run of nodes for new ones at the position of the first."""
        pos = min(i for i, n in enumerate(self.nodes) if n.id in old_ids)
        kept = [n for n in self.nodes if n.id not in old_ids]
        before = sum(1 for n in self.nodes[:pos] if n.id not in old_ids)
        self.nodes = kept[:before] + new_nodes + kept[before:]
        self._reindex()

    def rewire(self, old: str, new: str) -> None:
        for n in self.nodes:
            n.inputs = [new if i == old else i for i in n.inputs]

    def validate(self) -> None:
        seen = set()
        for n in self.nodes:
            if n.op not in OPS:
                raise GraphError(f"unknown op {n.op}")
            for i in n.inputs:
                if i not in seen:
                    raise GraphError(f"node {n.id} reads {i} before it is produced")
            seen.add(n.id)
            if n.op == "ResidualAdd":
                a, b = (self[i] for i in n.inputs)
                if a.meta != b.meta or a.meta != n.meta:
                    raise GraphError(f"operands of {n.id} do not share metadata")

    def to_dict(self) -> dict:
        return {"name": self.name, "options": dict(self.options), "nodes": [n.to_dict() for n in self.nodes]}

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


# ---------------------------------------------------------------------------
# building from a layer list


def _signed_range(bits: int) -> tuple[int, int]:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def default_act_scale(bits: int) -> int:
    return max(bits - 2, 0)


def build_graph(config: dict, residual: str = "baseline") -> Graph:
    """Lower a layer configuration into protocol-level nodes.

    ``config`` has ``input`` (``shape``, ``bits``, optional ``scale``) and a
    ``layers`` list. Layer types: ``conv``, ``fc``, ``relu``, ``avgpool``,
    ``maxpool`` and ``add`` (residual, with ``skip`` naming an earlier layer).
    ``residual`` selects the baseline chain or the simplified lowering.
    """
    try:
        inp = config["input"]
        layers = config["layers"]
    except (KeyError, TypeError) as exc:
        raise GraphError("config needs 'input' and 'layers'") from exc
    shape = tuple(int(d) for d in inp["shape"])
    if len(shape) != 3:
        raise GraphError("input shape must be [channels, height, width]")
    in_bits = int(inp.get("bits", inp.get("act_bits", 8)))
    in_meta = QuantMeta(in_bits, int(inp.get("scale", default_act_scale(in_bits))))
    nodes = [Node("input", "Input", [], in_meta, shape)]
    if inp.get("nonneg"):
        # the input is the output of an earlier ReLU
        nodes[0].attrs["bounds"] = (0, (1 << (in_bits - 1)) - 1)
    g = Graph(config.get("name", "graph"), nodes, {"residual": "baseline", "signs": False, "fused": False})
    g.options["residual_bits"] = config.get("residual_bits")
    alias: dict[str, str] = {"input": "input"}
    cur = "input"
    for idx, layer in enumerate(layers):
        kind = str(layer.get("type", "")).lower()
        lid = str(layer.get("id", f"{kind}{idx}"))
        if lid in alias:
            raise GraphError(f"duplicate layer id {lid}")
        last = idx == len(layers) - 1
        nxt = str(layers[idx + 1].get("type", "")).lower() if not last else None
        src = g[cur]
        if kind in ("conv", "fc"):
            wb = int(layer.get("weight_bits", config.get("weight_bits", 4)))
            ws = int(layer.get("weight_scale", wb - 1))
            w_meta = QuantMeta(wb, ws)
            if kind == "conv":
                if len(src.shape) != 3:
                    raise GraphError(f"{lid}: convolution needs a (C, H, W) input")
                cin = int(layer.get("in_channels", src.shape[0]))
                if cin != src.shape[0]:
                    raise GraphError(f"{lid}: in_channels {cin} but input has {src.shape[0]}")
                k = int(layer.get("kernel", 3))
                geom = ConvGeometry(
                    cin,
                    int(layer["out_channels"]),
                    src.shape[1],
                    src.shape[2],
                    k,
                    int(layer.get("stride", 1)),
                    int(layer.get("pad", k // 2)),
                )
                d1, d2, _ = geom.dims
                out_shape = (geom.c_out, geom.out_height, geom.out_width)
                attrs = {"geometry": geom, "w_meta": w_meta}
            else:
                d2 = int(np.prod(src.shape))
                d1 = int(layer.get("out_features", layer.get("out_channels", 0)))
                if d1 < 1:
                    raise GraphError(f"{lid}: fc needs out_features")
                if "in_features" in layer and int(layer["in_features"]) != d2:
                    raise GraphError(f"{lid}: in_features {layer['in_features']} but input has {d2}")
                out_shape = (d1,)
                attrs = {"d1": d1, "d2": d2, "w_meta": w_meta}
            L = wb + src.meta.bits + accumulator_extra_bits(d2)
            if L > 64:
                raise GraphError(f"{lid}: accumulator of {L} bits exceeds 64")
            acc = QuantMeta(L, ws + src.meta.scale_log2)
            op = "Conv" if kind == "conv" else "FC"
            g.nodes.append(Node(lid, op, [cur], acc, out_shape, attrs))
            g._reindex()
            cur = lid
            if not last and nxt != "add":
                ab = int(layer.get("act_bits", config.get("act_bits", src.meta.bits)))
                am = QuantMeta(ab, int(layer.get("act_scale", default_act_scale(ab))))
                rq = Node(f"{lid}.rq", "Requant", [cur], am, out_shape)
                g.nodes.append(rq)
                g._reindex()
                cur = rq.id
            elif not last:
                g[lid].attrs["act_bits"] = layer.get("act_bits")
        elif kind == "relu":
            g.nodes.append(Node(lid, "ReLU", [cur], src.meta, src.shape))
            g._reindex()
            cur = lid
        elif kind in ("avgpool", "maxpool"):
            k = int(layer.get("kernel", 2))
            c, h, w = src.shape
            out_shape = (c, h // k, w // k)
            if kind == "avgpool":
                j = pool_shift(k)
                wide = QuantMeta(src.meta.bits + j, src.meta.scale_log2 + j)
                g.nodes.append(Node(lid, "AvgPool", [cur], wide, out_shape, {"kernel": k}))
                g.nodes.append(Node(f"{lid}.rq", "Requant", [lid], src.meta, out_shape))
                g._reindex()
                cur = f"{lid}.rq"
            else:
                g.nodes.append(Node(lid, "MaxPool", [cur], src.meta, out_shape, {"kernel": k}))
                g._reindex()
                cur = lid
        elif kind == "add":
            skip_name = str(layer.get("skip", ""))
            if skip_name not in alias:
                raise GraphError(f"{lid}: unknown skip source {skip_name!r}")
            skip = g[alias[skip_name]]
            main = g[cur]
            if main.op not in ("Conv", "FC"):
                raise GraphError(f"{lid}: a residual add must directly follow a conv or fc layer")
            if skip.shape != main.shape:
                raise GraphError(f"{lid}: skip shape {skip.shape} does not match {main.shape}")
            ab = int(layer.get("act_bits", skip.meta.bits))
            out_meta = QuantMeta(ab, int(layer.get("act_scale", skip.meta.scale_log2 if ab == skip.meta.bits else default_act_scale(ab))))
            rb = layer.get("residual_bits", config.get("residual_bits")) or skip.meta.bits
            block = {"id": lid, "main": main.id, "skip": skip.id, "out": out_meta, "residual_bits": int(rb)}
            new = _baseline_chain(g, block)
            g.nodes.extend(new)
            g._reindex()
            cur = lid
        else:
            raise GraphError(f"unknown layer type {kind!r}")
        alias[lid] = cur
    g.nodes.append(Node("output", "Output", [cur], g[cur].meta, g[cur].shape))
    g._reindex()
    g.validate()
    g = analyze_bounds(g)
    if residual == "simplified":
        g = lower_residual_simplified(g)
    return g


def _align_nodes(prefix: str, src: Node, target: QuantMeta, block: str) -> list[Node]:
    """Lossless move to a wider ring and finer scale: extend, then shift."""
    if target.bits < src.meta.bits or target.scale_log2 < src.meta.scale_log2:
        raise GraphError(f"cannot align {src.id} {src.meta} to {target}")
    out, cur = [], src.id
    if target.bits > src.meta.bits:
        m = QuantMeta(target.bits, src.meta.scale_log2)
        out.append(Node(f"{prefix}.ext", "Ext", [cur], m, src.shape, {"block": block}))
        cur = out[-1].id
    k = target.scale_log2 - src.meta.scale_log2
    if k:
        out.append(Node(f"{prefix}.shl", "Cast", [cur], target, src.shape, {"shift": k, "block": block}))
    return out


def _residual_format(block: dict, skip: Node) -> QuantMeta:
    rb = block["residual_bits"]
    return QuantMeta(rb, skip.meta.scale_log2 + max(rb - skip.meta.bits, 0))


def _baseline_chain(g: Graph, block: dict) -> list[Node]:
    bid = block["id"]
    main, skip = g[block["main"]], g[block["skip"]]
    res = _residual_format(block, skip)
    add_meta = QuantMeta(res.bits + 1, res.scale_log2)
    nodes = [Node(f"{bid}.main.rq", "Requant", [main.id], res, main.shape, {"block": bid})]
    if skip.meta == res:
        skip_tail = skip.id
    elif skip.meta.bits <= res.bits and skip.meta.scale_log2 <= res.scale_log2:
        al = _align_nodes(f"{bid}.skip", skip, res, bid)
        nodes += al
        skip_tail = al[-1].id
    else:
        nodes.append(Node(f"{bid}.skip.rq", "Requant", [skip.id], res, skip.shape, {"block": bid}))
        skip_tail = nodes[-1].id
    nodes.append(Node(f"{bid}.main.ext", "Ext", [nodes[0].id], add_meta, main.shape, {"block": bid}))
    nodes.append(Node(f"{bid}.skip.ext2", "Ext", [skip_tail], add_meta, main.shape, {"block": bid}))
    nodes.append(
        Node(f"{bid}.add", "ResidualAdd", [f"{bid}.main.ext", f"{bid}.skip.ext2"], add_meta, main.shape,
             {"block": bid, "chain": "baseline", "spec": _block_spec(block)})
    )
    nodes.append(Node(bid, "Requant", [f"{bid}.add"], block["out"], main.shape, {"block": bid}))
    return nodes


def _simplified_chain(g: Graph, block: dict) -> list[Node]:
    bid = block["id"]
    main, skip = g[block["main"]], g[block["skip"]]
    # A product sum of d2 terms fits l_acc - 1 signed bits, so the
    # accumulator already carries the spare bit the addition needs: the
    # operands live in l_res = l_acc - 1 bits and the sum in l_res + 1.
    add_meta = main.meta
    al = _align_nodes(f"{bid}.skip", skip, add_meta, bid)
    tail = al[-1].id if al else skip.id
    nodes = al + [
        Node(f"{bid}.add", "ResidualAdd", [main.id, tail], add_meta, main.shape,
             {"block": bid, "chain": "simplified", "spec": _block_spec(block), "l_res": add_meta.bits - 1}),
        Node(bid, "Requant", [f"{bid}.add"], block["out"], main.shape, {"block": bid}),
    ]
    return nodes


def _block_spec(block: dict) -> dict:
    out = block["out"]
    return {
        "id": block["id"],
        "main": block["main"],
        "skip": block["skip"],
        "out_bits": out.bits,
        "out_scale": out.scale_log2,
        "residual_bits": block["residual_bits"],
    }


def _spec_block(spec: dict) -> dict:
    return {
        "id": spec["id"],
        "main": spec["main"],
        "skip": spec["skip"],
        "out": QuantMeta(spec["out_bits"], spec["out_scale"]),
        "residual_bits": spec["residual_bits"],
    }


# ---------------------------------------------------------------------------
# passes


@dataclass
class PassReport:
    rewrites: list[str] = field(default_factory=list)
    before: dict = field(default_factory=dict)
    after: dict = field(default_factory=dict)


def lower_residual_simplified(graph: Graph) -> Graph:
    """Replace every baseline residual chain by the simplified one."""
    g = graph.copy()
    for add_node in [n for n in g.nodes if n.op == "ResidualAdd" and n.attrs.get("chain") == "baseline"]:
        block = _spec_block(add_node.attrs["spec"])
        old = [n.id for n in g.nodes if n.attrs.get("block") == block["id"]]
        g.replace_nodes(old, _simplified_chain(g, block))
    g.options["residual"] = "simplified"
    g.validate()
    g = analyze_bounds(g, keep_signs=graph.options.get("signs", False))
    _check_headroom(g)
    return g


def _check_headroom(g: Graph) -> None:
    """Both operands of a simplified addition must fit ``l_res`` bits."""
    for n in g.nodes:
        if n.op == "ResidualAdd" and n.attrs.get("chain") == "simplified":
            l_res = n.attrs["l_res"]
            skip = g[n.attrs["spec"]["skip"]]
            main = g[n.attrs["spec"]["main"]]
            k = main.meta.scale_log2 - skip.meta.scale_log2
            if not _fits(main.bounds, 0, l_res):
                raise GraphError(f"{n.id}: the accumulator of {main.id} does not fit {l_res} bits")
            if not _fits(skip.bounds, k, l_res):
                raise GraphError(f"{n.id}: the aligned skip operand does not fit {l_res} bits")
            out = g[n.attrs["block"]].meta
            if out.bits > n.meta.bits and out.scale_log2 > n.meta.scale_log2:
                raise GraphError(f"{n.id}: the output format {out} would shift inside the narrower sum")


def _clip(bounds, bits):
    lo, hi = bounds
    rlo, rhi = _signed_range(bits)
    if lo < rlo or hi > rhi:
        return rlo, rhi
    return lo, hi


def _node_bounds(g: Graph, n: Node) -> tuple[int, int]:
    ins = [g[i] for i in n.inputs]
    if n.op == "Input":
        b = n.attrs.get("bounds")
        return tuple(b) if b else _signed_range(n.meta.bits)
    lo, hi = ins[0].bounds if ins else (0, 0)
    if n.op in ("Conv", "FC"):
        wlo, whi = _signed_range(n.attrs["w_meta"].bits)
        d2 = n.attrs["geometry"].dims[1] if n.op == "Conv" else n.attrs["d2"]
        prods = [wlo * lo, wlo * hi, whi * lo, whi * hi]
        return _clip((d2 * min(prods + [0]), d2 * max(prods + [0])), n.meta.bits)
    if n.op == "ReLU":
        return max(lo, 0), max(hi, 0)
    if n.op in ("MaxPool", "Output", "Ext"):
        return _clip((lo, hi), n.meta.bits)
    if n.op == "AvgPool":
        a = n.attrs["kernel"] ** 2
        return _clip((lo * a, hi * a), n.meta.bits)
    if n.op == "ResidualAdd":
        lo2, hi2 = ins[1].bounds
        return _clip((lo + lo2, hi + hi2), n.meta.bits)
    if n.op in ("Trunc", "TR"):
        s = n.attrs["shift"]
        return _clip((lo >> s, hi >> s), n.meta.bits)
    if n.op == "Cast":
        k = n.attrs.get("shift", 0)
        src_bits = ins[0].meta.bits
        b = _clip((lo << k, hi << k), src_bits)
        return _clip(b, n.meta.bits)
    if n.op == "Requant":
        src = ins[0].meta
        l1, s1, l2, s2 = src.bits, src.scale_log2, n.meta.bits, n.meta.scale_log2
        if s1 <= s2:
            b = _clip((lo << (s2 - s1), hi << (s2 - s1)), l1)
        else:
            b = (lo >> (s1 - s2), hi >> (s1 - s2))
        return _clip(b, l2)
    raise GraphError(f"no bounds rule for {n.op}")


def analyze_bounds(graph: Graph, keep_signs: bool | None = None) -> Graph:
    """Attach worst-case signed value intervals to every node.

    Sign facts are refreshed from the intervals when sign propagation is on,
    and cleared otherwise.
    """
    g = graph.copy()
    signs = g.options.get("signs", False) if keep_signs is None else keep_signs
    for n in g.nodes:
        n.bounds = _node_bounds(g, n)
        n.sign = SignFact.NONNEG if signs and n.bounds[0] >= 0 else SignFact.UNKNOWN
    g.options["signs"] = bool(signs)
    return g


def propagate_signs(graph: Graph) -> Graph:
    """Mark provably non-negative tensors so consumers use cheaper protocols."""
    return analyze_bounds(graph, keep_signs=True)


def _expand_requant(g: Graph, n: Node) -> list[Node]:
    """The primitive steps of one re-quantization, in branch order."""
    src = g[n.inputs[0]]
    l1, s1, l2, s2 = src.meta.bits, src.meta.scale_log2, n.meta.bits, n.meta.scale_log2
    mk = lambda suffix, op, meta, inp, **attrs: Node(f"{n.id}.{suffix}", op, [inp], meta, n.shape, dict(attrs))
    steps: list[Node] = []
    cur = src.id
    if l1 >= l2:
        if s1 <= s2:
            steps.append(mk("shl", "Cast", n.meta, cur, shift=s2 - s1))
        else:
            k = s1 - s2
            if l1 - l2 >= k:
                steps.append(mk("tr", "TR", QuantMeta(l1 - k, s2), cur, shift=k))
            else:
                steps.append(mk("trunc", "Trunc", QuantMeta(l1, s2), cur, shift=min(k, l1 - 1)))
            if steps[-1].meta.bits != l2:
                steps.append(mk("narrow", "Cast", n.meta, steps[-1].id, shift=0))
    else:
        if s1 > s2:
            k = min(s1 - s2, l1 - 1)
            steps.append(mk("tr", "TR", QuantMeta(l1 - k, s2), cur, shift=k))
        elif s2 > s1:
            steps.append(mk("shl", "Cast", QuantMeta(l1, s2), cur, shift=s2 - s1))
        steps.append(mk("ext", "Ext", n.meta, steps[-1].id if steps else cur))
    # the last step takes over the requant's id so consumers stay wired
    last = steps[-1]
    for s in steps:
        s.attrs.setdefault("from", n.id)
        if "block" in n.attrs:
            s.attrs["block"] = n.attrs["block"]
    old = last.id
    last.id = n.id
    for s in steps:
        s.inputs = [n.id if i == old else i for i in s.inputs]
    return steps


def _single_consumer(g: Graph, node_id: str) -> Node | None:
    cons = g.consumers(node_id)
    return cons[0] if len(cons) == 1 else None


def _fits(bounds, shift: int, bits: int) -> bool:
    lo, hi = _signed_range(bits)
    return bounds is not None and bounds[0] << shift >= lo and bounds[1] << shift <= hi


def _try_rewrite(g: Graph, n: Node) -> str | None:
    """Apply one rewrite rooted at ``n``; return its description or None."""
    c = _single_consumer(g, n.id)
    if c is None:
        return None
    if n.op == "Trunc" and (c.op == "Ext" or (c.op == "Cast" and c.attrs.get("shift", 0) == 0)):
        l, s = n.meta.bits, n.attrs["shift"]
        if s == 0:
            return None
        tr = Node(f"{n.id}.tr", "TR", list(n.inputs), QuantMeta(l - s, n.meta.scale_log2), n.shape, {"shift": s})
        ex = Node(n.id, "Ext", [tr.id], n.meta, n.shape, {})
        for x in (tr, ex):
            for key in ("block", "from"):
                if key in n.attrs:
                    x.attrs[key] = n.attrs[key]
        g.replace_nodes([n.id], [tr, ex])
        return f"decompose {n.id}: Trunc({l},{s}) -> TR then Ext({l - s}->{l})"
    if n.op == "Ext" and c.op == "Ext":
        src = g[n.inputs[0]]
        fused = Node(c.id, "Ext", [src.id], c.meta, c.shape, dict(c.attrs))
        g.replace_nodes([n.id, c.id], [fused])
        return f"fuse {n.id}+{c.id}: Ext({src.meta.bits}->{n.meta.bits}->{c.meta.bits}) -> Ext({src.meta.bits}->{c.meta.bits})"
    if n.op == "Ext" and c.op == "Cast" and c.attrs.get("shift", 0) > 0 and c.meta.bits == n.meta.bits:
        # extend, lossless shift, extend again: extend once, shift in the wide ring
        c2 = _single_consumer(g, c.id)
        k = c.attrs["shift"]
        if c2 is not None and c2.op == "Ext" and _fits(g[n.inputs[0]].bounds, k, n.meta.bits):
            src = g[n.inputs[0]]
            wide = Node(n.id, "Ext", [src.id], QuantMeta(c2.meta.bits, n.meta.scale_log2), n.shape, dict(n.attrs))
            sh = Node(c2.id, "Cast", [n.id], c2.meta, c2.shape, dict(c.attrs))
            g.replace_nodes([n.id, c.id, c2.id], [wide, sh])
            return (f"fuse {n.id}+{c2.id} across {c.id}: "
                    f"Ext({src.meta.bits}->{n.meta.bits}) shl {k} Ext(->{c2.meta.bits}) -> Ext({src.meta.bits}->{c2.meta.bits}) shl {k}")
    if n.op == "Cast" and n.attrs.get("shift", 0) == 0 and c.op == "Ext":
        src = g[n.inputs[0]]
        if _fits(src.bounds, 0, n.meta.bits):
            if c.meta.bits <= src.meta.bits:
                fused = Node(c.id, "Cast", [src.id], c.meta, c.shape, {**c.attrs, "shift": 0})
                what = f"Cast({c.meta.bits})"
            else:
                fused = Node(c.id, "Ext", [src.id], c.meta, c.shape, dict(c.attrs))
                what = f"Ext({src.meta.bits}->{c.meta.bits})"
            g.replace_nodes([n.id, c.id], [fused])
            return f"fold {n.id}+{c.id}: narrowing of a value that fits, then Ext -> {what}"
    if n.op == "Ext" and c.op == "Cast" and c.attrs.get("shift", 0) == 0:
        src = g[n.inputs[0]]
        if src.meta.bits <= c.meta.bits:
            if src.meta.bits == c.meta.bits:
                g.rewire(c.id, src.id)
                g.replace_nodes([n.id, c.id], [])
                return f"drop {n.id}+{c.id}: extension undone by the narrowing"
            fused = Node(c.id, "Ext", [src.id], c.meta, c.shape, dict(c.attrs))
            fused.attrs.pop("shift", None)
            g.replace_nodes([n.id, c.id], [fused])
            return f"fuse {n.id}+{c.id}: Ext then narrow -> Ext({src.meta.bits}->{c.meta.bits})"
    return None


def fuse_protocols(graph: Graph, order: str = "forward", seed: int | None = None, lam: int = 128) -> tuple[Graph, PassReport]:
    """Expand re-quantizations and rewrite Trunc/Ext chains to a fixpoint.

    ``order`` picks the traversal used when searching for the next rewrite
    (``forward``, ``backward`` or ``random`` with ``seed``); the normal form
    does not depend on it.
    """
    g = graph.copy()
    report = PassReport(before=_per_node_totals(graph, lam))
    for n in [n for n in g.nodes if n.op == "Requant"]:
        steps = _expand_requant(g, n)
        if [s.op for s in steps] != ["Requant"]:
            g.replace_nodes([n.id], steps)
    g = analyze_bounds(g)
    rng = np.random.default_rng(seed)
    for _ in range(len(g.nodes) * 4 + 1):
        ids = [n.id for n in g.nodes]
        if order == "backward":
            ids.reverse()
        elif order == "random":
            rng.shuffle(ids)
        applied = None
        for nid in ids:
            if nid in g:
                applied = _try_rewrite(g, g[nid])
                if applied:
                    break
        if applied is None:
            break
        report.rewrites.append(applied)
        g = analyze_bounds(g)
    g.options["fused"] = True
    g.validate()
    report.after = _per_node_totals(g, lam)
    return g, report


# ---------------------------------------------------------------------------
# estimation


def _input_nonneg(g: Graph, n: Node) -> bool:
    return bool(n.inputs) and g[n.inputs[0]].sign == SignFact.NONNEG


def _numel(shape) -> int:
    return int(np.prod(shape, dtype=np.int64)) if shape else 1


def node_cost(g: Graph, n: Node, lam: int = 128, variant=None) -> dict:
    """Predicted metered bits of one node, keyed by meter label."""
    policy = variant if variant is not None else g.options.get("variant", "adaptive")
    nn = _input_nonneg(g, n)
    src = g[n.inputs[0]] if n.inputs else None
    if n.op == "Input":
        return {"share": costs.share_bits(_numel(n.shape), n.meta.bits)}
    if n.op == "Output":
        return {"reveal": costs.share_bits(_numel(n.shape), n.meta.bits)}
    if n.op in ("Conv", "FC"):
        plan = resolve_variant(policy, layer_dims(g, n), lam, nn)
        return dict(plan.predicted_bits)
    num = _numel(src.shape) if src is not None else 0
    if n.op == "ReLU":
        return {"relu": costs.relu_bits(num, n.meta.bits, nn, lam)}
    if n.op == "Requant":
        m = src.meta
        return {"requant": costs.requant_bits(num, m.bits, m.scale_log2, n.meta.bits, n.meta.scale_log2, nn, lam)}
    if n.op == "Ext":
        return {"ext": costs.ext_bits(num, src.meta.bits, n.meta.bits, nn, lam)}
    if n.op == "Trunc":
        return {"trunc": costs.trunc_bits(num, src.meta.bits, n.attrs["shift"], nn, lam)}
    if n.op == "TR":
        return {"tr": costs.tr_bits(num, src.meta.bits, n.attrs["shift"], nn, lam)}
    if n.op == "AvgPool":
        return {"avgpool": costs.avgpool_bits(num, src.meta.bits, n.attrs["kernel"], nn, lam)}
    if n.op == "MaxPool":
        return {"maxpool": costs.maxpool_bits(_numel(n.shape), src.meta.bits, n.attrs["kernel"], nn, lam)}
    return {}


def layer_dims(g: Graph, n: Node) -> MatmulDims:
    src = g[n.inputs[0]]
    if n.op == "Conv":
        d1, d2, d3 = n.attrs["geometry"].dims
    else:
        d1, d2, d3 = n.attrs["d1"], n.attrs["d2"], 1
    return MatmulDims(d1, d2, d3, n.attrs["w_meta"].bits, src.meta.bits, n.meta.bits)


def _per_node_totals(g: Graph, lam: int) -> dict:
    return {n.id: sum(node_cost(g, n, lam).values()) for n in g.nodes}


@dataclass
class GraphEstimate:
    per_node: dict
    labels: dict
    variants: dict
    total: int


def estimate_graph_comm(graph: Graph, lam: int = 128, include_io: bool = False) -> GraphEstimate:
    """Sum the cost model over the nodes.

    With ``include_io`` the input sharing, the output reveal and the OT setup
    are counted too, which makes the total match a full metered run.
    """
    per_node, labels, variants = {}, {}, {}
    for n in graph.nodes:
        if not include_io and n.op in ("Input", "Output"):
            continue
        c = node_cost(graph, n, lam)
        per_node[n.id] = c
        for k, v in c.items():
            labels[k] = labels.get(k, 0) + v
        if n.op in ("Conv", "FC"):
            plan = resolve_variant(graph.options.get("variant", "adaptive"), layer_dims(graph, n), lam, _input_nonneg(graph, n))
            variants[n.id] = int(plan.variant)
    if include_io and graph.nodes:
        labels["ot.setup"] = lam
    ot = sum(v for k, v in labels.items() if k not in ("share", "reveal", "ot.setup"))
    total = sum(labels.values())
    labels["ot"] = ot
    return GraphEstimate(per_node, labels, variants, total)


# ---------------------------------------------------------------------------
# weights and inputs


def _node_rng(seed: int, node_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(node_id.encode())])


def make_weights(graph: Graph, seed: int = 0) -> dict[str, RingTensor]:
    """Seeded uniform weights over the full signed range of each layer."""
    out = {}
    for n in graph.nodes:
        if n.op not in ("Conv", "FC"):
            continue
        wm = n.attrs["w_meta"]
        lo, hi = _signed_range(wm.bits)
        if n.op == "Conv":
            geo = n.attrs["geometry"]
            shape = (geo.c_out, geo.c_in, geo.kernel, geo.kernel)
        else:
            shape = (n.attrs["d1"], n.attrs["d2"])
        out[n.id] = RingTensor.from_signed(_node_rng(seed, n.id).integers(lo, hi + 1, shape), wm)
    return out


def make_input(graph: Graph, seed: int = 0) -> RingTensor:
    n = graph.nodes[0]
    lo, hi = n.bounds or _signed_range(n.meta.bits)
    return RingTensor.from_signed(_node_rng(seed, "__input__").integers(lo, hi + 1, n.shape), n.meta)


# ---------------------------------------------------------------------------
# execution


def _as_meta(t: RingTensor, meta: QuantMeta) -> RingTensor:
    return RingTensor(t.data & mask(meta.bits), meta)


def run_plain(graph: Graph, weights: dict, x: RingTensor) -> dict[str, RingTensor]:
    """Plaintext reference execution; returns every node's output."""
    vals: dict[str, RingTensor] = {}
    for n in graph.nodes:
        ins = [vals[i] for i in n.inputs]
        if n.op == "Input":
            if x.shape != n.shape or x.meta.bits != n.meta.bits:
                raise GraphError("input does not match the graph")
            y = _as_meta(x, n.meta)
        elif n.op == "Conv":
            y = conv_plain(ins[0], weights[n.id], n.attrs["geometry"], n.meta.bits)
        elif n.op == "FC":
            y = matmul_plain(weights[n.id], ins[0].reshape(-1, 1), n.meta.bits).reshape(-1)
        elif n.op == "ReLU":
            y = relu_plain(ins[0])
        elif n.op == "Requant":
            y = requant_plain(ins[0], n.meta)
        elif n.op == "Ext":
            y = ext_plain(ins[0], n.meta.bits)
        elif n.op == "Trunc":
            y = trunc_plain(ins[0], n.attrs["shift"])
        elif n.op == "TR":
            y = tr_plain(ins[0], n.attrs["shift"])
        elif n.op == "Cast":
            t = shl(ins[0].data, n.attrs.get("shift", 0), ins[0].bits)
            y = RingTensor(t & mask(n.meta.bits), n.meta)
        elif n.op == "ResidualAdd":
            y = RingTensor((ins[0].data + ins[1].data) & mask(n.meta.bits), n.meta)
        elif n.op == "AvgPool":
            y = sum_pool_plain(ins[0], n.attrs["kernel"])
        elif n.op == "MaxPool":
            y = max_pool_plain(ins[0], n.attrs["kernel"])
        elif n.op == "Output":
            y = ins[0]
        else:
            raise GraphError(f"cannot execute {n.op}")
        vals[n.id] = _as_meta(y, n.meta)
    return vals


@dataclass
class NodeRun:
    id: str
    op: str
    measured_bits: int
    rounds: int
    variant: int | None = None


def run_secure(p: Party, graph: Graph, weights: dict | None, x: RingTensor | None, keep: bool = False):
    """Two-party execution from one party's side.

    The server passes ``weights``, the client passes ``x``. Returns the
    revealed output (client) or ``None`` (server), the per-node traffic, and
    with ``keep`` every node's output share.
    """
    variant = graph.options.get("variant", "adaptive")
    shares: dict[str, Share] = {}
    runs: list[NodeRun] = []
    result = None
    for n in graph.nodes:
        before = p.meter.snapshot()
        ins = []
        for i in n.inputs:
            s = shares[i]
            ins.append(Share(s.tensor, s.party, graph[i].sign))
        chosen = None
        if n.op == "Input":
            y = share_input(p, x if p.role == Role.CLIENT else None, Role.CLIENT, n.meta, n.shape)
        elif n.op in ("Conv", "FC"):
            w = weights[n.id] if p.is_server else None
            if n.op == "Conv":
                y, plan = secure_conv(p, ins[0], w, n.attrs["geometry"], n.attrs["w_meta"], variant, n.meta.bits)
            else:
                xin = ins[0].reshape(-1, 1)
                y, plan = secure_matmul(p, w, xin, n.attrs["w_meta"], n.attrs["d1"], variant, n.meta.bits)
                y = y.reshape(-1)
            chosen = int(plan.variant)
        elif n.op == "ReLU":
            y = relu(p, ins[0])
        elif n.op == "Requant":
            y = requant(p, ins[0], n.meta)
        elif n.op == "Ext":
            y = ext(p, ins[0], n.meta.bits)
        elif n.op == "Trunc":
            y = trunc(p, ins[0], n.attrs["shift"])
        elif n.op == "TR":
            y = trunc_reduce(p, ins[0], n.attrs["shift"])
        elif n.op == "Cast":
            s = ins[0]
            y = s.derive(shl(s.data, n.attrs.get("shift", 0), s.bits), n.meta)
        elif n.op == "ResidualAdd":
            y = add(ins[0], ins[1])
        elif n.op == "AvgPool":
            y = avg_pool(p, ins[0], n.attrs["kernel"])
        elif n.op == "MaxPool":
            y = max_pool(p, ins[0], n.attrs["kernel"])
        elif n.op == "Output":
            y = ins[0]
            result = reveal(p, y, Role.CLIENT)
        else:
            raise GraphError(f"cannot execute {n.op}")
        y = Share(RingTensor(y.data & mask(n.meta.bits), n.meta), p.role, n.sign)
        shares[n.id] = y
        after = p.meter.snapshot()
        runs.append(NodeRun(n.id, n.op, 8 * (after[0] - before[0]), after[1] - before[1], chosen))
    return result, runs, (shares if keep else None)


def configure(graph: Graph, residual: str = "simplified", signs: bool = True, fuse: bool = True, variant="adaptive") -> Graph:
    """Apply the pass pipeline in its fixed order with the given switches."""
    g = graph.copy()
    if residual == "simplified" and g.options.get("residual") != "simplified":
        g = lower_residual_simplified(g)
    if signs:
        g = propagate_signs(g)
    else:
        g = analyze_bounds(g, keep_signs=False)
    if fuse:
        g, _ = fuse_protocols(g)
    g.options["variant"] = variant
    return g


def load_config(path) -> dict:
    import yaml

    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    if not isinstance(cfg, dict):
        raise GraphError(f"{path}: not a mapping")
    return cfg


def dump_graph(graph: Graph) -> str:
    import yaml

    return yaml.safe_dump(graph.to_dict(), sort_keys=False)
