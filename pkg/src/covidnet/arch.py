"""Architecture graphs built from PEPX blocks and 1x1 hub layers.

A graph is a set of :class:`LayerNode` objects wired by their ``inputs``.
Convolutions with several inputs concatenate them along channels first, which
is how hub layers merge their long-range connections.
"""
from dataclasses import dataclass, field, fields
from math import prod
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ArchitectureError, ShapeError

CONV_KINDS = ("conv",)
KINDS = ("input", "conv", "maxpool", "add", "gap", "dense", "softmax")

# Published size of the production network; reference only, never a target.
REFERENCE_PARAMS_M = 11.75
REFERENCE_MACS_G = 7.50


@dataclass(frozen=True)
class PEPXSpec:
    in_channels: int
    proj1_channels: int
    expand_channels: int
    proj2_channels: int
    out_channels: int

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ArchitectureError(f"PEPX {f.name} must be positive, got {getattr(self, f.name)}")
        if not self.proj1_channels < self.in_channels:
            raise ArchitectureError(
                f"PEPX first projection must reduce channels: proj1={self.proj1_channels} >= in={self.in_channels}"
            )
        if not self.expand_channels > self.proj1_channels:
            raise ArchitectureError(
                f"PEPX expansion must raise channels: expand={self.expand_channels} <= proj1={self.proj1_channels}"
            )
        if not self.proj2_channels < self.expand_channels:
            raise ArchitectureError(
                f"PEPX second projection must reduce channels: proj2={self.proj2_channels} >= expand={self.expand_channels}"
            )

    @property
    def residual(self):
        return self.in_channels == self.out_channels


@dataclass
class LayerNode:
    id: str
    kind: str
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArchitectureError(f"node {self.id!r}: unknown kind {self.kind!r}")
        self.inputs = tuple(self.inputs)

    def conv_spec(self):
        a = self.attrs
        return T.ConvSpec(
            kernel_h=a["kernel"], kernel_w=a["kernel"], in_channels=a["in_channels"],
            out_channels=a["out_channels"], stride=a["stride"], padding=a["pad"], groups=a["groups"],
        )


def conv_node(node_id, inputs, in_ch, out_ch, kernel=1, stride=1, pad=0, groups=1, act="relu"):
    return LayerNode(node_id, "conv", tuple(inputs), dict(
        kernel=kernel, stride=stride, pad=pad, groups=groups,
        in_channels=in_ch, out_channels=out_ch, act=act,
    ))


@dataclass
class Fragment:
    nodes: list
    input_id: str
    output_id: str

    @property
    def convs(self):
        return [n for n in self.nodes if n.kind == "conv"]

    @property
    def residual(self):
        return any(n.kind == "add" and self.input_id in n.inputs for n in self.nodes)


def build_pepx(spec: PEPXSpec, name="pepx", source="input") -> Fragment:
    """Projection, expansion, 3x3 depthwise, projection, extension.

    A residual addition from ``source`` closes the block when input and output
    widths agree.
    """
    s = spec
    nodes = [
        conv_node(f"{name}.proj1", [source], s.in_channels, s.proj1_channels),
        conv_node(f"{name}.expand", [f"{name}.proj1"], s.proj1_channels, s.expand_channels),
        conv_node(f"{name}.dw", [f"{name}.expand"], s.expand_channels, s.expand_channels,
                  kernel=3, pad=1, groups=s.expand_channels),
        conv_node(f"{name}.proj2", [f"{name}.dw"], s.expand_channels, s.proj2_channels),
        conv_node(f"{name}.extend", [f"{name}.proj2"], s.proj2_channels, s.out_channels,
                  act="none" if s.residual else "relu"),
    ]
    out = f"{name}.extend"
    if s.residual:
        nodes.append(LayerNode(f"{name}.add", "add", (out, source), {"act": "relu"}))
        out = f"{name}.add"
    return Fragment(nodes, source, out)


# --- configuration ----------------------------------------------------------

@dataclass
class ArchConfig:
    input_size: int = 64
    input_channels: int = 1
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_channels: int = 0  # 0 -> first stage width
    widths: tuple = (32, 64, 128, 256)
    blocks_per_stage: tuple = (2, 2, 2, 2)
    proj_ratio: float = 0.5
    expand_ratio: float = 2.0
    hub_policy: str = "per-stage"
    head_hidden: int = 64
    num_classes: int = 3

    def __post_init__(self):
        self.widths = tuple(int(w) for w in _as_tuple(self.widths))
        blocks = tuple(int(b) for b in _as_tuple(self.blocks_per_stage))
        if len(blocks) == 1 and len(self.widths) > 1:
            blocks = blocks * len(self.widths)
        self.blocks_per_stage = blocks
        if not self.widths:
            raise ArchitectureError("at least one stage width is required")
        if len(blocks) != len(self.widths):
            raise ArchitectureError(
                f"blocks_per_stage has {len(blocks)} entries but there are {len(self.widths)} stages"
            )
        if self.hub_policy not in ("per-stage", "none"):
            raise ArchitectureError(f"hub_policy must be 'per-stage' or 'none', got {self.hub_policy!r}")
        for name in ("input_size", "input_channels", "stem_kernel", "stem_stride", "head_hidden", "num_classes"):
            if getattr(self, name) < 1:
                raise ArchitectureError(f"{name} must be positive, got {getattr(self, name)}")
        if any(w < 1 for w in self.widths) or any(b < 1 for b in blocks):
            raise ArchitectureError("stage widths and block counts must be positive")
        if self.stem_kernel % 2 == 0:
            raise ArchitectureError(f"stem_kernel must be odd, got {self.stem_kernel}")

    @property
    def stages(self):
        return len(self.widths)

    @property
    def input_shape(self):
        return (self.input_channels, self.input_size, self.input_size)

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]):
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        stages = None
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key == "stages":
                stages = int(raw)
                continue
            if key not in known:
                raise ArchitectureError(f"unknown architecture key {key!r}")
            default = known[key].default
            if isinstance(default, tuple):
                kwargs[key] = tuple(int(v) for v in str(raw).split(",") if v.strip())
            elif isinstance(default, float):
                kwargs[key] = float(raw)
            elif isinstance(default, int):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = str(raw).strip()
        cfg = cls(**kwargs)
        if stages is not None and stages != cfg.stages:
            raise ArchitectureError(f"stages={stages} disagrees with {cfg.stages} configured widths")
        return cfg

    def to_mapping(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out


def _as_tuple(v):
    if isinstance(v, (list, tuple)):
        return tuple(v)
    if isinstance(v, str):
        return tuple(x for x in v.split(",") if x.strip())
    return (v,)


def pepx_channels(in_ch, width, cfg: ArchConfig) -> PEPXSpec:
    return PEPXSpec(
        in_channels=in_ch,
        proj1_channels=max(1, int(in_ch * cfg.proj_ratio)),
        expand_channels=max(1, int(round(width * cfg.expand_ratio))),
        proj2_channels=max(1, int(width * cfg.proj_ratio)),
        out_channels=width,
    )


# --- graph ------------------------------------------------------------------

class ArchGraph:
    def __init__(self, nodes: Sequence[LayerNode], hub_nodes=(), config: ArchConfig = None):
        self.nodes = {}
        for n in nodes:
            if n.id in self.nodes:
                raise ArchitectureError(f"duplicate node id {n.id!r}")
            self.nodes[n.id] = n
        self.hub_nodes = tuple(hub_nodes)
        self.config = config

    @property
    def edges(self):
        return [(src, n.id) for n in self.nodes.values() for src in n.inputs]

    @property
    def long_range_edges(self):
        hubs = set(self.hub_nodes)
        return [(s, d) for s, d in self.edges if d in hubs]

    @property
    def input_id(self):
        ids = [n.id for n in self.nodes.values() if n.kind == "input"]
        if len(ids) != 1:
            raise ArchitectureError(f"graph must have exactly one input node, found {len(ids)}")
        return ids[0]

    @property
    def output_id(self):
        consumed = {s for s, _ in self.edges}
        ids = [i for i in self.nodes if i not in consumed]
        if len(ids) != 1:
            raise ArchitectureError(f"graph must have exactly one output node, found {sorted(ids)}")
        return ids[0]

    def topo_order(self):
        """Kahn's algorithm; ties broken by node id so storage order is irrelevant."""
        for s, d in self.edges:
            if s not in self.nodes:
                raise ArchitectureError(f"node {d!r} reads from unknown node {s!r}")
        indeg = {i: len(set(n.inputs)) for i, n in self.nodes.items()}
        users = {i: set() for i in self.nodes}
        for n in self.nodes.values():
            for s in set(n.inputs):
                users[s].add(n.id)
        ready = sorted(i for i, d in indeg.items() if d == 0)
        order = []
        while ready:
            cur = ready.pop(0)
            order.append(cur)
            for u in sorted(users[cur]):
                indeg[u] -= 1
                if indeg[u] == 0:
                    ready.append(u)
            ready.sort()
        if len(order) != len(self.nodes):
            raise ArchitectureError("graph contains a cycle")
        return order

    def infer_shapes(self, input_shape=None):
        """Per-node output shape, (C, H, W) for feature maps and (F,) for vectors."""
        shapes = {}
        for nid in self.topo_order():
            n = self.nodes[nid]
            a = n.attrs
            ins = [shapes[i] for i in n.inputs]
            if n.kind == "input":
                shapes[nid] = tuple(input_shape) if input_shape is not None else tuple(a["shape"])
            elif n.kind == "conv":
                _require_maps(n, ins)
                chans = sum(s[0] for s in ins)
                if chans != a["in_channels"]:
                    raise ShapeError(f"node {nid!r}: merged input has {chans} channels, expected {a['in_channels']}")
                spec = n.conv_spec()
                ho, wo = spec.output_hw(*ins[0][1:])
                if ho < 1 or wo < 1:
                    raise ShapeError(f"node {nid!r}: spatial size {ins[0][1:]} too small")
                shapes[nid] = (a["out_channels"], ho, wo)
            elif n.kind == "maxpool":
                (c, h, w), = ins
                if h < a["window"] or w < a["window"]:
                    raise ShapeError(f"node {nid!r}: spatial size {(h, w)} smaller than pool window")
                shapes[nid] = (c, (h - a["window"]) // a["stride"] + 1, (w - a["window"]) // a["stride"] + 1)
            elif n.kind == "add":
                if len(ins) != 2 or ins[0] != ins[1]:
                    raise ShapeError(f"node {nid!r}: residual add needs two equal shapes, got {ins}")
                shapes[nid] = ins[0]
            elif n.kind == "gap":
                shapes[nid] = (ins[0][0],)
            elif n.kind == "dense":
                if ins[0] != (a["in_features"],):
                    raise ShapeError(f"node {nid!r}: input has shape {ins[0]}, expected ({a['in_features']},)")
                shapes[nid] = (a["out_features"],)
            elif n.kind == "softmax":
                shapes[nid] = ins[0]
        return shapes

    def validate(self, input_shape=None):
        self.topo_order()
        inp, out = self.input_id, self.output_id
        for h in self.hub_nodes:
            node = self.nodes.get(h)
            if node is None or node.kind != "conv" or node.attrs["kernel"] != 1:
                raise ArchitectureError(f"hub {h!r} must be a 1x1 convolution")
            if len(set(node.inputs)) < 2:
                raise ArchitectureError(f"hub {h!r} receives {len(set(node.inputs))} connection(s), needs >= 2")
        if self.nodes[out].kind != "softmax":
            raise ArchitectureError(f"output node {out!r} must be a softmax, is {self.nodes[out].kind}")
        shapes = self.infer_shapes(input_shape)
        n_cls = self.config.num_classes if self.config else 3
        if shapes[out] != (n_cls,):
            raise ArchitectureError(f"output produces shape {shapes[out]}, expected a {n_cls}-way distribution")
        return shapes

    def without_edge(self, src, dst):
        """Copy with one connection removed; a concatenating conv shrinks its input width."""
        shapes = self.infer_shapes()
        new_nodes = []
        for n in self.nodes.values():
            n = LayerNode(n.id, n.kind, n.inputs, dict(n.attrs))
            if n.id == dst:
                if src not in n.inputs:
                    raise ArchitectureError(f"no edge {src!r} -> {dst!r}")
                n.inputs = tuple(i for i in n.inputs if i != src)
                if n.kind == "conv":
                    n.attrs["in_channels"] = sum(shapes[i][0] for i in n.inputs)
            new_nodes.append(n)
        return ArchGraph(new_nodes, self.hub_nodes, self.config)

    def reordered(self, permutation):
        nodes = list(self.nodes.values())
        return ArchGraph([nodes[i] for i in permutation], self.hub_nodes, self.config)


def _require_maps(node, ins):
    if not ins:
        raise ShapeError(f"node {node.id!r} has no inputs")
    hw = {s[1:] for s in ins}
    if any(len(s) != 3 for s in ins) or len(hw) != 1:
        raise ShapeError(f"node {node.id!r}: cannot merge inputs with shapes {ins}")


def build_covidnet(config: ArchConfig = None) -> ArchGraph:
    cfg = config or ArchConfig()
    stem_ch = cfg.stem_channels or cfg.widths[0]
    k = cfg.stem_kernel
    nodes = [
        LayerNode("input", "input", (), {"shape": cfg.input_shape}),
        conv_node("stem", ["input"], cfg.input_channels, stem_ch, kernel=k, stride=cfg.stem_stride, pad=k // 2),
    ]
    hubs = []
    cur, cur_ch = "stem", stem_ch
    for s, (width, n_blocks) in enumerate(zip(cfg.widths, cfg.blocks_per_stage), start=1):
        if s > 1:
            nodes.append(LayerNode(f"s{s}.pool", "maxpool", (cur,), {"window": 2, "stride": 2}))
            cur = f"s{s}.pool"
        stage_in, stage_in_ch = cur, cur_ch
        outs = []
        for b in range(1, n_blocks + 1):
            try:
                spec = pepx_channels(cur_ch, width, cfg)
            except ArchitectureError as exc:
                raise ArchitectureError(f"stage {s} block {b}: {exc}") from None
            frag = build_pepx(spec, name=f"s{s}.b{b}", source=cur)
            nodes.extend(frag.nodes)
            cur, cur_ch = frag.output_id, width
            outs.append(cur)
        if cfg.hub_policy == "per-stage":
            hub = f"s{s}.hub"
            sources = [stage_in] + outs
            nodes.append(conv_node(hub, sources, stage_in_ch + width * len(outs), width))
            hubs.append(hub)
            cur = hub
    nodes += [
        LayerNode("gap", "gap", (cur,)),
        LayerNode("fc1", "dense", ("gap",), {"in_features": cur_ch, "out_features": cfg.head_hidden, "act": "relu"}),
        LayerNode("fc2", "dense", ("fc1",), {"in_features": cfg.head_hidden, "out_features": cfg.num_classes, "act": "none"}),
        LayerNode("softmax", "softmax", ("fc2",)),
    ]
    graph = ArchGraph(nodes, hubs, cfg)
    graph.validate()
    return graph


# --- parameters -------------------------------------------------------------

def param_shapes(graph_or_nodes):
    nodes = getattr(graph_or_nodes, "nodes", graph_or_nodes)
    nodes = nodes.values() if isinstance(nodes, dict) else nodes
    shapes = {}
    for n in nodes:
        if n.kind == "conv":
            shapes[f"{n.id}.weight"] = n.conv_spec().weight_shape
            shapes[f"{n.id}.bias"] = (n.attrs["out_channels"],)
        elif n.kind == "dense":
            shapes[f"{n.id}.weight"] = (n.attrs["out_features"], n.attrs["in_features"])
            shapes[f"{n.id}.bias"] = (n.attrs["out_features"],)
    return shapes


def init_params(graph, seed=0):
    """Kaiming-normal (fan-in) weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in sorted(param_shapes(graph).items()):
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = prod(shape[1:])
            params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return params


def count_params(graph_or_nodes) -> int:
    return int(sum(prod(s) for s in param_shapes(graph_or_nodes).values()))


@dataclass
class ComplexityReport:
    total_params: int
    total_macs: int
    per_layer: list  # (layer id, params, macs)

    def dump(self):
        lines = [f"{'layer':<24} {'params':>12} {'macs':>14}"]
        for lid, p, m in self.per_layer:
            lines.append(f"{lid:<24} {p:>12d} {m:>14d}")
        lines.append(f"{'TOTAL':<24} {self.total_params:>12d} {self.total_macs:>14d}")
        lines.append(f"params_M = {self.total_params / 1e6:.4f}")
        lines.append(f"macs_G = {self.total_macs / 1e9:.4f}")
        return "\n".join(lines) + "\n"


def complexity(graph: ArchGraph, input_shape=None) -> ComplexityReport:
    shapes = graph.infer_shapes(input_shape)
    pshapes = param_shapes(graph)
    rows = []
    for nid in graph.topo_order():
        n = graph.nodes[nid]
        p = sum(prod(pshapes[k]) for k in (f"{nid}.weight", f"{nid}.bias") if k in pshapes)
        if n.kind == "conv":
            a = n.attrs
            _, ho, wo = shapes[nid]
            m = a["kernel"] * a["kernel"] * (a["in_channels"] // a["groups"]) * a["out_channels"] * ho * wo
        elif n.kind == "dense":
            m = n.attrs["in_features"] * n.attrs["out_features"]
        else:
            m = 0
        if n.kind in ("conv", "dense"):
            rows.append((nid, int(p), int(m)))
    return ComplexityReport(sum(r[1] for r in rows), sum(r[2] for r in rows), rows)


def count_macs(graph: ArchGraph, input_shape=None) -> int:
    return complexity(graph, input_shape).total_macs


def describe(graph: ArchGraph) -> str:
    """One line per node in topological order: ``id kind key=value ... <- inputs``."""
    hubs = set(graph.hub_nodes)
    lines = []
    for nid in graph.topo_order():
        n = graph.nodes[nid]
        a = n.attrs
        if n.kind == "conv":
            desc = (f"k={a['kernel']}x{a['kernel']} s={a['stride']} p={a['pad']} g={a['groups']} "
                    f"in={a['in_channels']} out={a['out_channels']} act={a['act']}")
        elif n.kind == "input":
            desc = "shape=" + "x".join(str(v) for v in a["shape"])
        elif n.kind == "maxpool":
            desc = f"window={a['window']} stride={a['stride']}"
        elif n.kind == "dense":
            desc = f"in={a['in_features']} out={a['out_features']} act={a['act']}"
        elif n.kind == "add":
            desc = f"act={a['act']}"
        else:
            desc = "-"
        if nid in hubs:
            desc += " hub"
        src = ",".join(n.inputs) if n.inputs else "-"
        lines.append(f"{nid} {n.kind} {desc} <- {src}")
    return "\n".join(lines) + "\n"


# --- evaluation -------------------------------------------------------------

def forward(graph: ArchGraph, params: Mapping, x):
    """Evaluate the graph on an NCHW batch; returns (N, num_classes) probabilities.

    ``params`` maps parameter names to :class:`Tensor` (or arrays, treated as
    constants).
    """
    x = T.as_tensor(x)
    vals = {}
    p = {k: T.as_tensor(v) for k, v in params.items()}
    for nid in graph.topo_order():
        n = graph.nodes[nid]
        a = n.attrs
        ins = [vals[i] for i in n.inputs]
        if n.kind == "input":
            want = tuple(a["shape"])
            if x.ndim != 4 or x.shape[1:] != want:
                raise ShapeError(f"node {nid!r}: input batch has shape {x.shape}, expected (N, {', '.join(map(str, want))})")
            y = x
        elif n.kind == "conv":
            if len(ins) > 1:
                if len({t.shape[2:] for t in ins}) != 1:
                    raise ShapeError(f"node {nid!r}: cannot concatenate inputs with shapes {[t.shape for t in ins]}")
                inp = T.concat(ins, axis=1)
            else:
                inp = ins[0]
            try:
                y = T.conv2d(inp, p[f"{nid}.weight"], p[f"{nid}.bias"], n.conv_spec())
            except ShapeError as exc:
                raise ShapeError(f"node {nid!r}: {exc}") from None
            if a["act"] == "relu":
                y = T.relu(y)
        elif n.kind == "maxpool":
            y = T.max_pool(ins[0], a["window"], a["stride"])
        elif n.kind == "add":
            if ins[0].shape != ins[1].shape:
                raise ShapeError(f"node {nid!r}: residual shapes {ins[0].shape} and {ins[1].shape} differ")
            y = T.add(ins[0], ins[1])
            if a.get("act") == "relu":
                y = T.relu(y)
        elif n.kind == "gap":
            y = T.global_avg_pool(ins[0])
        elif n.kind == "dense":
            y = T.dense(ins[0], p[f"{nid}.weight"], p[f"{nid}.bias"])
            if a["act"] == "relu":
                y = T.relu(y)
        elif n.kind == "softmax":
            y = T.softmax(ins[0], axis=-1)
        vals[nid] = y
    return vals[graph.output_id]


def predict(graph, params, images, batch_size=64):
    """No-grad batched evaluation returning a probability array."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None]
    outs = [forward(graph, params, images[i : i + batch_size]).data for i in range(0, len(images), batch_size)]
    return np.concatenate(outs, axis=0)
