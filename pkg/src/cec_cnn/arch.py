"""Blocks and assembly of the consecutive expansion-contraction network.

The network is held as a flat, topologically ordered graph of primitive
nodes. Forward evaluation, symbolic shape walking, the direct-BP audit and
receptive-field analysis all walk the same node list.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .ops import BatchNormParams, ConvParams, LinearParams
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor


class ArchitectureError(ValueError):
    """An ArchitectureSpec violates the topology rules."""


def _is_pow2(v: int) -> bool:
    return v > 0 and (v & (v - 1)) == 0


def default_resolutions(input_size: int) -> Tuple[int, ...]:
    res = [input_size]
    while res[-1] > 8:
        res.append(res[-1] // 2)
    return tuple(res)


@dataclass(frozen=True)
class ArchitectureSpec:
    input_channels: int = 1
    input_size: int = 32
    stem_channels: int = 8
    resolutions: Tuple[int, ...] = ()
    resblocks_per_stage: int = 2
    num_parts: int = 5
    num_classes: int = 2

    def __post_init__(self):
        if not self.resolutions:
            object.__setattr__(self, "resolutions", default_resolutions(self.input_size))
        else:
            object.__setattr__(self, "resolutions", tuple(int(r) for r in self.resolutions))
        self.validate()

    def validate(self) -> None:
        if self.input_size not in (32, 64):
            raise ArchitectureError(f"input_size must be 32 or 64, got {self.input_size}")
        if self.num_parts != 5:
            raise ArchitectureError(f"the network has exactly 5 parts, got {self.num_parts}")
        if self.num_classes < 2:
            raise ArchitectureError("num_classes must be at least 2")
        if self.input_channels < 1 or self.stem_channels < 1:
            raise ArchitectureError("channel counts must be positive")
        if self.resblocks_per_stage < 1:
            raise ArchitectureError("resblocks_per_stage must be at least 1")
        res = self.resolutions
        if len(res) < 2:
            raise ArchitectureError("need at least two resolutions for expansion/contraction")
        if res[0] != self.input_size:
            raise ArchitectureError(f"first resolution {res[0]} must equal input_size {self.input_size}")
        for r in res:
            if not _is_pow2(r) or r < 4:
                raise ArchitectureError(f"resolution {r} is not a power of two >= 4")
        for a, b in zip(res, res[1:]):
            if b * 2 != a:
                raise ArchitectureError(f"resolutions must halve stage by stage, got {a} -> {b}")

    @property
    def resolutions_per_part(self) -> List[Tuple[int, ...]]:
        down = tuple(self.resolutions)
        up = tuple(reversed(down))
        return [down if p % 2 == 0 else up for p in range(self.num_parts)]

    # -- persistence ------------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["arch"] = {
            "input_channels": str(self.input_channels),
            "input_size": str(self.input_size),
            "stem_channels": str(self.stem_channels),
            "resolutions": ",".join(str(r) for r in self.resolutions),
            "resblocks_per_stage": str(self.resblocks_per_stage),
            "num_parts": str(self.num_parts),
            "num_classes": str(self.num_classes),
        }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_section(cls, section) -> "ArchitectureSpec":
        res = section.get("resolutions", "")
        return cls(
            input_channels=int(section.get("input_channels", 1)),
            input_size=int(section.get("input_size", 32)),
            stem_channels=int(section.get("stem_channels", 8)),
            resolutions=tuple(int(v) for v in res.split(",") if v.strip()),
            resblocks_per_stage=int(section.get("resblocks_per_stage", 2)),
            num_parts=int(section.get("num_parts", 5)),
            num_classes=int(section.get("num_classes", 2)),
        )

    @classmethod
    def from_ini(cls, text: str) -> "ArchitectureSpec":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        return cls.from_section(cp["arch"])

    def spec_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# block parameters and functional forwards
# ---------------------------------------------------------------------------


def init_conv(rng: np.random.Generator, cin: int, cout: int, k: int, stride: int = 1, dtype=DEFAULT_DTYPE) -> ConvParams:
    fan_in = cin * k * k
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k)).astype(dtype)
    return ConvParams(Tensor(w, requires_grad=True), stride=stride)


def init_linear(rng: np.random.Generator, fin: int, fout: int, dtype=DEFAULT_DTYPE) -> LinearParams:
    w = rng.normal(0.0, np.sqrt(2.0 / fin), size=(fout, fin)).astype(dtype)
    return LinearParams(Tensor(w, requires_grad=True), Tensor(np.zeros(fout, dtype=dtype), requires_grad=True))


@dataclass
class ResBlockParams:
    conv1: ConvParams
    bn1: BatchNormParams
    conv2: ConvParams
    bn2: BatchNormParams
    conv3: ConvParams
    bn3: BatchNormParams

    @classmethod
    def create(cls, rng: np.random.Generator, channels: int, downsample: bool = False, dtype=DEFAULT_DTYPE):
        cout = 2 * channels if downsample else channels
        return cls(
            conv1=init_conv(rng, channels, cout, 1, stride=2 if downsample else 1, dtype=dtype),
            bn1=BatchNormParams.create(cout, dtype),
            conv2=init_conv(rng, cout, cout, 3, dtype=dtype),
            bn2=BatchNormParams.create(cout, dtype),
            conv3=init_conv(rng, cout, cout, 1, dtype=dtype),
            bn3=BatchNormParams.create(cout, dtype),
        )

    @property
    def downsample(self) -> bool:
        return self.conv1.stride == 2


def residual_branch(x: Tensor, p: ResBlockParams) -> Tensor:
    h = ops.relu(ops.batchnorm2d(ops.conv2d(x, p.conv1), p.bn1))
    h = ops.relu(ops.batchnorm2d(ops.conv2d(h, p.conv2), p.bn2))
    return ops.batchnorm2d(ops.conv2d(h, p.conv3), p.bn3)


def resblock_forward(x: Tensor, p: ResBlockParams, downsample: bool = False) -> Tensor:
    """Bottleneck block. The strided variant doubles channels and drops the addition."""
    if downsample != p.downsample:
        raise ShapeError("resblock parameters do not match the requested variant")
    f = residual_branch(x, p)
    if downsample:
        return f
    if f.shape != x.shape:
        raise ShapeError(f"identity resblock changed shape {x.shape} -> {f.shape}")
    return ops.add(f, x)


def ublock_forward(x: Tensor, skip: Tensor, p: ResBlockParams) -> Tensor:
    if x.shape[1] % 2:
        raise ShapeError(f"U-Block input needs an even channel count, got {x.shape[1]}")
    if skip.shape[2] != 2 * x.shape[2] or skip.shape[3] != 2 * x.shape[3]:
        raise ShapeError(f"U-Block skip {skip.shape} is not twice the resolution of {x.shape}")
    refined = resblock_forward(x, p)
    return ops.concat_channels(ops.upsample_bilinear2(ops.channel_halve_sum(refined)), skip)


def dblock_forward(x: Tensor, skip: Tensor, p: ResBlockParams) -> Tensor:
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"D-Block input needs even spatial dims, got {x.shape}")
    if skip.shape[2] * 2 != x.shape[2] or skip.shape[3] * 2 != x.shape[3]:
        raise ShapeError(f"D-Block skip {skip.shape} is not half the resolution of {x.shape}")
    refined = resblock_forward(x, p)
    return ops.concat_channels(ops.maxpool2x2(refined), skip)


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

PARAMETRIC_OPS = {"conv", "bn", "linear"}


@dataclass
class Node:
    name: str
    op: str
    inputs: Tuple[str, ...]
    params: object = None
    block: str = ""


@dataclass
class BlockInfo:
    name: str
    kind: str  # stem | resblock | resblock_down | ublock | dblock | head
    part: int
    input: str
    output: str
    in_channels: int
    out_channels: int
    skip: Optional[str] = None
    skip_channels: int = 0


@dataclass
class SkipPath:
    """A route that must stay free of learned transformations.

    ``source`` feeds input ``arm`` of the merge node ``merge``; ``trunk``
    optionally names a second segment (start node, merge arm) whose ops
    must also be parameter-free.
    """

    name: str
    kind: str  # identity | concat
    source: str
    merge: str
    arm: int
    trunk: Optional[Tuple[str, int]] = None


_EVAL = {
    "relu": lambda n, xs: ops.relu(xs[0]),
    "add": lambda n, xs: ops.add(xs[0], xs[1]),
    "maxpool": lambda n, xs: ops.maxpool2x2(xs[0]),
    "upsample": lambda n, xs: ops.upsample_bilinear2(xs[0]),
    "halve": lambda n, xs: ops.channel_halve_sum(xs[0]),
    "concat": lambda n, xs: ops.concat_channels(xs[0], xs[1]),
    "gap": lambda n, xs: ops.global_avg_pool(xs[0]),
    "flatten": lambda n, xs: ops.flatten(xs[0]),
    "conv": lambda n, xs: ops.conv2d(xs[0], n.params),
    "bn": lambda n, xs: ops.batchnorm2d(xs[0], n.params),
    "linear": lambda n, xs: ops.linear(xs[0], n.params),
}


class Model:
    """A built network: ordered nodes plus block and skip-path metadata."""

    def __init__(self, spec: Optional[ArchitectureSpec] = None):
        self.spec = spec
        self.nodes: Dict[str, Node] = {}
        self.blocks: List[BlockInfo] = []
        self.skip_paths: List[SkipPath] = []
        self.output: str = ""
        self.resblock_params: Dict[str, ResBlockParams] = {}
        self.head_input: str = ""

    # -- construction -----------------------------------------------------
    def add_node(self, name: str, op: str, inputs: Sequence[str] = (), params=None, block: str = "") -> str:
        if name in self.nodes:
            raise ValueError(f"duplicate node name {name}")
        for i in inputs:
            if i not in self.nodes:
                raise ValueError(f"node {name} refers to unknown input {i}")
        self.nodes[name] = Node(name, op, tuple(inputs), params, block)
        return name

    def insert_after(self, name: str, op: str, src: str, params=None, consumers: Iterable[Tuple[str, int]] = ()) -> str:
        """Splice a node fed by ``src`` and rewire the given (consumer, arm) inputs to it."""
        node = Node(name, op, (src,), params, block="")
        items = list(self.nodes.items())
        pos = [k for k, _ in items].index(src) + 1
        items.insert(pos, (name, node))
        self.nodes = dict(items)
        for consumer, arm in consumers:
            ins = list(self.nodes[consumer].inputs)
            ins[arm] = name
            self.nodes[consumer].inputs = tuple(ins)
        return name

    # -- parameters -------------------------------------------------------
    def parameters(self) -> List[Tuple[str, Tensor]]:
        out = []
        for node in self.nodes.values():
            p = node.params
            if node.op == "conv":
                out.append((f"{node.name}.weight", p.weight))
            elif node.op == "bn":
                out.append((f"{node.name}.gamma", p.gamma))
                out.append((f"{node.name}.beta", p.beta))
            elif node.op == "linear":
                out.append((f"{node.name}.weight", p.weight))
                if p.bias is not None:
                    out.append((f"{node.name}.bias", p.bias))
        return out

    def buffers(self) -> List[Tuple[str, np.ndarray]]:
        out = []
        for node in self.nodes.values():
            if node.op == "bn":
                out.append((f"{node.name}.running_mean", node.params.running_mean))
                out.append((f"{node.name}.running_var", node.params.running_var))
        return out

    def state(self) -> List[Tuple[str, np.ndarray]]:
        return [(k, t.data) for k, t in self.parameters()] + self.buffers()

    def num_parameters(self) -> int:
        return int(sum(t.data.size for _, t in self.parameters()))

    def batchnorms(self) -> List[BatchNormParams]:
        return [n.params for n in self.nodes.values() if n.op == "bn"]

    def train(self) -> "Model":
        for bn in self.batchnorms():
            bn.training = True
        return self

    def eval(self) -> "Model":
        for bn in self.batchnorms():
            bn.training = False
        return self

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.grad = None

    def layer_names(self) -> List[str]:
        return list(self.nodes)

    # -- evaluation -------------------------------------------------------
    def _needed(self, targets: Iterable[str], fed: Iterable[str] = ()) -> set:
        need, stack, fed = set(), list(targets), set(fed)
        while stack:
            n = stack.pop()
            if n in need:
                continue
            need.add(n)
            if n not in fed:
                stack.extend(self.nodes[n].inputs)
        return need

    def run(self, x: Optional[Tensor], targets: Sequence[str],
            feed: Optional[Dict[str, Tensor]] = None) -> Dict[str, Tensor]:
        """Evaluate the nodes required for ``targets`` and return their activations.

        ``feed`` substitutes given activations for named nodes, cutting the graph there.
        """
        feed = feed or {}
        for t in list(targets) + list(feed):
            if t not in self.nodes:
                raise KeyError(t)
        need = self._needed(targets, feed)
        acts: Dict[str, Tensor] = {}
        for name, node in self.nodes.items():
            if name not in need:
                continue
            if name in feed:
                acts[name] = feed[name]
            elif node.op == "input":
                acts[name] = x
            else:
                acts[name] = _EVAL[node.op](node, [acts[i] for i in node.inputs])
        return {t: acts[t] for t in targets}

    def forward(self, x: Tensor) -> Tensor:
        return self.run(x, [self.output])[self.output]

    __call__ = forward


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


class _Builder:
    def __init__(self, model: Model, rng: np.random.Generator, dtype):
        self.m = model
        self.rng = rng
        self.dtype = dtype
        self.channels: Dict[str, int] = {}

    def node(self, name, op, inputs, params=None, block="", channels=None):
        self.m.add_node(name, op, inputs, params, block)
        self.channels[name] = channels if channels is not None else self.channels[inputs[0]]
        return name

    def resblock(self, prefix: str, src: str, part: int, downsample: bool = False) -> str:
        c = self.channels[src]
        p = ResBlockParams.create(self.rng, c, downsample=downsample, dtype=self.dtype)
        cout = p.conv1.out_channels
        h = src
        for i, (conv, bn) in enumerate(((p.conv1, p.bn1), (p.conv2, p.bn2), (p.conv3, p.bn3)), start=1):
            h = self.node(f"{prefix}.conv{i}", "conv", [h], conv, prefix, cout)
            h = self.node(f"{prefix}.bn{i}", "bn", [h], bn, prefix)
            if i < 3:
                h = self.node(f"{prefix}.relu{i}", "relu", [h], block=prefix)
        if not downsample:
            h = self.node(f"{prefix}.add", "add", [h, src], block=prefix)
            self.m.skip_paths.append(SkipPath(f"{prefix}:identity", "identity", src, h, 1))
        self.m.resblock_params[prefix] = p
        kind = "resblock_down" if downsample else "resblock"
        self.m.blocks.append(BlockInfo(prefix, kind, part, src, h, c, cout))
        return h

    def ublock(self, prefix: str, src: str, skip: str, part: int) -> str:
        refined = self.resblock(f"{prefix}.refine", src, part)
        h = self.node(f"{prefix}.halve", "halve", [refined], block=prefix, channels=self.channels[refined] // 2)
        h = self.node(f"{prefix}.up", "upsample", [h], block=prefix)
        out = self.node(f"{prefix}.concat", "concat", [h, skip], block=prefix,
                        channels=self.channels[h] + self.channels[skip])
        self.m.skip_paths.append(SkipPath(f"{prefix}:concat", "concat", skip, out, 1, trunk=(refined, 0)))
        self.m.blocks.append(BlockInfo(prefix, "ublock", part, src, out, self.channels[src], self.channels[out],
                                       skip, self.channels[skip]))
        return out

    def dblock(self, prefix: str, src: str, skip: str, part: int) -> str:
        refined = self.resblock(f"{prefix}.refine", src, part)
        h = self.node(f"{prefix}.pool", "maxpool", [refined], block=prefix)
        out = self.node(f"{prefix}.concat", "concat", [h, skip], block=prefix,
                        channels=self.channels[h] + self.channels[skip])
        self.m.skip_paths.append(SkipPath(f"{prefix}:concat", "concat", skip, out, 1, trunk=(refined, 0)))
        self.m.blocks.append(BlockInfo(prefix, "dblock", part, src, out, self.channels[src], self.channels[out],
                                       skip, self.channels[skip]))
        return out


def build_network(spec: ArchitectureSpec = ArchitectureSpec(), seed: int = 0, dtype=DEFAULT_DTYPE) -> Model:
    """Assemble stem, the five alternating parts and the classification head."""
    spec.validate()
    rng = np.random.default_rng(seed)
    m = Model(spec)
    b = _Builder(m, rng, dtype)
    res = spec.resolutions

    x = b.node("input", "input", [], channels=spec.input_channels)
    stem = init_conv(rng, spec.input_channels, spec.stem_channels, 3, dtype=dtype)
    x = b.node("stem.conv", "conv", [x], stem, "stem", spec.stem_channels)
    x = b.node("stem.bn", "bn", [x], BatchNormParams.create(spec.stem_channels, dtype), "stem")
    x = b.node("stem.relu", "relu", [x], block="stem")
    m.blocks.append(BlockInfo("stem", "stem", 1, "input", x, spec.input_channels, spec.stem_channels))

    # part 1: pure ResBlock contraction, preserving the output at every resolution
    preserved: Dict[int, str] = {}
    for s, r in enumerate(res):
        for j in range(spec.resblocks_per_stage):
            down = s > 0 and j == 0
            x = b.resblock(f"p1.r{r}.b{j}", x, part=1, downsample=down)
        preserved[r] = x

    for part in range(2, spec.num_parts + 1):
        expanding = part % 2 == 0
        order = list(reversed(res)) if expanding else list(res)
        outputs = {order[0]: x}
        for r in order[1:]:
            prefix = f"p{part}.{'u' if expanding else 'd'}{r}"
            if expanding:
                x = b.ublock(prefix, x, preserved[r], part)
            else:
                x = b.dblock(prefix, x, preserved[r], part)
            outputs[r] = x
        preserved = outputs

    head_in = x
    x = b.resblock("head.refine", x, part=6)
    x = b.node("head.gap", "gap", [x], block="head")
    x = b.node("head.flatten", "flatten", [x], block="head")
    c = b.channels[x]
    x = b.node("head.fc", "linear", [x], init_linear(rng, c, spec.num_classes, dtype), "head", spec.num_classes)
    m.blocks.append(BlockInfo("head", "head", 6, head_in, x, b.channels[head_in], spec.num_classes))
    m.output = x
    m.head_input = head_in
    return m


# ---------------------------------------------------------------------------
# static analysis
# ---------------------------------------------------------------------------


def shape_walk(model: Model, input_shape: Tuple[int, int, int, int]) -> Dict[str, Tuple[int, ...]]:
    """Infer every node's output shape from parameter shapes alone."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    for name, node in model.nodes.items():
        ins = [shapes[i] for i in node.inputs]
        op = node.op
        if op == "input":
            s = tuple(input_shape)
        elif op == "conv":
            n, c, h, w = ins[0]
            p = node.params
            if c != p.in_channels:
                raise ShapeError(f"{name}: {c} channels into conv expecting {p.in_channels}")
            s = (n, p.out_channels, -(-h // p.stride), -(-w // p.stride))
        elif op == "bn":
            if ins[0][1] != node.params.channels:
                raise ShapeError(f"{name}: channel mismatch")
            s = ins[0]
        elif op == "relu":
            s = ins[0]
        elif op == "add":
            if ins[0] != ins[1]:
                raise ShapeError(f"{name}: add of {ins[0]} and {ins[1]}")
            s = ins[0]
        elif op == "maxpool":
            n, c, h, w = ins[0]
            s = (n, c, h // 2, w // 2)
        elif op == "upsample":
            n, c, h, w = ins[0]
            s = (n, c, 2 * h, 2 * w)
        elif op == "halve":
            n, c, h, w = ins[0]
            s = (n, c // 2, h, w)
        elif op == "concat":
            a, b_ = ins
            if (a[0], a[2], a[3]) != (b_[0], b_[2], b_[3]):
                raise ShapeError(f"{name}: concat of {a} and {b_}")
            s = (a[0], a[1] + b_[1], a[2], a[3])
        elif op == "gap":
            s = ins[0][:2] + (1, 1)
        elif op == "flatten":
            s = (ins[0][0], int(np.prod(ins[0][1:])))
        elif op == "linear":
            s = (ins[0][0], node.params.weight.shape[0])
        else:
            raise ValueError(f"unknown op {op}")
        shapes[name] = s
    return shapes


@dataclass
class AuditReport:
    passed: bool
    paths: List[dict] = field(default_factory=list)
    failures: List[str] = field(default_factory=list)

    @property
    def path_count(self) -> int:
        return len(self.paths)


def _trace(model: Model, start: str, stop: str) -> Tuple[List[str], bool]:
    """Walk back from ``start`` along single-input nodes until ``stop``."""
    route, cur = [], start
    while cur != stop:
        node = model.nodes[cur]
        route.append(cur)
        if len(node.inputs) != 1:
            return route, False
        cur = node.inputs[0]
    return route, True


def direct_bp_audit(model: Model) -> AuditReport:
    """Check that no skip path carries a convolution (or any learned op)."""
    report = AuditReport(passed=True)
    for sp in model.skip_paths:
        merge = model.nodes[sp.merge]
        segments = [(merge.inputs[sp.arm], sp.source)]
        if sp.trunk is not None:
            start, arm = sp.trunk
            segments.append((merge.inputs[arm], start))
        ops_on_path: List[str] = []
        ok = True
        for head, stop in segments:
            route, reached = _trace(model, head, stop)
            ops_on_path += [f"{r}({model.nodes[r].op})" for r in route]
            if not reached:
                ok = False
            if any(model.nodes[r].op in PARAMETRIC_OPS for r in route):
                ok = False
        report.paths.append({"name": sp.name, "kind": sp.kind, "source": sp.source,
                             "merge": sp.merge, "ops": ops_on_path, "ok": ok})
        if not ok:
            report.passed = False
            report.failures.append(sp.name)
    return report


def channel_origins(model: Model, layer: str) -> List[str]:
    """For each channel of ``layer``, the last node that mixed it (conv or residual add)."""
    origin: Dict[str, List[str]] = {}
    for name, node in model.nodes.items():
        op = node.op
        if op == "input":
            c = model.spec.input_channels if model.spec else 1
            origin[name] = ["input"] * c
        elif op == "conv":
            origin[name] = [name] * node.params.out_channels
        elif op in ("bn", "relu", "maxpool", "upsample"):
            origin[name] = origin[node.inputs[0]]
        elif op == "halve":
            src = origin[node.inputs[0]]
            origin[name] = [src[2 * j] if src[2 * j] == src[2 * j + 1] else name for j in range(len(src) // 2)]
        elif op == "add":
            origin[name] = [name] * len(origin[node.inputs[0]])
        elif op == "concat":
            origin[name] = origin[node.inputs[0]] + origin[node.inputs[1]]
        else:
            origin[name] = [name]
        if name == layer:
            return origin[name]
    raise KeyError(layer)
