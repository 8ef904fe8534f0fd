"""Declarative computation graphs executed on the autodiff engine.

A Graph is a topologically ordered list of typed nodes. Node kinds mirror
the engine operators plus an `input` placeholder. The static description
supports parameter counting, edge counting, shape inference and
receptive-field analysis without running any data through the network.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


@dataclass
class Node:
    kind: str
    inputs: list[int] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    name: str = ""


class Graph:
    """A DAG of operator nodes; node inputs always reference earlier nodes."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.input_index: int = 0
        self.output_index: int = -1

    def add(self, node: Node) -> int:
        for i in node.inputs:
            if not 0 <= i < len(self.nodes):
                raise ConfigError(f"node '{node.name}' references out-of-range input {i}")
        self.nodes.append(node)
        return len(self.nodes) - 1

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        for node in self.nodes:
            for pname, p in node.params.items():
                yield f"{node.name}.{pname}", p

    def count_parameters(self) -> int:
        """Total trainable elements; BN running statistics are buffers, not counted."""
        return sum(p.data.size for _, p in self.parameters())

    def edge_count(self) -> int:
        return sum(len(n.inputs) for n in self.nodes)

    def state(self) -> dict[str, np.ndarray]:
        """All parameters and buffers, keyed by qualified name."""
        out: dict[str, np.ndarray] = {}
        for name, p in self.parameters():
            out[name] = p.data.copy()
        for node in self.nodes:
            for bname, b in node.buffers.items():
                out[f"{node.name}.{bname}"] = b.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        seen = set()
        for name, p in self.parameters():
            if name not in state:
                if strict:
                    raise ConfigError(f"missing parameter '{name}' in state")
                continue
            if state[name].shape != p.data.shape:
                raise ConfigError(
                    f"shape mismatch for '{name}': {state[name].shape} vs {p.data.shape}"
                )
            p.data = state[name].astype(p.data.dtype).copy()
            seen.add(name)
        for node in self.nodes:
            for bname in node.buffers:
                qual = f"{node.name}.{bname}"
                if qual in state:
                    node.buffers[bname] = state[qual].astype(node.buffers[bname].dtype).copy()
                    seen.add(qual)
        if strict:
            extra = set(state) - seen
            if extra:
                raise ConfigError(f"state has unknown entries: {sorted(extra)[:4]}...")

    def astype(self, dtype) -> "Graph":
        for _, p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    # -- static analysis ----------------------------------------------------

    def static_shapes(self, input_shape: tuple[int, int, int, int]) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        for node in self.nodes:
            k = node.kind
            if k == "input":
                shapes.append(tuple(input_shape))
            elif k == "conv2d":
                b, _, h, w = shapes[node.inputs[0]]
                shapes.append((b, node.params["weight"].shape[0], h, w))
            elif k in ("batch_norm", "relu"):
                shapes.append(shapes[node.inputs[0]])
            elif k == "add":
                s0 = shapes[node.inputs[0]]
                for i in node.inputs[1:]:
                    if shapes[i] != s0:
                        raise ConfigError(f"add '{node.name}' input shapes differ")
                shapes.append(s0)
            elif k == "concat":
                b, _, h, w = shapes[node.inputs[0]]
                c = sum(shapes[i][1] for i in node.inputs) + node.attrs.get("pad_channels", 0)
                shapes.append((b, c, h, w))
            elif k == "max_pool2":
                b, c, h, w = shapes[node.inputs[0]]
                shapes.append((b, c, h // 2, w // 2))
            elif k == "upsample2":
                b, c, h, w = shapes[node.inputs[0]]
                shapes.append((b, c, 2 * h, 2 * w))
            elif k == "downscale_avg":
                b, c, h, w = shapes[node.inputs[0]]
                f = node.attrs["factor"]
                shapes.append((b, c, h // f, w // f))
            else:
                raise ConfigError(f"unknown node kind '{k}'")
        return shapes

    # -- execution ----------------------------------------------------------

    def forward(self, x, train: bool = False) -> Tensor:
        """Run the graph on a [B,1,H,W] batch; returns the output tensor."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x))
        values: list[Optional[Tensor]] = [None] * len(self.nodes)
        for idx, node in enumerate(self.nodes):
            k = node.kind
            ins = [values[i] for i in node.inputs]
            if k == "input":
                values[idx] = x
            elif k == "conv2d":
                values[idx] = T.conv2d(
                    ins[0], node.params["weight"], node.params["bias"],
                    dilation=node.attrs.get("dilation", 1), name=node.name,
                )
            elif k == "batch_norm":
                values[idx] = T.batch_norm(
                    ins[0], node.params["scale"], node.params["shift"],
                    node.buffers["running_mean"], node.buffers["running_var"],
                    train=train, eps=node.attrs.get("eps", 1e-5),
                    momentum=node.attrs.get("momentum", 0.9), name=node.name,
                )
            elif k == "relu":
                values[idx] = T.relu(ins[0], name=node.name)
            elif k == "add":
                acc = ins[0]
                for nxt in ins[1:]:
                    acc = T.add(acc, nxt, name=node.name)
                values[idx] = acc
            elif k == "concat":
                values[idx] = T.concat(
                    ins, pad_channels=node.attrs.get("pad_channels", 0), name=node.name
                )
            elif k == "max_pool2":
                values[idx] = T.max_pool2(ins[0], name=node.name)
            elif k == "upsample2":
                values[idx] = T.upsample2(ins[0], name=node.name)
            elif k == "downscale_avg":
                values[idx] = T.downscale_avg(ins[0], node.attrs["factor"], name=node.name)
            else:
                raise ConfigError(f"unknown node kind '{k}'")
        out_idx = self.output_index if self.output_index >= 0 else len(self.nodes) - 1
        return values[out_idx]


def receptive_fields(graph: Graph) -> list[tuple[float, float]]:
    """Per-node (field, jump) pairs under the composition rules:

    a k=3 convolution with dilation d grows the field by 2*d*jump, pooling
    doubles the jump, upsampling halves it, and merge nodes take the widest
    input. The field is expressed in input pixels.
    """
    out: list[tuple[float, float]] = []
    for node in graph.nodes:
        k = node.kind
        if k == "input":
            out.append((1.0, 1.0))
            continue
        fields = [out[i][0] for i in node.inputs]
        jumps = [out[i][1] for i in node.inputs]
        f, j = max(fields), max(jumps)
        if k == "conv2d":
            ksize = node.params["weight"].shape[2]
            if ksize == 3:
                f += 2.0 * node.attrs.get("dilation", 1) * j
        elif k == "max_pool2":
            j *= 2.0
        elif k == "upsample2":
            j /= 2.0
        elif k == "downscale_avg":
            j *= node.attrs["factor"]
        out.append((f, j))
    return out


def receptive_field(graph: Graph) -> int:
    """Field of the deepest feature (the node with the largest stride product)."""
    per_node = receptive_fields(graph)
    max_jump = max(j for _, j in per_node)
    return int(round(max(f for f, j in per_node if j == max_jump)))
