"""Builders and static analyzers for the two segmentation architectures.

`build_network` produces either the dilated-residual branch network
("brunet") or the plain encoder-decoder baseline ("unet") as a Graph.
Both end in a 1x1 regression head with one output channel so they train
under the same pixel-wise MSE loss. Builders are pure given (config, seed)
and weight shapes never depend on `skips_enabled`: a disabled skip is
replaced by zero channels inside the concat, so pretrained weights
transfer between the two builds with no shape mismatch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .graph import Graph, Node
from .tensor import Tensor


@dataclass(frozen=True)
class NetConfig:
    arch: str = "brunet"
    depth: int = 5
    base_filters: int = 8
    filter_cap: int = 104
    input_size: int = 128
    skips_enabled: bool = True
    dilations: tuple[int, ...] = (1, 3, 5)
    convs_per_path: int = 2
    bottleneck_mult: float = 1.0


ALLOWED_DILATIONS = (1, 3, 5)


def validate_config(cfg: NetConfig) -> None:
    if cfg.arch not in ("brunet", "unet"):
        raise ConfigError(f"unknown arch '{cfg.arch}'")
    if cfg.depth < 1:
        raise ConfigError("depth must be >= 1")
    if cfg.base_filters < 1 or cfg.filter_cap < cfg.base_filters:
        raise ConfigError("need base_filters >= 1 and filter_cap >= base_filters")
    n = cfg.input_size
    if n < 1 or (n & (n - 1)):
        raise ConfigError(f"input_size must be a power of two, got {n}")
    if n % (2 ** cfg.depth):
        raise ConfigError(f"input_size {n} not divisible by 2^{cfg.depth}")
    for d in cfg.dilations:
        if d not in ALLOWED_DILATIONS:
            raise ConfigError(f"dilation {d} outside {ALLOWED_DILATIONS}")
    if not cfg.dilations:
        raise ConfigError("need at least one dilation rate")
    if cfg.convs_per_path < 1:
        raise ConfigError("convs_per_path must be >= 1")
    if cfg.bottleneck_mult <= 0:
        raise ConfigError("bottleneck_mult must be positive")


def fibonacci_filters(base: int, depth: int, cap: int) -> list[int]:
    """Per-level filter counts: f1=base, f2=2*base, fn=min(fn-1+fn-2, cap).

    Returns depth+1 entries, one per level including the bottom.
    """
    if base < 1 or depth < 1 or cap < base:
        raise ConfigError("need base >= 1, depth >= 1, cap >= base")
    f = [base, 2 * base]
    while len(f) < depth + 1:
        f.append(min(f[-1] + f[-2], cap))
    return f[: depth + 1]


class _Builder:
    """Accumulates Nodes, tracking channel counts and initializing weights.

    In meta mode parameters are zero-stride placeholder arrays: element
    counts and shapes are real but no memory is allocated, which makes the
    full-scale analyzers cheap.
    """

    def __init__(self, rng: np.random.Generator, dtype=np.float64, meta: bool = False):
        self.g = Graph()
        self.rng = rng
        self.dtype = dtype
        self.meta = meta
        self.channels: list[int] = []

    def _tensor(self, arr: np.ndarray, name: str) -> Tensor:
        return Tensor(arr if self.meta else arr.astype(self.dtype), requires_grad=True, name=name)

    def _placeholder(self, shape) -> np.ndarray:
        return np.broadcast_to(np.zeros(1, dtype=self.dtype), shape)

    def input(self) -> int:
        idx = self.g.add(Node(kind="input", name="input"))
        self.channels.append(1)
        return idx

    def conv(self, src: int, cout: int, k: int, dilation: int, name: str) -> int:
        cin = self.channels[src]
        if self.meta:
            weight = self._placeholder((cout, cin, k, k))
        else:
            bound = math.sqrt(1.0 / (cin * k * k))
            weight = self.rng.uniform(-bound, bound, size=(cout, cin, k, k))
        node = Node(
            kind="conv2d", inputs=[src], attrs={"dilation": dilation}, name=name,
            params={
                "weight": self._tensor(weight, f"{name}.weight"),
                "bias": self._tensor(np.zeros(cout), f"{name}.bias"),
            },
        )
        idx = self.g.add(node)
        self.channels.append(cout)
        return idx

    def bn(self, src: int, name: str) -> int:
        c = self.channels[src]
        node = Node(
            kind="batch_norm", inputs=[src], attrs={"eps": 1e-5, "momentum": 0.9}, name=name,
            params={
                "scale": self._tensor(np.ones(c), f"{name}.scale"),
                "shift": self._tensor(np.zeros(c), f"{name}.shift"),
            },
            buffers={
                "running_mean": np.zeros(c, dtype=self.dtype),
                "running_var": np.ones(c, dtype=self.dtype),
            },
        )
        idx = self.g.add(node)
        self.channels.append(c)
        return idx

    def relu(self, src: int, name: str) -> int:
        idx = self.g.add(Node(kind="relu", inputs=[src], name=name))
        self.channels.append(self.channels[src])
        return idx

    def add_nodes(self, srcs: list[int], name: str) -> int:
        idx = self.g.add(Node(kind="add", inputs=list(srcs), name=name))
        self.channels.append(self.channels[srcs[0]])
        return idx

    def concat(self, srcs: list[int], pad_channels: int, name: str) -> int:
        idx = self.g.add(
            Node(kind="concat", inputs=list(srcs), attrs={"pad_channels": pad_channels}, name=name)
        )
        self.channels.append(sum(self.channels[s] for s in srcs) + pad_channels)
        return idx

    def pool(self, src: int, name: str) -> int:
        idx = self.g.add(Node(kind="max_pool2", inputs=[src], name=name))
        self.channels.append(self.channels[src])
        return idx

    def up(self, src: int, name: str) -> int:
        idx = self.g.add(Node(kind="upsample2", inputs=[src], name=name))
        self.channels.append(self.channels[src])
        return idx

    def downscale(self, src: int, factor: int, name: str) -> int:
        idx = self.g.add(
            Node(kind="downscale_avg", inputs=[src], attrs={"factor": factor}, name=name)
        )
        self.channels.append(self.channels[src])
        return idx


def _residual_block(
    b: _Builder,
    cfg: NetConfig,
    parts: list[int],
    pad_channels: int,
    out_ch: int,
    direction: str,
    name: str,
) -> int:
    """One building block: concat aux inputs, 1x1 bottleneck, parallel dilated
    conv stacks with batch norm, residual sum, relu, then pool (D) or
    upsample (U)."""
    width = max(1, round(cfg.bottleneck_mult * out_ch))
    cat = b.concat(parts, pad_channels, f"{name}.cat")
    bneck = b.conv(cat, width, 1, 1, f"{name}.bottleneck")
    paths = []
    for d in cfg.dilations:
        h = bneck
        for ci in range(cfg.convs_per_path):
            h = b.conv(h, width, 3, d, f"{name}.d{d}.conv{ci + 1}")
            h = b.bn(h, f"{name}.d{d}.bn{ci + 1}")
            if ci + 1 < cfg.convs_per_path:
                h = b.relu(h, f"{name}.d{d}.relu{ci + 1}")
        paths.append(h)
    s = b.add_nodes([bneck] + paths, f"{name}.sum")
    r = b.relu(s, f"{name}.relu")
    if direction == "D":
        return b.pool(r, f"{name}.pool")
    if direction == "U":
        return b.up(r, f"{name}.up")
    raise ConfigError(f"direction must be 'D' or 'U', got '{direction}'")


def build_block(
    cfg: NetConfig, direction: str, in_ch: int, out_ch: int, seed: int = 0
) -> Graph:
    """A standalone block graph (input with `in_ch` channels), for analysis."""
    b = _Builder(np.random.default_rng(seed))
    inp = b.input()
    b.channels[inp] = in_ch
    b.g.output_index = _residual_block(b, cfg, [inp], 0, out_ch, direction, "block")
    return b.g


def _build_brunet(cfg: NetConfig, rng: np.random.Generator, dtype, meta: bool) -> Graph:
    filters = fibonacci_filters(cfg.base_filters, cfg.depth, cfg.filter_cap)
    b = _Builder(rng, dtype, meta)
    inp = b.input()

    # image pyramid: the raw input average-pooled to every level's resolution
    img = [inp]
    for i in range(1, cfg.depth + 1):
        img.append(b.downscale(img[-1], 2, f"img{i}"))

    # stem at full resolution
    h = b.conv(inp, filters[0], 3, 1, "stem.conv")
    h = b.bn(h, "stem.bn")
    d0 = b.relu(h, "stem.relu")

    # descending branch: level i-1 resolution in, level i resolution out
    desc = [d0]
    x = d0
    for i in range(1, cfg.depth + 1):
        x = _residual_block(b, cfg, [x, img[i - 1]], 0, filters[i], "D", f"enc{i}")
        desc.append(x)

    # ascending branch: block j runs at level j and upsamples to level j-1;
    # a disabled skip becomes zero channels so weight shapes do not change
    for j in range(cfg.depth, 0, -1):
        parts = [x, img[j]]
        pad = 0
        if j < cfg.depth:
            if cfg.skips_enabled:
                parts.append(desc[j])
            else:
                pad = b.channels[desc[j]]
        x = _residual_block(b, cfg, parts, pad, filters[j - 1], "U", f"dec{j}")

    # regression head at full resolution
    parts = [x, img[0]]
    pad = 0
    if cfg.skips_enabled:
        parts.append(d0)
    else:
        pad = b.channels[d0]
    cat = b.concat(parts, pad, "head.cat")
    out = b.conv(cat, 1, 1, 1, "head.conv")
    b.g.output_index = out
    return b.g


def _build_unet(cfg: NetConfig, rng: np.random.Generator, dtype, meta: bool) -> Graph:
    base = cfg.base_filters
    chans = [base * 2 ** i for i in range(cfg.depth)]
    b = _Builder(rng, dtype, meta)
    x = b.input()

    skips = []
    for i, ci in enumerate(chans):
        x = b.relu(b.conv(x, ci, 3, 1, f"enc{i + 1}.conv1"), f"enc{i + 1}.relu1")
        x = b.relu(b.conv(x, ci, 3, 1, f"enc{i + 1}.conv2"), f"enc{i + 1}.relu2")
        skips.append(x)
        x = b.pool(x, f"enc{i + 1}.pool")

    x = b.relu(b.conv(x, chans[-1], 3, 1, "bot.conv"), "bot.relu")

    for i in range(cfg.depth - 1, -1, -1):
        w = max(chans[i] // 2, base // 2)
        x = b.up(x, f"dec{i + 1}.upsample")
        x = b.relu(b.conv(x, w, 3, 1, f"dec{i + 1}.upconv"), f"dec{i + 1}.uprelu")
        if cfg.skips_enabled:
            cat = b.concat([x, skips[i]], 0, f"dec{i + 1}.cat")
        else:
            cat = b.concat([x], b.channels[skips[i]], f"dec{i + 1}.cat")
        x = b.relu(b.conv(cat, w, 3, 1, f"dec{i + 1}.conv1"), f"dec{i + 1}.relu1")
        x = b.relu(b.conv(x, w, 3, 1, f"dec{i + 1}.conv2"), f"dec{i + 1}.relu2")

    out = b.conv(x, 1, 1, 1, "head.conv")
    b.g.output_index = out
    return b.g


def build_network(cfg: NetConfig, seed: int = 0, dtype=np.float64, meta: bool = False) -> Graph:
    """Build the configured architecture with deterministic seeded init.

    With `meta=True` parameters are unallocated placeholders; the graph
    supports static analysis (counts, shapes, receptive fields) but must
    not be executed.
    """
    validate_config(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if cfg.arch == "brunet":
        return _build_brunet(cfg, rng, dtype, meta)
    return _build_unet(cfg, rng, dtype, meta)


def block_parameter_count(cfg: NetConfig, in_ch: int, out_ch: int) -> int:
    """Closed-form trainable-element count of one block, for cross-checking
    the builder: bottleneck 1x1 (in*out + out) plus, per dilation path,
    convs_per_path 3x3 convolutions (9*w*w + w each) and a BN pair (2w)."""
    w = max(1, round(cfg.bottleneck_mult * out_ch))
    n = cfg.convs_per_path
    paths = len(cfg.dilations)
    return in_ch * w + w + paths * n * (9 * w * w + w) + paths * n * 2 * w


def block_prepool_field(dilations: tuple[int, ...] = (1, 3, 5), convs_per_path: int = 1) -> int:
    """Widest-path receptive field of one block before its pool: each 3x3
    conv at dilation d adds 2d, so the widest path is 1 + convs*2*max(d)."""
    return 1 + convs_per_path * 2 * max(dilations)


def unet_simplified_bound(depth: int) -> int:
    """The coarse kernel-times-downsampling field bound 3*2^depth."""
    return 3 * 2 ** depth


def full_scale_config(arch: str, depth: int = 5) -> NetConfig:
    """Published-scale widths: 32-base capped Fibonacci schedule vs 64-base
    doubling. The cap 672 lets the depth-6 schedule take one more Fibonacci
    step (the depth-5 schedule tops out at 416 either way)."""
    if arch == "brunet":
        return NetConfig(arch="brunet", depth=depth, base_filters=32,
                         filter_cap=672, input_size=512)
    return NetConfig(arch="unet", depth=depth, base_filters=64,
                     filter_cap=64 * 2 ** max(depth - 1, 0), input_size=512)


def desk_config(arch: str, depth: int = 5, input_size: int = 128) -> NetConfig:
    """CPU-sized profile mirroring the full-scale width ratio (8 vs 16 base)."""
    if arch == "brunet":
        return NetConfig(arch="brunet", depth=depth, base_filters=8,
                         filter_cap=13 * 8, input_size=input_size)
    return NetConfig(arch="unet", depth=depth, base_filters=16,
                     filter_cap=16 * 2 ** max(depth - 1, 0), input_size=input_size)


def autoencoder_config(cfg: NetConfig) -> NetConfig:
    return replace(cfg, skips_enabled=False)
