"""Composite network blocks: Conv+norm+SiLU, depthwise-separable, ghost and
phantom convolutions, bottleneck/C2f/C2fi, SPPF, upsample, concat, and the
anchor-free decoupled detect head.

Every block owns its ConvParams, exposes a pure ``forward``, enumerates its
parameter arrays for serialization, and can report exact parameter/MAC cost
for a given input shape without running.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import (
    ConfigError,
    ConvParams,
    ShapeError,
    Tensor4,
    concat_channels,
    conv2d_fast,
    conv_out_hw,
    make_conv_params,
    maxpool2d,
    silu,
    split_channels,
    upsample_nearest,
)

Shape3 = tuple[int, int, int]  # (c, h, w), batch-independent


@dataclass(frozen=True)
class LayerCost:
    """Exact analytic cost of one block for a given input shape."""

    params: int
    macs: int
    out_shape: Shape3 | tuple[Shape3, ...]


def conv_cost(p: ConvParams, h: int, w: int, normed: bool = True) -> tuple[int, int, int, int]:
    """(params, macs, out_h, out_w) for one convolution application.

    MACs count multiplications of the convolution itself; the folded
    norm contributes 2*out_channels parameters (bias-only convs just
    out_channels) and no MACs.
    """
    a = p.attrs
    ho, wo = conv_out_hw(h, w, a)
    params = p.weights.size + (2 * a.out_channels if normed else a.out_channels)
    macs = a.out_channels * ho * wo * p.weights.shape[1] * a.kernel_h * a.kernel_w
    return params, macs, ho, wo


class ConvBlock:
    """Convolution with folded norm, then SiLU (both optional)."""

    multi_input = False

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 1,
        stride: int = 1,
        groups: int = 1,
        act: bool = True,
        norm: bool = True,
    ):
        self.p = make_conv_params(in_channels, out_channels, kernel, stride, None, groups)
        self.act = act
        self.norm = norm
        self.out_channels = out_channels

    def forward(self, x: Tensor4) -> Tensor4:
        y = conv2d_fast(x, self.p)
        return silu(y) if self.act else y

    def param_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "weight", self.p.weights
        if self.norm:
            yield "scale", self.p.scale
        yield "bias", self.p.bias

    def cost(self, in_shape: Shape3) -> LayerCost:
        params, macs, ho, wo = conv_cost(self.p, in_shape[1], in_shape[2], self.norm)
        return LayerCost(params, macs, (self.out_channels, ho, wo))


class DWSeparableBlock:
    """Depthwise k x k followed by pointwise 1x1, each with norm + SiLU."""

    multi_input = False

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1):
        self.dw = ConvBlock(in_channels, in_channels, kernel, stride, groups=in_channels)
        self.pw = ConvBlock(in_channels, out_channels, 1, 1)
        self.out_channels = out_channels

    def forward(self, x: Tensor4) -> Tensor4:
        return self.pw.forward(self.dw.forward(x))

    def param_arrays(self):
        for name, arr in self.dw.param_arrays():
            yield f"dw.{name}", arr
        for name, arr in self.pw.param_arrays():
            yield f"pw.{name}", arr

    def cost(self, in_shape: Shape3) -> LayerCost:
        c1 = self.dw.cost(in_shape)
        c2 = self.pw.cost(c1.out_shape)
        return LayerCost(c1.params + c2.params, c1.macs + c2.macs, c2.out_shape)


class GhostConvBlock:
    """Half the outputs from a primary conv, half from a cheap depthwise
    transform of the primary output, concatenated."""

    multi_input = False

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 1, stride: int = 1):
        if out_channels % 2 != 0:
            raise ConfigError(f"ghost conv needs even out_channels, got {out_channels}")
        half = out_channels // 2
        self.primary = ConvBlock(in_channels, half, kernel, stride)
        self.cheap = ConvBlock(half, half, 3, 1, groups=half)
        self.out_channels = out_channels

    def forward(self, x: Tensor4) -> Tensor4:
        a = self.primary.forward(x)
        b = self.cheap.forward(a)
        return concat_channels([a, b])

    def param_arrays(self):
        for name, arr in self.primary.param_arrays():
            yield f"primary.{name}", arr
        for name, arr in self.cheap.param_arrays():
            yield f"cheap.{name}", arr

    def cost(self, in_shape: Shape3) -> LayerCost:
        c1 = self.primary.cost(in_shape)
        c2 = self.cheap.cost(c1.out_shape)
        _, h, w = c1.out_shape
        return LayerCost(c1.params + c2.params, c1.macs + c2.macs, (self.out_channels, h, w))


class PhantomConvBlock:
    """Ghost-style split where the primary branch is a grouped 5x5 conv and
    the cheap branch is a depthwise-separable block on the primary output."""

    multi_input = False

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        stride: int = 1,
        groups: int = 4,
        kernel: int = 5,
    ):
        if out_channels % 2 != 0:
            raise ConfigError(f"phantom conv needs even out_channels, got {out_channels}")
        half = out_channels // 2
        if in_channels % groups != 0:
            raise ConfigError(
                f"phantom conv needs in_channels divisible by {groups} (primary groups), "
                f"got {in_channels}; pad or reroute the producing layer"
            )
        if half % groups != 0:
            raise ConfigError(
                f"phantom conv needs out_channels/2 divisible by {groups}, got "
                f"{half}; pick out_channels as a multiple of {2 * groups}"
            )
        self.primary = ConvBlock(in_channels, half, kernel, stride, groups=groups)
        self.cheap = DWSeparableBlock(half, half, 3, 1)
        self.out_channels = out_channels

    def forward(self, x: Tensor4) -> Tensor4:
        a = self.primary.forward(x)
        b = self.cheap.forward(a)
        return concat_channels([a, b])

    def param_arrays(self):
        for name, arr in self.primary.param_arrays():
            yield f"primary.{name}", arr
        for name, arr in self.cheap.param_arrays():
            yield f"cheap.{name}", arr

    def cost(self, in_shape: Shape3) -> LayerCost:
        c1 = self.primary.cost(in_shape)
        c2 = self.cheap.cost(c1.out_shape)
        _, h, w = c1.out_shape
        return LayerCost(c1.params + c2.params, c1.macs + c2.macs, (self.out_channels, h, w))


class Bottleneck:
    """Two 3x3 conv blocks with an optional residual add (hidden width c/2)."""

    multi_input = False

    def __init__(self, channels: int, shortcut: bool):
        hidden = max(1, channels // 2)
        self.cv1 = ConvBlock(channels, hidden, 3, 1)
        self.cv2 = ConvBlock(hidden, channels, 3, 1)
        self.shortcut = shortcut
        self.out_channels = channels

    def forward(self, x: Tensor4) -> Tensor4:
        y = self.cv2.forward(self.cv1.forward(x))
        if self.shortcut:
            return Tensor4(x.data + y.data)
        return y

    def param_arrays(self):
        for name, arr in self.cv1.param_arrays():
            yield f"cv1.{name}", arr
        for name, arr in self.cv2.param_arrays():
            yield f"cv2.{name}", arr

    def cost(self, in_shape: Shape3) -> LayerCost:
        c1 = self.cv1.cost(in_shape)
        c2 = self.cv2.cost(c1.out_shape)
        return LayerCost(c1.params + c2.params, c1.macs + c2.macs, c2.out_shape)


class C2fBlock:
    """Cross-stage-partial block: 1x1 in, split, a chain of bottlenecks
    appended to a growing concat list, 1x1 out. shortcut=False is the C2fi
    variant; same code path."""

    multi_input = False

    def __init__(self, in_channels: int, out_channels: int, n: int, shortcut: bool):
        if out_channels % 2 != 0:
            raise ConfigError(f"c2f needs even out_channels, got {out_channels}")
        half = out_channels // 2
        self.cv1 = ConvBlock(in_channels, out_channels, 1, 1)
        self.m = [Bottleneck(half, shortcut) for _ in range(n)]
        self.cv2 = ConvBlock((2 + n) * half, out_channels, 1, 1)
        self.shortcut = shortcut
        self.out_channels = out_channels

    def forward(self, x: Tensor4) -> Tensor4:
        half = self.out_channels // 2
        y = self.cv1.forward(x)
        parts = split_channels(y, [half, half])
        for b in self.m:
            parts.append(b.forward(parts[-1]))
        return self.cv2.forward(concat_channels(parts))

    def param_arrays(self):
        for name, arr in self.cv1.param_arrays():
            yield f"cv1.{name}", arr
        for i, b in enumerate(self.m):
            for name, arr in b.param_arrays():
                yield f"m{i}.{name}", arr
        for name, arr in self.cv2.param_arrays():
            yield f"cv2.{name}", arr

    def cost(self, in_shape: Shape3) -> LayerCost:
        c1 = self.cv1.cost(in_shape)
        half = self.out_channels // 2
        _, h, w = c1.out_shape
        params, macs = c1.params, c1.macs
        for b in self.m:
            cb = b.cost((half, h, w))
            params += cb.params
            macs += cb.macs
        c2 = self.cv2.cost(((2 + len(self.m)) * half, h, w))
        return LayerCost(params + c2.params, macs + c2.macs, c2.out_shape)


class SPPFBlock:
    """1x1 in, three cascaded same-padding maxpools, concat, 1x1 out."""

    multi_input = False

    def __init__(self, in_channels: int, out_channels: int, pool_kernel: int = 5):
        if in_channels < 2:
            raise ConfigError(f"sppf needs in_channels >= 2, got {in_channels}")
        hidden = in_channels // 2
        self.cv1 = ConvBlock(in_channels, hidden, 1, 1)
        self.cv2 = ConvBlock(4 * hidden, out_channels, 1, 1)
        self.pool_kernel = pool_kernel
        self.out_channels = out_channels

    def forward(self, x: Tensor4) -> Tensor4:
        k = self.pool_kernel
        y = self.cv1.forward(x)
        p1 = maxpool2d(y, k, 1, k // 2)
        p2 = maxpool2d(p1, k, 1, k // 2)
        p3 = maxpool2d(p2, k, 1, k // 2)
        return self.cv2.forward(concat_channels([y, p1, p2, p3]))

    def param_arrays(self):
        for name, arr in self.cv1.param_arrays():
            yield f"cv1.{name}", arr
        for name, arr in self.cv2.param_arrays():
            yield f"cv2.{name}", arr

    def cost(self, in_shape: Shape3) -> LayerCost:
        c1 = self.cv1.cost(in_shape)
        hidden, h, w = c1.out_shape
        c2 = self.cv2.cost((4 * hidden, h, w))
        return LayerCost(c1.params + c2.params, c1.macs + c2.macs, c2.out_shape)


class UpsampleBlock:
    """Nearest-neighbour spatial upsampling."""

    multi_input = False

    def __init__(self, in_channels: int, factor: int = 2):
        if factor < 1:
            raise ConfigError(f"upsample factor must be >= 1, got {factor}")
        self.factor = factor
        self.out_channels = in_channels

    def forward(self, x: Tensor4) -> Tensor4:
        return upsample_nearest(x, self.factor)

    def param_arrays(self):
        return iter(())

    def cost(self, in_shape: Shape3) -> LayerCost:
        c, h, w = in_shape
        return LayerCost(0, 0, (c, h * self.factor, w * self.factor))


class ConcatBlock:
    """Channel concatenation of multiple sources."""

    multi_input = True

    def __init__(self, in_channels_list: list[int]):
        self.out_channels = sum(in_channels_list)

    def forward(self, xs: list[Tensor4]) -> Tensor4:
        return concat_channels(xs)

    def param_arrays(self):
        return iter(())

    def cost(self, in_shapes: list[Shape3]) -> LayerCost:
        _, h, w = in_shapes[0]
        for c, hh, ww in in_shapes[1:]:
            if (hh, ww) != (h, w):
                raise ShapeError(f"concat spatial mismatch: {in_shapes}")
        return LayerCost(0, 0, (sum(s[0] for s in in_shapes), h, w))


@dataclass(frozen=True)
class DetectOutput:
    """Raw per-scale maps from the detect head, one per stride."""

    maps: tuple[Tensor4, ...]
    strides: tuple[int, ...]
    reg_max: int
    num_classes: int

    def __post_init__(self):
        if len(self.maps) != 3 or len(self.strides) != 3:
            raise ShapeError(f"detect output needs exactly 3 scales, got {len(self.maps)}")
        want = 4 * self.reg_max + self.num_classes
        for m in self.maps:
            if m.c != want:
                raise ShapeError(
                    f"detect map has {m.c} channels, expected 4*{self.reg_max}+{self.num_classes}={want}"
                )


class DetectHead:
    """Decoupled anchor-free head: per scale, a box-regression stack
    (4*reg_max channels) and a classification stack (num_classes channels),
    concatenated box-first."""

    multi_input = True

    def __init__(self, in_channels_list: list[int], num_classes: int, reg_max: int = 16):
        if len(in_channels_list) != 3:
            raise ConfigError(
                f"detect head needs exactly 3 feature scales, got {len(in_channels_list)}"
            )
        if num_classes < 1 or reg_max < 1:
            raise ConfigError(f"bad head attrs: num_classes={num_classes}, reg_max={reg_max}")
        self.num_classes = num_classes
        self.reg_max = reg_max
        box_hidden = max(16, in_channels_list[0] // 4, 4 * reg_max)
        cls_hidden = max(in_channels_list[0], min(num_classes, 100))
        self.box_stacks = []
        self.cls_stacks = []
        for c in in_channels_list:
            self.box_stacks.append(
                [
                    ConvBlock(c, box_hidden, 3, 1),
                    ConvBlock(box_hidden, box_hidden, 3, 1),
                    ConvBlock(box_hidden, 4 * reg_max, 1, 1, act=False, norm=False),
                ]
            )
            self.cls_stacks.append(
                [
                    ConvBlock(c, cls_hidden, 3, 1),
                    ConvBlock(cls_hidden, cls_hidden, 3, 1),
                    ConvBlock(cls_hidden, num_classes, 1, 1, act=False, norm=False),
                ]
            )
        self.out_channels = 4 * reg_max + num_classes

    def forward(self, features: list[Tensor4]) -> list[Tensor4]:
        if len(features) != 3:
            raise ConfigError(f"detect head expects 3 feature maps, got {len(features)}")
        out = []
        for i, f in enumerate(features):
            box = f
            for blk in self.box_stacks[i]:
                box = blk.forward(box)
            cls = f
            for blk in self.cls_stacks[i]:
                cls = blk.forward(cls)
            out.append(concat_channels([box, cls]))
        return out

    def param_arrays(self):
        for i in range(3):
            for j, blk in enumerate(self.box_stacks[i]):
                for name, arr in blk.param_arrays():
                    yield f"s{i}.box{j}.{name}", arr
            for j, blk in enumerate(self.cls_stacks[i]):
                for name, arr in blk.param_arrays():
                    yield f"s{i}.cls{j}.{name}", arr

    def cost(self, in_shapes: list[Shape3]) -> LayerCost:
        params = 0
        macs = 0
        outs = []
        for i, shape in enumerate(in_shapes):
            for stack in (self.box_stacks[i], self.cls_stacks[i]):
                s = shape
                for blk in stack:
                    c = blk.cost(s)
                    params += c.params
                    macs += c.macs
                    s = c.out_shape
            outs.append((self.out_channels, shape[1], shape[2]))
        return LayerCost(params, macs, tuple(outs))


class SequentialBlock:
    """The same block kind repeated serially (the generic `repeats` path)."""

    multi_input = False

    def __init__(self, blocks: list):
        if not blocks:
            raise ConfigError("sequential repeat needs at least one block")
        self.blocks = blocks
        self.out_channels = blocks[-1].out_channels

    def forward(self, x: Tensor4) -> Tensor4:
        for b in self.blocks:
            x = b.forward(x)
        return x

    def param_arrays(self):
        for i, b in enumerate(self.blocks):
            for name, arr in b.param_arrays():
                yield f"r{i}.{name}", arr

    def cost(self, in_shape: Shape3) -> LayerCost:
        params = 0
        macs = 0
        shape = in_shape
        for b in self.blocks:
            c = b.cost(shape)
            params += c.params
            macs += c.macs
            shape = c.out_shape
        return LayerCost(params, macs, shape)


BLOCK_KINDS = (
    "Conv",
    "DWSeparable",
    "GhostConv",
    "PhantomConv",
    "C2f",
    "C2fi",
    "SPPF",
    "Upsample",
    "Concat",
    "Detect",
)

# Per-kind args schema: {name: (required, default)}. C2fi deliberately has no
# shortcut knob; it IS C2f with shortcut=False.
ARG_SCHEMAS = {
    "Conv": {
        "out_channels": (True, None),
        "kernel": (False, 1),
        "stride": (False, 1),
        "groups": (False, 1),
    },
    "DWSeparable": {"out_channels": (True, None), "kernel": (False, 3), "stride": (False, 1)},
    "GhostConv": {"out_channels": (True, None), "kernel": (False, 1), "stride": (False, 1)},
    "PhantomConv": {
        "out_channels": (True, None),
        "stride": (False, 1),
        "groups": (False, 4),
        "kernel": (False, 5),
    },
    "C2f": {"out_channels": (True, None), "shortcut": (False, True)},
    "C2fi": {"out_channels": (True, None)},
    "SPPF": {"out_channels": (True, None), "pool_kernel": (False, 5)},
    "Upsample": {"factor": (False, 2)},
    "Concat": {},
    "Detect": {"reg_max": (False, 16)},
}


def normalize_args(kind: str, args: dict) -> dict:
    """Validate an args record and fill in defaults."""
    if kind not in ARG_SCHEMAS:
        raise ConfigError(f"unknown block kind '{kind}'")
    schema = ARG_SCHEMAS[kind]
    unknown = set(args) - set(schema)
    if unknown:
        raise ConfigError(f"{kind}: unknown args {sorted(unknown)}")
    out = {}
    for name, (required, default) in schema.items():
        if name in args:
            out[name] = args[name]
        elif required:
            raise ConfigError(f"{kind}: missing required arg '{name}'")
        else:
            out[name] = default
    return out


def build_block(
    kind: str,
    in_channels: list[int],
    args: dict,
    repeats: int = 1,
    num_classes: int | None = None,
):
    """Instantiate a block from its config record.

    ``in_channels`` carries one entry per source layer. For C2f/C2fi the
    ``repeats`` count is the number of bottlenecks; for other single-input
    kinds it repeats the block serially.
    """
    if repeats < 1:
        raise ConfigError(f"{kind}: repeats must be >= 1, got {repeats}")
    a = normalize_args(kind, args)

    if kind == "Concat":
        return ConcatBlock(in_channels)
    if kind == "Detect":
        if num_classes is None:
            raise ConfigError("Detect: num_classes not provided")
        return DetectHead(in_channels, num_classes, a["reg_max"])

    if len(in_channels) != 1:
        raise ConfigError(f"{kind}: expects exactly 1 source, got {len(in_channels)}")
    c_in = in_channels[0]

    if kind in ("C2f", "C2fi"):
        shortcut = a["shortcut"] if kind == "C2f" else False
        return C2fBlock(c_in, a["out_channels"], repeats, shortcut)

    def make(c_in: int):
        if kind == "Conv":
            return ConvBlock(c_in, a["out_channels"], a["kernel"], a["stride"], a["groups"])
        if kind == "DWSeparable":
            return DWSeparableBlock(c_in, a["out_channels"], a["kernel"], a["stride"])
        if kind == "GhostConv":
            return GhostConvBlock(c_in, a["out_channels"], a["kernel"], a["stride"])
        if kind == "PhantomConv":
            return PhantomConvBlock(c_in, a["out_channels"], a["stride"], a["groups"], a["kernel"])
        if kind == "SPPF":
            return SPPFBlock(c_in, a["out_channels"], a["pool_kernel"])
        return UpsampleBlock(c_in, a["factor"])

    if repeats == 1:
        return make(c_in)
    seq = []
    for _ in range(repeats):
        blk = make(c_in)
        seq.append(blk)
        c_in = blk.out_channels
    return SequentialBlock(seq)
