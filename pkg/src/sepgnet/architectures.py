"""Builders for the miniature ResNet18 / ResNet50 / UNet families.

Networks are assembled from named blocks so experiments can swap convolution
strategies per block (the unit used by the ablation passes). Channel widths
follow the reference plans scaled by ``width_scale`` and rounded to powers of
two with a floor of 8, which keeps every gated mask construction on its
square power-of-two fast path.

The stem is a single 3x3 stride-1 convolution: inputs here are small patches
or tiles where an aggressive downsampling stem would collapse resolution.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from . import relmatrix as rm
from .autodiff import Tensor
from .layers import (
    BatchNorm2d,
    BlockSpec,
    ConvLayerSpec,
    ConvTranspose2d,
    DoubleConvBlock,
    Linear,
    MaskedConv2d,
    Module,
    make_block,
)

FAMILIES = ("resnet18", "resnet50", "unet")

RESNET_BLOCKS = ("InConv", "Layer1", "Layer2", "Layer3", "Layer4")
UNET_BLOCKS = (
    "InConv",
    "Down1",
    "Down2",
    "Down3",
    "Down4",
    "Up1",
    "Up2",
    "Up3",
    "Up4",
)

BLOCK_STRATEGIES = ("regular", "group", "dgconv", "fgconv")


def canonical_blocks(family: str) -> tuple[str, ...]:
    if family == "unet":
        return UNET_BLOCKS
    if family in ("resnet18", "resnet50"):
        return RESNET_BLOCKS
    raise ValueError(f"unknown family {family!r}")


def scaled_width(base: int, width_scale: float) -> int:
    """Scale a channel plan entry and snap to a power of two, at least 8."""
    value = base * width_scale
    if value <= 0:
        raise ValueError("width scale must be positive")
    return max(8, 2 ** int(round(math.log2(value))))


@dataclass(frozen=True)
class ArchSpec:
    """Everything needed to build one network deterministically."""

    family: str
    num_classes: int
    in_channels: int
    width_scale: float = 1.0
    task: str = ""
    block_strategies: dict = field(default_factory=dict)
    groups: int = 1
    sensor_widths: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if not 0 < self.width_scale <= 1:
            raise ValueError("width_scale must be in (0, 1]")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.in_channels < 1:
            raise ValueError("need at least one input channel")
        task = self.task or ("segmentation" if self.family == "unet" else "patch_classification")
        if task not in ("patch_classification", "segmentation"):
            raise ValueError(f"unknown task {task!r}")
        object.__setattr__(self, "task", task)
        known = canonical_blocks(self.family)
        for name, strategy in self.block_strategies.items():
            if name not in known:
                raise ValueError(f"unknown block name {name!r} for {self.family}")
            if strategy not in BLOCK_STRATEGIES:
                raise ValueError(f"unknown strategy {strategy!r} for block {name}")
        if self.sensor_widths is not None:
            object.__setattr__(self, "sensor_widths", tuple(int(w) for w in self.sensor_widths))

    def strategy_of(self, block: str) -> str:
        return self.block_strategies.get(block, "regular")


def uniform_strategies(family: str, strategy: str) -> dict:
    return {name: strategy for name in canonical_blocks(family)}


class Stem(Module):
    """Single 3x3 stride-1 convolution with batch norm and relu."""

    def __init__(self, spec: BlockSpec, dtype=np.float32):
        from .layers import _conv_for

        self.spec = spec
        self.conv = _conv_for(spec, spec.c_in, spec.c_out, 3, 1, 1, "main", True, dtype)
        self.bn = BatchNorm2d(spec.c_out, dtype=dtype)

    def children(self):
        return [self.conv, self.bn]

    def masked_convs(self):
        return [self.conv] if self.conv.current_mask() is not None else []

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return ad.relu(self.bn.forward(self.conv.forward(x, training), training))


class BlockSequence(Module):
    def __init__(self, blocks: list[Module]):
        self.blocks = blocks

    def children(self):
        return list(self.blocks)

    def init_params(self, rng, scheme="uniform", zero_init_residual=False):
        for block in self.blocks:
            block.init_params(rng, scheme, zero_init_residual)

    def masked_convs(self):
        out = []
        for block in self.blocks:
            out.extend(block.masked_convs())
        return out

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        for block in self.blocks:
            x = block.forward(x, training)
        return x


class DownBlock(Module):
    """Max-pool halving followed by a DoubleConv."""

    def __init__(self, double_conv: DoubleConvBlock):
        self.double_conv = double_conv

    def children(self):
        return [self.double_conv]

    def init_params(self, rng, scheme="uniform", zero_init_residual=False):
        self.double_conv.init_params(rng, scheme, zero_init_residual)

    def masked_convs(self):
        return self.double_conv.masked_convs()

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return self.double_conv.forward(ad.max_pool2d(x, 2), training)


class UpBlock(Module):
    """Transpose-conv upsampling, skip concatenation, then a DoubleConv."""

    def __init__(self, up: ConvTranspose2d, double_conv: DoubleConvBlock):
        self.up = up
        self.double_conv = double_conv

    def children(self):
        return [self.up, self.double_conv]

    def init_params(self, rng, scheme="uniform", zero_init_residual=False):
        self.up.init_params(rng, scheme)
        self.double_conv.init_params(rng, scheme, zero_init_residual)

    def masked_convs(self):
        return self.double_conv.masked_convs()

    def forward(self, x: Tensor, skip: Tensor, training: bool = False) -> Tensor:
        x = self.up.forward(x, training)
        return self.double_conv.forward(ad.concat([skip, x], axis=1), training)


def _block_kwargs(spec: ArchSpec, block_name: str, first_in_block: bool):
    strategy = spec.strategy_of(block_name)
    kwargs = {"strategy": strategy, "groups": spec.groups}
    if (
        strategy in ("group", "fgconv")
        and block_name == "InConv"
        and first_in_block
        and spec.sensor_widths is not None
    ):
        kwargs["input_widths"] = spec.sensor_widths
    return kwargs


class ResNetClassifier(Module):
    def __init__(self, spec: ArchSpec, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        depth50 = spec.family == "resnet50"
        plan = [256, 512, 1024, 2048] if depth50 else [64, 128, 256, 512]
        counts = [2, 3, 5, 2] if depth50 else [2, 2, 2, 2]
        kind = "bottleneck" if depth50 else "double_conv"
        widths = [scaled_width(c, spec.width_scale) for c in plan]
        stem_width = scaled_width(64, spec.width_scale)

        self.named_blocks: dict[str, Module] = {}
        self.named_blocks["InConv"] = Stem(
            BlockSpec(
                "double_conv",
                spec.in_channels,
                stem_width,
                residual=False,
                **_block_kwargs(spec, "InConv", True),
            ),
            dtype=dtype,
        )
        c_prev = stem_width
        for idx, (width, count) in enumerate(zip(widths, counts), start=1):
            name = f"Layer{idx}"
            blocks = []
            for b in range(count):
                stride = 2 if (idx > 1 and b == 0) else 1
                blocks.append(
                    make_block(
                        BlockSpec(
                            kind,
                            c_prev,
                            width,
                            residual=True,
                            stride=stride,
                            **_block_kwargs(spec, name, b == 0),
                        ),
                        dtype=dtype,
                    )
                )
                c_prev = width
            self.named_blocks[name] = BlockSequence(blocks)
        self.head = Linear(c_prev, spec.num_classes, dtype=dtype)

    def children(self):
        return list(self.named_blocks.values()) + [self.head]

    def init_params(self, rng, scheme="uniform", zero_init_residual=False):
        for name, block in self.named_blocks.items():
            if name == "InConv":
                block.init_params(rng, scheme)
            else:
                block.init_params(rng, scheme, zero_init_residual)
        self.head.init_params(rng, scheme)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        for block in self.named_blocks.values():
            x = block.forward(x, training)
        return self.head.forward(ad.global_average_pool(x), training)


class UNetSegmenter(Module):
    def __init__(self, spec: ArchSpec, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        w0 = scaled_width(64, spec.width_scale)
        down_plan = [scaled_width(c, spec.width_scale) for c in (128, 256, 512, 1024)]
        up_plan = [scaled_width(c, spec.width_scale) for c in (512, 256, 128, 64)]

        self.named_blocks: dict[str, Module] = {}
        self.named_blocks["InConv"] = DoubleConvBlock(
            BlockSpec(
                "double_conv",
                spec.in_channels,
                w0,
                residual=False,
                **_block_kwargs(spec, "InConv", True),
            ),
            dtype=dtype,
        )
        encoder_widths = [w0] + down_plan
        for i, width in enumerate(down_plan, start=1):
            name = f"Down{i}"
            self.named_blocks[name] = DownBlock(
                DoubleConvBlock(
                    BlockSpec(
                        "double_conv",
                        encoder_widths[i - 1],
                        width,
                        residual=False,
                        **_block_kwargs(spec, name, True),
                    ),
                    dtype=dtype,
                )
            )
        c_prev = down_plan[-1]
        skip_widths = list(reversed(encoder_widths[:-1]))  # skips for Up1..Up4
        for i, width in enumerate(up_plan, start=1):
            name = f"Up{i}"
            up = ConvTranspose2d(c_prev, width, k=2, stride=2, dtype=dtype)
            merged = width + skip_widths[i - 1]
            self.named_blocks[name] = UpBlock(
                up,
                DoubleConvBlock(
                    BlockSpec(
                        "double_conv",
                        merged,
                        width,
                        residual=False,
                        **_block_kwargs(spec, name, True),
                    ),
                    dtype=dtype,
                ),
            )
            c_prev = width
        self.out_conv = MaskedConv2d(
            ConvLayerSpec(c_prev, spec.num_classes, 1, 1, 0, "regular"),
            bias=True,
            dtype=dtype,
        )

    def children(self):
        return list(self.named_blocks.values()) + [self.out_conv]

    def init_params(self, rng, scheme="uniform", zero_init_residual=False):
        for block in self.named_blocks.values():
            block.init_params(rng, scheme, zero_init_residual)
        self.out_conv.init_params(rng, scheme)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise ValueError("segmentation input spatial size must be divisible by 16")
        skips = []
        x = self.named_blocks["InConv"].forward(x, training)
        skips.append(x)
        for i in range(1, 5):
            x = self.named_blocks[f"Down{i}"].forward(x, training)
            if i < 4:
                skips.append(x)
        for i in range(1, 5):
            x = self.named_blocks[f"Up{i}"].forward(x, skips[-i], training)
        return self.out_conv.forward(x, training)


def build(spec: ArchSpec, dtype=np.float32) -> Module:
    """Construct the network for a spec; parameters start at zero until init."""
    if spec.family == "unet":
        return UNetSegmenter(spec, dtype=dtype)
    return ResNetClassifier(spec, dtype=dtype)


@dataclass(frozen=True)
class MaskRecord:
    block: str
    layer_index: int
    groups: int
    sparsity: float
    origin: str


def group_structure_report(network) -> list[MaskRecord]:
    """One record per masked convolution, in forward order, from current gates."""
    records = []
    index = 0
    for name, block in network.named_blocks.items():
        for conv in block.masked_convs():
            mask = conv.current_mask()
            records.append(
                MaskRecord(
                    block=name,
                    layer_index=index,
                    groups=rm.count_groups(mask),
                    sparsity=rm.sparsity(mask),
                    origin=mask.origin,
                )
            )
            index += 1
    if not records:
        warnings.warn("network has no masked layers; group-structure report is empty")
    return records


def block_parameter_counts(network) -> dict[str, int]:
    counts = {name: block.parameter_count() for name, block in network.named_blocks.items()}
    if isinstance(network, ResNetClassifier):
        counts["Head"] = network.head.parameter_count()
    else:
        counts["OutConv"] = network.out_conv.parameter_count()
    return counts


def _signature_lines(module, prefix: str, lines: list[str]) -> None:
    if isinstance(module, MaskedConv2d):
        s = module.spec
        part = ""
        if s.partition is not None:
            part = f",part={list(s.partition.input_widths)}->{list(s.partition.output_widths)}"
        bias = ",bias" if module.bias is not None else ""
        lines.append(
            f"{prefix}conv(cin={s.c_in},cout={s.c_out},k={s.k},s={s.stride},p={s.padding},"
            f"strategy={s.strategy}{part}{bias})"
        )
    elif isinstance(module, BatchNorm2d):
        lines.append(f"{prefix}bn(c={module.channels},eps={module.eps},mom={module.momentum})")
    elif isinstance(module, ConvTranspose2d):
        lines.append(
            f"{prefix}convT(cin={module.c_in},cout={module.c_out},k={module.k},s={module.stride})"
        )
    elif isinstance(module, Linear):
        lines.append(f"{prefix}linear(cin={module.c_in},cout={module.c_out})")
    else:
        lines.append(f"{prefix}{type(module).__name__}")
    for i, child in enumerate(module.children()):
        _signature_lines(child, prefix + f"{i}.", lines)


def architecture_signature(network) -> str:
    lines: list[str] = []
    for name, block in network.named_blocks.items():
        _signature_lines(block, name + ":", lines)
    if isinstance(network, ResNetClassifier):
        _signature_lines(network.head, "Head:", lines)
    else:
        _signature_lines(network.out_conv, "OutConv:", lines)
    return "\n".join(lines)


def architecture_hash(network) -> str:
    return hashlib.sha256(architecture_signature(network).encode()).hexdigest()
