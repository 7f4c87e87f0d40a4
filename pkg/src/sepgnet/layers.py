"""Convolution layer variants and the DoubleConv / Bottleneck building blocks.

A layer's channel connectivity is selected by strategy:

* ``regular``    - dense kernel, no mask.
* ``group``      - fixed block-diagonal mask from a channel partition.
* ``depthwise``  - fixed identity mask (requires c_in == c_out).
* ``separable``  - fixed maximally-grouped mask (all gates closed); equals
                   depthwise for square layers and generalizes it to
                   rectangular ones. Used for the 1x1 convolutions inside
                   gated Bottleneck blocks.
* ``dgconv``     - mask built from learnable sign gates each forward pass.
* ``fgconv``     - like dgconv, intersected with a fixed group mask, so the
                   layer always has at least the fixed grouping.

For gated strategies the mask is assembled from the gate vector with
differentiable tensor ops (straight-through sign, Kronecker factors, row or
column duplication, cropping), so the gates receive gradients through the
construction while the weight gradient is masked exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import autodiff as ad
from . import relmatrix as rm
from .autodiff import Tensor

STRATEGIES = ("regular", "group", "depthwise", "separable", "dgconv", "fgconv")


@dataclass(frozen=True)
class ConvLayerSpec:
    """Shape, geometry and strategy of one convolution layer."""

    c_in: int
    c_out: int
    k: int
    stride: int = 1
    padding: int = 0
    strategy: str = "regular"
    partition: rm.ChannelPartition | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "depthwise" and self.c_in != self.c_out:
            raise ValueError("depthwise requires c_in == c_out")
        if self.strategy in ("group", "fgconv"):
            if self.partition is None:
                raise ValueError(f"strategy {self.strategy!r} needs a channel partition")
            if self.partition.c_in != self.c_in or self.partition.c_out != self.c_out:
                raise ValueError("partition widths do not match channel counts")


class Module:
    """Tiny composable module base: parameters, buffers, state, init."""

    def children(self) -> list["Module"]:
        return []

    def own_parameters(self) -> list[Tensor]:
        return []

    def own_buffers(self) -> list[np.ndarray]:
        return []

    def parameters(self) -> list[Tensor]:
        out = list(self.own_parameters())
        for child in self.children():
            out.extend(child.parameters())
        return out

    def state_arrays(self) -> list[np.ndarray]:
        out = [p.data for p in self.own_parameters()]
        out.extend(self.own_buffers())
        for child in self.children():
            out.extend(child.state_arrays())
        return out

    def load_state_arrays(self, arrays: Iterable[np.ndarray]) -> None:
        arrays = list(arrays)
        targets = self.state_arrays()
        if len(arrays) != len(targets):
            raise ValueError(
                f"checkpoint has {len(arrays)} arrays, network expects {len(targets)}"
            )
        for target, src in zip(targets, arrays):
            if target.shape != src.shape:
                raise ValueError(
                    f"checkpoint shape {src.shape} does not match parameter {target.shape}"
                )
            target[...] = src.astype(target.dtype)

    def init_params(self, rng: np.random.Generator, scheme: str = "uniform") -> None:
        for child in self.children():
            child.init_params(rng, scheme)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


def _conv_weight_init(rng, shape, fan_in, scheme, dtype):
    if scheme == "uniform":
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)
    if scheme == "he":
        std = np.sqrt(2.0 / fan_in)
        return (rng.standard_normal(shape) * std).astype(dtype)
    raise ValueError(f"unknown init scheme {scheme!r}")


class MaskedConv2d(Module):
    """Convolution whose channel connectivity follows its strategy."""

    def __init__(self, spec: ConvLayerSpec, bias: bool = False, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        self.weight = Tensor(
            np.zeros((spec.c_out, spec.c_in, spec.k, spec.k), dtype=dtype),
            requires_grad=True,
        )
        self.bias = (
            Tensor(np.zeros(spec.c_out, dtype=dtype), requires_grad=True) if bias else None
        )
        self.gates: Tensor | None = None
        self._fixed_mask: rm.RelationshipMatrix | None = None
        self._u0: np.ndarray | None = None

        s = spec.strategy
        if s == "regular":
            pass
        elif s == "group":
            self._fixed_mask = rm.fixed_group_mask(spec.partition)
        elif s == "depthwise":
            self._fixed_mask = rm.RelationshipMatrix(
                np.eye(spec.c_in, dtype=rm.MASK_DTYPE), origin="depthwise"
            )
        elif s == "separable":
            params = rm.shape_params(spec.c_in, spec.c_out)
            mask = rm.assemble_mask(
                np.zeros(params.num_gates, dtype=rm.MASK_DTYPE), spec.c_in, spec.c_out
            )
            self._fixed_mask = rm.RelationshipMatrix(mask.entries, origin="separable")
        elif s in ("dgconv", "fgconv"):
            params = rm.shape_params(spec.c_in, spec.c_out)
            self.gates = Tensor(np.zeros(params.num_gates, dtype=dtype), requires_grad=True)
            if s == "fgconv":
                self._u0 = rm.fixed_group_mask(spec.partition).entries.astype(dtype)

    def own_parameters(self) -> list[Tensor]:
        out = [self.weight]
        if self.bias is not None:
            out.append(self.bias)
        if self.gates is not None:
            out.append(self.gates)
        return out

    def init_params(self, rng, scheme: str = "uniform") -> None:
        spec = self.spec
        fan_in = spec.c_in * spec.k * spec.k
        self.weight.data[...] = _conv_weight_init(
            rng, self.weight.data.shape, fan_in, scheme, self.dtype
        )
        if self.bias is not None:
            bound = 1.0 / np.sqrt(fan_in)
            self.bias.data[...] = rng.uniform(-bound, bound, size=spec.c_out).astype(self.dtype)
        if self.gates is not None:
            # dense start: all gates open, as an all-ones mask
            self.gates.data[...] = rng.uniform(0.0, 0.1, size=self.gates.data.shape).astype(
                self.dtype
            )

    def mask_tensor(self) -> Tensor | None:
        """Differentiable mask for gated strategies, constant otherwise."""
        if self.gates is not None:
            return build_mask_tensor(self.gates, self.spec.c_in, self.spec.c_out, self._u0)
        if self._fixed_mask is not None:
            return Tensor(self._fixed_mask.entries.astype(self.dtype))
        return None

    def current_mask(self) -> rm.RelationshipMatrix | None:
        """Snapshot of the effective mask as plain mask algebra (for reports)."""
        if self.gates is not None:
            mask = rm.assemble_mask(
                rm.binarize(self.gates.data), self.spec.c_in, self.spec.c_out
            )
            if self._u0 is not None:
                mask = rm.intersect_masks(self._u0, mask)
            return mask
        return self._fixed_mask

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        spec = self.spec
        mask = self.mask_tensor()
        if mask is None:
            w = self.weight
        else:
            if self.gates is not None and np.any(mask.data.sum(axis=1) == 0):
                dead = np.flatnonzero(mask.data.sum(axis=1) == 0)
                raise rm.DegenerateMaskError(
                    f"gated mask leaves output channels {dead.tolist()} disconnected"
                )
            w = ad.mul(self.weight, ad.reshape(mask, (spec.c_out, spec.c_in, 1, 1)))
        out = ad.conv2d(x, w, stride=spec.stride, padding=spec.padding)
        if self.bias is not None:
            out = ad.add(out, ad.reshape(self.bias, (1, spec.c_out, 1, 1)))
        return out


def build_mask_tensor(gates: Tensor, c_in: int, c_out: int, u0: np.ndarray | None = None) -> Tensor:
    """Assemble the connectivity mask from gates with differentiable ops.

    Mirrors :func:`sepgnet.relmatrix.assemble_mask` but stays inside the
    autodiff graph: each flipped construction step is linear in the mask
    entries, so gradient flows back to the gates through the straight-through
    sign.
    """
    params = rm.shape_params(c_in, c_out)
    if gates.size != params.num_gates:
        raise ValueError(
            f"expected {params.num_gates} gates for ({c_in} -> {c_out}), got {gates.size}"
        )
    dtype = gates.dtype
    ones2 = np.ones((2, 2), dtype=dtype)
    eye2 = np.eye(2, dtype=dtype)
    g = ad.sign_ste(gates)
    mask = Tensor(np.ones((1, 1), dtype=dtype))
    for i in range(params.num_gates):
        gi = ad.reshape(ad.slice_(g, slice(i, i + 1)), (1, 1))
        factor = ad.add(ad.mul(gi, ones2), ad.mul(ad.sub(1.0, gi), eye2))
        mask = ad.kron(mask, factor)
    if params.mode == "expand":
        mask = ad.matmul(rm.expansion_matrix(params.base_size, params.repeat).astype(dtype), mask)
    elif params.mode == "reduce":
        mask = ad.matmul(mask, rm.expansion_matrix(params.base_size, params.repeat).T.astype(dtype))
    mask = ad.slice_(mask, (slice(0, c_out), slice(0, c_in)))
    if u0 is not None:
        mask = ad.mul(mask, u0.astype(dtype))
    return mask


def dgconv_forward(
    x: Tensor,
    weight: Tensor,
    gates: Tensor,
    stride: int = 1,
    padding: int = 0,
    u0: np.ndarray | None = None,
) -> Tensor:
    """Functional gated convolution: mask from gates, applied to the kernel."""
    c_out, c_in = weight.shape[:2]
    mask = build_mask_tensor(gates, c_in, c_out, u0)
    if np.any(mask.data.sum(axis=1) == 0):
        dead = np.flatnonzero(mask.data.sum(axis=1) == 0)
        raise rm.DegenerateMaskError(
            f"gated mask leaves output channels {dead.tolist()} disconnected"
        )
    w = ad.mul(weight, ad.reshape(mask, (c_out, c_in, 1, 1)))
    return ad.conv2d(x, w, stride=stride, padding=padding)


def group_conv_forward(
    x: Tensor,
    kernels: list[Tensor],
    partition: rm.ChannelPartition,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Explicit per-group convolution followed by channel concatenation."""
    if len(kernels) != partition.num_groups:
        raise ValueError("one kernel per group required")
    if x.shape[1] != partition.c_in:
        raise ValueError(
            f"input has {x.shape[1]} channels, partition expects {partition.c_in}"
        )
    outs = []
    offset = 0
    for kernel, width in zip(kernels, partition.input_widths):
        piece = ad.slice_(x, (slice(None), slice(offset, offset + width)))
        outs.append(ad.conv2d(piece, kernel, stride=stride, padding=padding))
        offset += width
    return ad.concat(outs, axis=1)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def own_parameters(self):
        return [self.gamma, self.beta]

    def own_buffers(self):
        return [self.running_mean, self.running_var]

    def init_params(self, rng, scheme: str = "uniform") -> None:
        self.gamma.data[...] = 1.0
        self.beta.data[...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0

    def zero_gamma(self) -> None:
        self.gamma.data[...] = 0.0

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return ad.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=training,
            momentum=self.momentum,
            eps=self.eps,
        )


class ConvTranspose2d(Module):
    """Stride-2 learnable upsampling."""

    def __init__(self, c_in: int, c_out: int, k: int = 2, stride: int = 2, dtype=np.float32):
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.dtype = dtype
        self.weight = Tensor(np.zeros((c_in, c_out, k, k), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def own_parameters(self):
        return [self.weight, self.bias]

    def init_params(self, rng, scheme: str = "uniform") -> None:
        fan_in = self.c_out * self.k * self.k
        self.weight.data[...] = _conv_weight_init(
            rng, self.weight.data.shape, fan_in, scheme, self.dtype
        )
        bound = 1.0 / np.sqrt(fan_in)
        self.bias.data[...] = rng.uniform(-bound, bound, size=self.c_out).astype(self.dtype)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        out = ad.transpose_conv2d(x, self.weight, stride=self.stride)
        return ad.add(out, ad.reshape(self.bias, (1, self.c_out, 1, 1)))


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, dtype=np.float32):
        self.c_in, self.c_out = c_in, c_out
        self.dtype = dtype
        self.weight = Tensor(np.zeros((c_out, c_in), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def own_parameters(self):
        return [self.weight, self.bias]

    def init_params(self, rng, scheme: str = "uniform") -> None:
        self.weight.data[...] = _conv_weight_init(
            rng, self.weight.data.shape, self.c_in, scheme, self.dtype
        )
        bound = 1.0 / np.sqrt(self.c_in)
        self.bias.data[...] = rng.uniform(-bound, bound, size=self.c_out).astype(self.dtype)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


@dataclass(frozen=True)
class BlockSpec:
    """One DoubleConv or Bottleneck block and the strategy of its convolutions."""

    kind: str  # "double_conv" | "bottleneck"
    c_in: int
    c_out: int
    residual: bool = True
    stride: int = 1
    strategy: str = "regular"
    groups: int = 1
    input_widths: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("double_conv", "bottleneck"):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.strategy not in ("regular", "group", "dgconv", "fgconv"):
            raise ValueError(f"unknown block strategy {self.strategy!r}")
        if self.strategy in ("group", "fgconv") and self.groups < 1:
            raise ValueError("group strategies need a positive group count")


def _partition_for(spec: BlockSpec, c_in: int, c_out: int, first: bool) -> rm.ChannelPartition:
    g = spec.groups
    if first and spec.input_widths is not None:
        inw = spec.input_widths
        if sum(inw) != c_in:
            raise ValueError("input widths do not sum to the block input channels")
    else:
        if c_in % g:
            raise ValueError(f"{c_in} channels not divisible into {g} groups")
        inw = (c_in // g,) * g
    if c_out % g:
        raise ValueError(f"{c_out} channels not divisible into {g} groups")
    return rm.ChannelPartition(inw, (c_out // g,) * g)


def _conv_for(spec: BlockSpec, c_in, c_out, k, stride, padding, role, first, dtype):
    """Build one conv of a block under the block-level strategy.

    role is "main" for the layers a gated strategy replaces (the 3x3 convs of
    DoubleConv, the middle 3x3 of Bottleneck), "pointwise" for the 1x1
    Bottleneck convolutions (maximally grouped under gated strategies), and
    "shortcut" for residual projections. Hard-grouped strategies group the
    projection too; a dense projection would mix channels across groups and
    the network would no longer decompose into sensor branches.
    """
    strategy = spec.strategy
    if strategy == "regular":
        layer_strategy, partition = "regular", None
    elif strategy == "group":
        layer_strategy, partition = "group", _partition_for(spec, c_in, c_out, first)
    elif strategy in ("dgconv", "fgconv"):
        if role == "pointwise":
            layer_strategy, partition = "separable", None
        elif role == "shortcut":
            if strategy == "fgconv":
                layer_strategy, partition = "group", _partition_for(spec, c_in, c_out, first)
            else:
                layer_strategy, partition = "regular", None
        elif strategy == "fgconv":
            layer_strategy, partition = "fgconv", _partition_for(spec, c_in, c_out, first)
        else:
            layer_strategy, partition = "dgconv", None
    else:
        raise ValueError(strategy)
    return MaskedConv2d(
        ConvLayerSpec(c_in, c_out, k, stride, padding, layer_strategy, partition),
        dtype=dtype,
    )


class DoubleConvBlock(Module):
    """Two 3x3 convolutions with batch norm, optionally residual."""

    def __init__(self, spec: BlockSpec, dtype=np.float32):
        if spec.kind != "double_conv":
            raise ValueError("spec is not a double_conv block")
        self.spec = spec
        c_in, c_out = spec.c_in, spec.c_out
        self.conv1 = _conv_for(spec, c_in, c_out, 3, spec.stride, 1, "main", True, dtype)
        self.bn1 = BatchNorm2d(c_out, dtype=dtype)
        self.conv2 = _conv_for(spec, c_out, c_out, 3, 1, 1, "main", False, dtype)
        self.bn2 = BatchNorm2d(c_out, dtype=dtype)
        self.shortcut = None
        self.shortcut_bn = None
        if spec.residual and (spec.stride != 1 or c_in != c_out):
            self.shortcut = _conv_for(
                spec, c_in, c_out, 1, spec.stride, 0, "shortcut", True, dtype
            )
            self.shortcut_bn = BatchNorm2d(c_out, dtype=dtype)

    def children(self):
        out = [self.conv1, self.bn1, self.conv2, self.bn2]
        if self.shortcut is not None:
            out.extend([self.shortcut, self.shortcut_bn])
        return out

    def init_params(self, rng, scheme: str = "uniform", zero_init_residual: bool = False):
        for child in self.children():
            child.init_params(rng, scheme)
        if zero_init_residual and self.spec.residual:
            self.bn2.zero_gamma()

    def masked_convs(self) -> list[MaskedConv2d]:
        convs = [self.conv1, self.conv2]
        if self.shortcut is not None:
            convs.append(self.shortcut)
        return [c for c in convs if c.current_mask() is not None]

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        h = ad.relu(self.bn1.forward(self.conv1.forward(x, training), training))
        h = self.bn2.forward(self.conv2.forward(h, training), training)
        if self.spec.residual:
            if self.shortcut is not None:
                sc = self.shortcut_bn.forward(self.shortcut.forward(x, training), training)
            else:
                sc = x
            h = ad.add(h, sc)
        return ad.relu(h)


class BottleneckBlock(Module):
    """1x1 reduce, 3x3, 1x1 expand, with residual connection."""

    def __init__(self, spec: BlockSpec, dtype=np.float32):
        if spec.kind != "bottleneck":
            raise ValueError("spec is not a bottleneck block")
        if spec.c_out % 4:
            raise ValueError("bottleneck output channels must be divisible by 4")
        self.spec = spec
        c_in, c_out = spec.c_in, spec.c_out
        mid = c_out // 4
        self.conv1 = _conv_for(spec, c_in, mid, 1, 1, 0, "pointwise", True, dtype)
        self.bn1 = BatchNorm2d(mid, dtype=dtype)
        self.conv2 = _conv_for(spec, mid, mid, 3, spec.stride, 1, "main", False, dtype)
        self.bn2 = BatchNorm2d(mid, dtype=dtype)
        self.conv3 = _conv_for(spec, mid, c_out, 1, 1, 0, "pointwise", False, dtype)
        self.bn3 = BatchNorm2d(c_out, dtype=dtype)
        self.shortcut = None
        self.shortcut_bn = None
        if spec.stride != 1 or c_in != c_out:
            self.shortcut = _conv_for(
                spec, c_in, c_out, 1, spec.stride, 0, "shortcut", True, dtype
            )
            self.shortcut_bn = BatchNorm2d(c_out, dtype=dtype)

    def children(self):
        out = [self.conv1, self.bn1, self.conv2, self.bn2, self.conv3, self.bn3]
        if self.shortcut is not None:
            out.extend([self.shortcut, self.shortcut_bn])
        return out

    def init_params(self, rng, scheme: str = "uniform", zero_init_residual: bool = False):
        for child in self.children():
            child.init_params(rng, scheme)
        if zero_init_residual:
            self.bn3.zero_gamma()

    def masked_convs(self) -> list[MaskedConv2d]:
        convs = [self.conv1, self.conv2, self.conv3]
        if self.shortcut is not None:
            convs.append(self.shortcut)
        return [c for c in convs if c.current_mask() is not None]

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        h = ad.relu(self.bn1.forward(self.conv1.forward(x, training), training))
        h = ad.relu(self.bn2.forward(self.conv2.forward(h, training), training))
        h = self.bn3.forward(self.conv3.forward(h, training), training)
        if self.shortcut is not None:
            sc = self.shortcut_bn.forward(self.shortcut.forward(x, training), training)
        else:
            sc = x
        return ad.relu(ad.add(h, sc))


def make_block(spec: BlockSpec, dtype=np.float32) -> Module:
    if spec.kind == "double_conv":
        return DoubleConvBlock(spec, dtype=dtype)
    return BottleneckBlock(spec, dtype=dtype)
