"""Binary relationship matrices for convolutions with learnable group structure.

A relationship matrix is a binary (c_out, c_in) mask: entry (i, j) = 1 means
input channel j participates in the computation of output channel i. Square
power-of-two masks are generated from a gate vector as a Kronecker product of
2x2 factors (each factor is all-ones for an open gate, identity for a closed
one). Rectangular channel counts are handled by row/column duplication and
top-left cropping.

Everything here is pure numpy on immutable inputs; the differentiable twin of
the gated construction lives in :mod:`sepgnet.layers`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Sequence

import numpy as np

__all__ = [
    "DegenerateMaskError",
    "GateVector",
    "RelationshipMatrix",
    "ShapeParams",
    "ChannelPartition",
    "binarize",
    "build_square_mask",
    "expand_mask",
    "reduce_mask",
    "shape_params",
    "crop_mask",
    "assemble_mask",
    "fixed_group_mask",
    "intersect_masks",
    "count_groups",
    "sparsity",
    "mask_to_text",
    "mask_from_text",
]

MASK_DTYPE = np.uint8


class DegenerateMaskError(ValueError):
    """A mask operation produced an output channel with no input connections."""


def binarize(raw) -> np.ndarray:
    """Map a real gate vector to {0, 1}: nonnegative entries open the gate."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1 or raw.size < 1:
        raise ValueError("gate vector must be one-dimensional and non-empty")
    return (raw >= 0.0).astype(MASK_DTYPE)


@dataclass(frozen=True)
class GateVector:
    """Continuous gate values and their sign-binarized counterpart."""

    raw: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float64)
        if raw.ndim != 1 or raw.size < 1:
            raise ValueError("gate vector must be one-dimensional and non-empty")
        raw.setflags(write=False)
        object.__setattr__(self, "raw", raw)

    def __len__(self) -> int:
        return self.raw.size

    @property
    def binary(self) -> np.ndarray:
        return binarize(self.raw)


@dataclass(frozen=True)
class RelationshipMatrix:
    """Validated binary connectivity mask with a provenance tag.

    Raises DegenerateMaskError on construction if any row is all-zero, so a
    mask that would silently disconnect an output channel never escapes.
    """

    entries: np.ndarray
    origin: str = "unspecified"

    def __post_init__(self):
        entries = np.asarray(self.entries)
        if entries.ndim != 2:
            raise ValueError("mask must be a 2-D matrix")
        if not np.isin(entries, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        entries = entries.astype(MASK_DTYPE)
        if entries.shape[0] < 1 or entries.shape[1] < 1:
            raise ValueError("mask must have at least one row and column")
        dead = np.flatnonzero(entries.sum(axis=1) == 0)
        if dead.size:
            raise DegenerateMaskError(
                f"output channels {dead.tolist()} read no input channels"
            )
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    @property
    def c_out(self) -> int:
        return self.entries.shape[0]

    @property
    def c_in(self) -> int:
        return self.entries.shape[1]


_ONES2 = np.ones((2, 2), dtype=MASK_DTYPE)
_EYE2 = np.eye(2, dtype=MASK_DTYPE)


def build_square_mask(gates) -> RelationshipMatrix:
    """Kronecker-factored square mask from binary gates.

    Factor i is all-ones when gates[i] = 1 and identity when gates[i] = 0;
    factors are combined left to right, the first gate outermost. The result
    is a (2^K, 2^K) mask for K gates.
    """
    if isinstance(gates, GateVector):
        gates = gates.binary
    gates = np.asarray(gates)
    if gates.ndim != 1:
        raise ValueError("gates must be a vector")
    if gates.size and not np.isin(gates, (0, 1)).all():
        raise ValueError("gates must be binary; use binarize() first")
    factors = [_ONES2 if g else _EYE2 for g in gates.astype(np.int64)]
    mask = reduce(np.kron, factors, np.ones((1, 1), dtype=MASK_DTYPE))
    tag = "".join(str(int(g)) for g in gates)
    return RelationshipMatrix(mask, origin=f"gated(g={tag},mode=square)")


def _entries(mask) -> np.ndarray:
    if isinstance(mask, RelationshipMatrix):
        return mask.entries
    return np.asarray(mask, dtype=MASK_DTYPE)


def expansion_matrix(n: int, r: int) -> np.ndarray:
    """The constant (r*n, n) row-duplication operator, kron(I_n, ones(r, 1))."""
    return np.kron(np.eye(n, dtype=MASK_DTYPE), np.ones((r, 1), dtype=MASK_DTYPE))


def expand_mask(base, r: int) -> RelationshipMatrix:
    """Duplicate each row of a square mask r times: (n, n) -> (r*n, n)."""
    entries = _entries(base)
    n = entries.shape[0]
    if entries.shape[1] != n:
        raise ValueError("expand requires a square base mask")
    if r < 2:
        raise ValueError("duplication factor must be >= 2 (square masks need no expansion)")
    out = expansion_matrix(n, r) @ entries
    return RelationshipMatrix(out, origin=f"expanded(r={r})")


def reduce_mask(base, r: int) -> RelationshipMatrix:
    """Duplicate each column of a square mask r times: (n, n) -> (n, r*n)."""
    entries = _entries(base)
    n = entries.shape[0]
    if entries.shape[1] != n:
        raise ValueError("reduce requires a square base mask")
    if r < 2:
        raise ValueError("duplication factor must be >= 2 (square masks need no reduction)")
    out = entries @ expansion_matrix(n, r).T
    return RelationshipMatrix(out, origin=f"reduced(r={r})")


@dataclass(frozen=True)
class ShapeParams:
    """Geometry of the mask construction for a (c_in, c_out) layer.

    num_gates is the log2 size of the square base mask, repeat the row/column
    duplication factor, and mode one of square / expand / reduce / crop.
    """

    num_gates: int
    repeat: int
    mode: str

    @property
    def base_size(self) -> int:
        return 1 << self.num_gates


def _ceil_log2(n: int) -> int:
    return max(int(math.ceil(math.log2(n))), 0) if n > 1 else 0


def shape_params(c_in: int, c_out: int) -> ShapeParams:
    """Pick the mask construction route for a channel pair.

    Channel ratios of at least two go through row (expand) or column (reduce)
    duplication of a small square base; everything else uses a square base of
    the next power of two, cropped to size. An exact power-of-two square pair
    needs no adjustment at all.
    """
    if c_in < 1 or c_out < 1:
        raise ValueError("channel counts must be positive")
    if c_in == c_out and c_in == 1 << _ceil_log2(c_in):
        return ShapeParams(_ceil_log2(c_in), 1, "square")
    if c_out >= 2 * c_in:
        return ShapeParams(_ceil_log2(c_in), -(-c_out // c_in), "expand")
    if c_in >= 2 * c_out:
        return ShapeParams(_ceil_log2(c_out), -(-c_in // c_out), "reduce")
    return ShapeParams(_ceil_log2(max(c_in, c_out)), 1, "crop")


def crop_mask(mask, c_out: int, c_in: int) -> RelationshipMatrix:
    """Keep the first c_out rows and c_in columns.

    Raises DegenerateMaskError if discarding columns leaves some kept row
    all-zero (that output channel would be dead).
    """
    entries = _entries(mask)
    if entries.shape[0] < c_out or entries.shape[1] < c_in:
        raise ValueError(
            f"cannot crop {entries.shape} mask to ({c_out}, {c_in}): too small"
        )
    origin = mask.origin if isinstance(mask, RelationshipMatrix) else "unspecified"
    return RelationshipMatrix(entries[:c_out, :c_in], origin=origin)


def assemble_mask(gates, c_in: int, c_out: int) -> RelationshipMatrix:
    """Full construction: square base from gates, duplicate, crop to (c_out, c_in)."""
    if isinstance(gates, GateVector):
        gates = gates.binary
    gates = np.asarray(gates)
    params = shape_params(c_in, c_out)
    if gates.size != params.num_gates:
        raise ValueError(
            f"expected {params.num_gates} gates for ({c_in} -> {c_out}), got {gates.size}"
        )
    base = build_square_mask(gates)
    if params.mode == "expand":
        grown = expand_mask(base, params.repeat)
    elif params.mode == "reduce":
        grown = reduce_mask(base, params.repeat)
    else:
        grown = base
    tag = "".join(str(int(g)) for g in gates)
    cropped = crop_mask(grown, c_out, c_in)
    origin = f"gated(g={tag},r={params.repeat},mode={params.mode})"
    return RelationshipMatrix(cropped.entries, origin=origin)


@dataclass(frozen=True)
class ChannelPartition:
    """Aligned input/output channel group widths for fixed group convolution."""

    input_widths: tuple[int, ...]
    output_widths: tuple[int, ...]

    def __post_init__(self):
        inw = tuple(int(w) for w in self.input_widths)
        outw = tuple(int(w) for w in self.output_widths)
        if len(inw) != len(outw):
            raise ValueError("input and output width lists must have equal length")
        if len(inw) < 1:
            raise ValueError("partition needs at least one group")
        if any(w < 1 for w in inw + outw):
            raise ValueError("group widths must be positive")
        object.__setattr__(self, "input_widths", inw)
        object.__setattr__(self, "output_widths", outw)

    @property
    def num_groups(self) -> int:
        return len(self.input_widths)

    @property
    def c_in(self) -> int:
        return sum(self.input_widths)

    @property
    def c_out(self) -> int:
        return sum(self.output_widths)


def even_partition(c_in: int, c_out: int, groups: int) -> ChannelPartition:
    """Split both channel counts into `groups` equal groups."""
    if c_in % groups or c_out % groups:
        raise ValueError(
            f"cannot split ({c_in} -> {c_out}) evenly into {groups} groups"
        )
    return ChannelPartition(
        (c_in // groups,) * groups, (c_out // groups,) * groups
    )


def fixed_group_mask(partition: ChannelPartition) -> RelationshipMatrix:
    """Block-diagonal mask: output group i reads exactly input group i."""
    mask = np.zeros((partition.c_out, partition.c_in), dtype=MASK_DTYPE)
    row = col = 0
    for h, w in zip(partition.output_widths, partition.input_widths):
        mask[row : row + h, col : col + w] = 1
        row += h
        col += w
    return RelationshipMatrix(
        mask,
        origin=f"fixed_group({list(partition.input_widths)}->{list(partition.output_widths)})",
    )


def intersect_masks(fixed, learned) -> RelationshipMatrix:
    """Element-wise AND of a fixed mask and a learned one.

    The result is at least as sparse as either operand; a row going all-zero
    raises DegenerateMaskError.
    """
    a = _entries(fixed)
    b = _entries(learned)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return RelationshipMatrix(a * b, origin="fgconv")


def count_groups(mask) -> int:
    """Number of independent channel groups in a mask.

    Computed as connected components of the bipartite graph on output rows
    and input columns with an edge wherever the mask is 1. Input columns that
    feed nothing count as their own (dead) groups.
    """
    entries = _entries(mask)
    rows, cols = entries.shape
    parent = list(range(rows + cols))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in zip(*np.nonzero(entries)):
        ri, cj = find(int(i)), find(rows + int(j))
        if ri != cj:
            parent[ri] = cj
    return len({find(x) for x in range(rows + cols)})


def sparsity(mask) -> float:
    """Fraction of zero entries."""
    entries = _entries(mask)
    return float(1.0 - entries.mean())


def mask_to_text(mask) -> str:
    """Serialize to the text format: 'rows cols' then one 0/1 row per line."""
    entries = _entries(mask)
    lines = [f"{entries.shape[0]} {entries.shape[1]}"]
    for row in entries:
        lines.append(" ".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def mask_from_text(text: str) -> RelationshipMatrix:
    """Parse the text format produced by mask_to_text."""
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty mask text")
    header = lines[0].split()
    if len(header) != 2:
        raise ValueError(f"bad mask header: {lines[0]!r}")
    rows, cols = int(header[0]), int(header[1])
    if len(lines) - 1 != rows:
        raise ValueError(f"expected {rows} mask rows, found {len(lines) - 1}")
    data = []
    for ln in lines[1:]:
        vals = [int(v) for v in ln.split()]
        if len(vals) != cols:
            raise ValueError(f"expected {cols} columns, found {len(vals)}")
        data.append(vals)
    return RelationshipMatrix(np.array(data, dtype=MASK_DTYPE), origin="loaded")
