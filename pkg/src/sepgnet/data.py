"""Synthetic multi-source datasets and dataset file I/O.

A dataset is a stacked multi-modality image with per-pixel integer labels
(-1 marks unlabeled pixels) plus disjoint train/test pixel index sets. The
image is tiled into square regions; each region carries one discrete level
per modality and the class is a function of the levels:

* ``separable``   - every modality's level equals the class, so any single
                    modality identifies it.
* ``cross_modal`` - the class is the sum of the modality levels modulo the
                    class count, a parity-style coupling: no single modality
                    carries any class information, the combination carries
                    all of it.

The level-to-pixel rendering depends on the modality's signal kind and keeps
the per-channel mean distinct per level, which is what the reference
classifiers below key on.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .container import ContainerFormatError, load_tensors, save_tensors
from .relmatrix import ChannelPartition

SIGNAL_KINDS = ("spectral_smooth", "elevation_like", "texture_like")
FUSION_MODES = ("separable", "cross_modal")
TASKS = ("patch_classification", "segmentation")


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    channels: int
    kind: str = "spectral_smooth"
    noise: float = 0.0

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("modality needs at least one channel")
        if self.kind not in SIGNAL_KINDS:
            raise ValueError(f"unknown signal kind {self.kind!r}")
        if self.noise < 0:
            raise ValueError("noise level must be nonnegative")
        if not self.name or any(c in self.name for c in ":,;|="):
            raise ValueError(f"bad modality name {self.name!r}")


@dataclass(frozen=True)
class SyntheticDataset:
    image: np.ndarray  # (C, H, W) float32
    labels: np.ndarray  # (H, W) int64, -1 = unlabeled
    num_classes: int
    train_indices: np.ndarray  # flat pixel indices
    test_indices: np.ndarray
    modalities: tuple[ModalitySpec, ...]
    fusion_difficulty: str
    informative: tuple[tuple[str, ...], ...]
    seed: int
    task: str

    @property
    def channels(self) -> int:
        return self.image.shape[0]

    def modality_slices(self) -> dict[str, slice]:
        out = {}
        offset = 0
        for m in self.modalities:
            out[m.name] = slice(offset, offset + m.channels)
            offset += m.channels
        return out

    def sensor_partition(self, output_widths) -> ChannelPartition:
        """Partition aligning input groups with the stacked modality channels."""
        return ChannelPartition(
            tuple(m.channels for m in self.modalities), tuple(output_widths)
        )


def _level_profile(kind: str, num_levels: int, channels: int) -> np.ndarray:
    """(num_levels, channels) per-level channel prototypes in [0, 1]."""
    levels = (np.arange(num_levels, dtype=np.float64) + 0.5) / num_levels
    j = np.arange(channels, dtype=np.float64)
    if kind == "elevation_like":
        return np.repeat(levels[:, None], channels, axis=1)
    # smooth spectral envelope scaled by the level; texture adds its pattern later
    envelope = 0.6 + 0.4 * np.sin(np.pi * j / max(channels - 1, 1))
    return levels[:, None] * envelope[None, :]


def generate(
    modalities,
    num_classes: int,
    size: int,
    seed: int,
    fusion_difficulty: str,
    task: str = "patch_classification",
    region: int = 8,
    border_ignore: int = 0,
) -> SyntheticDataset:
    """Deterministically synthesize a dataset for (spec, seed).

    The image is a grid of (region x region) pixel cells. Level combinations
    are tiled so every combination occurs (shuffled), sampled uniformly when
    the grid is smaller than the combination space. ``border_ignore`` strips
    that many pixels around each cell from the labels, keeping patch centers
    away from cell boundaries.
    """
    modalities = tuple(modalities)
    if not modalities:
        raise ValueError("need at least one modality")
    if fusion_difficulty not in FUSION_MODES:
        raise ValueError(f"unknown fusion difficulty {fusion_difficulty!r}")
    if fusion_difficulty == "cross_modal" and len(modalities) < 2:
        raise ValueError("cross_modal coupling needs at least two modalities")
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if size < region or size % region:
        raise ValueError("size must be a positive multiple of the region size")
    if task == "segmentation" and size % 16:
        raise ValueError("segmentation images must have size divisible by 16")
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if border_ignore < 0 or 2 * border_ignore >= region:
        raise ValueError("border_ignore must leave some interior pixels")

    rng = np.random.default_rng(seed)
    grid = size // region
    cells = grid * grid

    if fusion_difficulty == "separable":
        base = np.tile(np.arange(num_classes), -(-cells // num_classes))[:cells]
        rng.shuffle(base)
        class_grid = base.reshape(grid, grid)
        level_grids = [class_grid for _ in modalities]
        informative = tuple(
            tuple(m.name for m in modalities) for _ in range(num_classes)
        )
    else:
        combos = np.array(
            list(itertools.product(range(num_classes), repeat=len(modalities))),
            dtype=np.int64,
        )
        if cells >= len(combos):
            picks = np.tile(np.arange(len(combos)), -(-cells // len(combos)))[:cells]
        else:
            picks = rng.integers(0, len(combos), size=cells)
        rng.shuffle(picks)
        chosen = combos[picks]  # (cells, M)
        level_grids = [chosen[:, m].reshape(grid, grid) for m in range(len(modalities))]
        class_grid = chosen.sum(axis=1).reshape(grid, grid) % num_classes
        informative = tuple(() for _ in range(num_classes))

    labels = np.kron(class_grid, np.ones((region, region), dtype=np.int64))
    if border_ignore:
        cell_mask = np.zeros((region, region), dtype=bool)
        cell_mask[border_ignore:-border_ignore, border_ignore:-border_ignore] = True
        keep = np.tile(cell_mask, (grid, grid))
        labels = np.where(keep, labels, -1)

    planes = []
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    checker = (((xx + yy) % 2) * 2 - 1).astype(np.float64)
    for spec, level_grid in zip(modalities, level_grids):
        profile = _level_profile(spec.kind, num_classes, spec.channels)
        pixel_levels = np.kron(level_grid, np.ones((region, region), dtype=np.int64))
        plane = profile[pixel_levels].transpose(2, 0, 1)  # (channels, H, W)
        if spec.kind == "texture_like":
            plane = plane + 0.08 * checker[None, :, :]
        if spec.noise > 0:
            plane = plane + rng.normal(0.0, spec.noise, size=plane.shape)
        planes.append(plane)
    image = np.concatenate(planes, axis=0).astype(np.float32)

    labeled = np.flatnonzero(labels.reshape(-1) >= 0)
    train_parts, test_parts = [], []
    flat_labels = labels.reshape(-1)
    for cls in range(num_classes):
        cls_idx = labeled[flat_labels[labeled] == cls]
        cls_idx = rng.permutation(cls_idx)
        half = len(cls_idx) // 2
        train_parts.append(cls_idx[:half])
        test_parts.append(cls_idx[half:])
    train_indices = np.sort(np.concatenate(train_parts)).astype(np.int64)
    test_indices = np.sort(np.concatenate(test_parts)).astype(np.int64)

    return SyntheticDataset(
        image=image,
        labels=labels,
        num_classes=num_classes,
        train_indices=train_indices,
        test_indices=test_indices,
        modalities=modalities,
        fusion_difficulty=fusion_difficulty,
        informative=informative,
        seed=seed,
        task=task,
    )


def extract_patches(dataset: SyntheticDataset, patch_size: int, centers=None):
    """Center-aligned square patches with reflect padding at the borders.

    Returns (patches, labels): (M, C, p, p) float32 and (M,) int64. The patch
    center pixel carries the label. Centers default to every labeled pixel.
    """
    if patch_size % 2 != 1:
        raise ValueError("patch size must be odd")
    half = patch_size // 2
    c, h, w = dataset.image.shape
    if half > min(h, w) - 1:
        raise ValueError("patch does not fit within the reflected image")
    if centers is None:
        centers = np.flatnonzero(dataset.labels.reshape(-1) >= 0)
    centers = np.asarray(centers, dtype=np.int64)
    padded = np.pad(dataset.image, ((0, 0), (half, half), (half, half)), mode="reflect")
    rows, cols = centers // w, centers % w
    patches = np.empty((len(centers), c, patch_size, patch_size), dtype=np.float32)
    for i, (r, col) in enumerate(zip(rows, cols)):
        patches[i] = padded[:, r : r + patch_size, col : col + patch_size]
    return patches, dataset.labels.reshape(-1)[centers]


def extract_tiles(dataset: SyntheticDataset, tile: int, stride: int, split: str | None = None):
    """Sliding-window tiles; returns (tiles, tile_labels).

    With split "train" or "test", labels outside that pixel set become -1 so
    the masked loss or evaluation only sees that split.
    """
    if tile < 1 or stride < 1:
        raise ValueError("tile and stride must be positive")
    c, h, w = dataset.image.shape
    if tile > h or tile > w:
        raise ValueError("tile larger than the image")
    labels = dataset.labels
    if split is not None:
        if split not in ("train", "test"):
            raise ValueError("split must be 'train' or 'test'")
        keep = np.zeros(h * w, dtype=bool)
        keep[dataset.train_indices if split == "train" else dataset.test_indices] = True
        labels = np.where(keep.reshape(h, w), labels, -1)
    rows = range(0, h - tile + 1, stride)
    cols = range(0, w - tile + 1, stride)
    tiles, tile_labels = [], []
    for r in rows:
        for col in cols:
            tiles.append(dataset.image[:, r : r + tile, col : col + tile])
            tile_labels.append(labels[r : r + tile, col : col + tile])
    return (
        np.stack(tiles).astype(np.float32),
        np.stack(tile_labels).astype(np.int64),
    )


def balanced_subset(dataset: SyntheticDataset, indices: np.ndarray, per_class: int,
                    rng: np.random.Generator) -> np.ndarray:
    """At most per_class pixels per class, drawn deterministically from rng."""
    flat = dataset.labels.reshape(-1)
    parts = []
    for cls in range(dataset.num_classes):
        cls_idx = indices[flat[indices] == cls]
        if len(cls_idx) > per_class:
            cls_idx = rng.permutation(cls_idx)[:per_class]
        parts.append(cls_idx)
    return np.sort(np.concatenate(parts)).astype(np.int64)


# -- reference classifiers (independent of the network path) --------------


def _vector_table_oa(train_vecs, train_labels, test_vecs, test_labels, num_classes):
    """Best value-table classifier: majority class per distinct train vector,
    nearest train vector for unseen test vectors."""
    train_q = np.round(train_vecs, 4)
    test_q = np.round(test_vecs, 4)
    uniq, inverse = np.unique(train_q, axis=0, return_inverse=True)
    majority = np.zeros(len(uniq), dtype=np.int64)
    for u in range(len(uniq)):
        cls_counts = np.bincount(train_labels[inverse == u], minlength=num_classes)
        majority[u] = int(cls_counts.argmax())
    d2 = ((test_q[:, None, :] - uniq[None, :, :]) ** 2).sum(axis=2)
    pred = majority[d2.argmin(axis=1)]
    return float((pred == test_labels).mean())


def best_single_modality_oa(dataset: SyntheticDataset, modality: int | str) -> float:
    """Test accuracy of the best classifier that sees one modality only."""
    if isinstance(modality, str):
        sl = dataset.modality_slices()[modality]
    else:
        sl = dataset.modality_slices()[dataset.modalities[modality].name]
    return _split_table_oa(dataset, sl)


def best_joint_oa(dataset: SyntheticDataset) -> float:
    """Test accuracy of the same value-table classifier on all channels."""
    return _split_table_oa(dataset, slice(0, dataset.channels))


def _split_table_oa(dataset: SyntheticDataset, channel_slice: slice) -> float:
    flat = dataset.image.reshape(dataset.channels, -1)
    vecs = flat[channel_slice].T
    labels = dataset.labels.reshape(-1)
    tr, te = dataset.train_indices, dataset.test_indices
    return _vector_table_oa(
        vecs[tr], labels[tr], vecs[te], labels[te], dataset.num_classes
    )


# -- file I/O --------------------------------------------------------------


def _manifest_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".manifest")


def save_dataset(dataset: SyntheticDataset, path) -> None:
    """Write tensors to `path` and a text manifest next to it."""
    path = Path(path)
    save_tensors(
        path,
        [
            dataset.image,
            dataset.labels.astype(np.float32),
            dataset.train_indices.astype(np.float32),
            dataset.test_indices.astype(np.float32),
        ],
    )
    lines = [
        "format=sepgnet-dataset-v1",
        f"seed={dataset.seed}",
        f"task={dataset.task}",
        f"fusion_difficulty={dataset.fusion_difficulty}",
        f"num_classes={dataset.num_classes}",
        f"height={dataset.labels.shape[0]}",
        f"width={dataset.labels.shape[1]}",
        "modalities="
        + ",".join(f"{m.name}:{m.channels}:{m.kind}:{m.noise}" for m in dataset.modalities),
        "informative="
        + ";".join("|".join(names) for names in dataset.informative),
    ]
    _manifest_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> SyntheticDataset:
    path = Path(path)
    manifest_file = _manifest_path(path)
    if not manifest_file.exists():
        raise ContainerFormatError(f"missing manifest {manifest_file}")
    fields = {}
    for line in manifest_file.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContainerFormatError(f"bad manifest line {line!r}")
        key, value = line.split("=", 1)
        fields[key] = value
    if fields.get("format") != "sepgnet-dataset-v1":
        raise ContainerFormatError("unknown dataset format")
    try:
        modalities = tuple(
            ModalitySpec(n, int(c), k, float(s))
            for n, c, k, s in (item.split(":") for item in fields["modalities"].split(","))
        )
        num_classes = int(fields["num_classes"])
        height, width = int(fields["height"]), int(fields["width"])
        informative = tuple(
            tuple(p for p in group.split("|") if p)
            for group in fields["informative"].split(";")
        )
        seed = int(fields["seed"])
        task = fields["task"]
        fusion = fields["fusion_difficulty"]
    except (KeyError, ValueError) as exc:
        raise ContainerFormatError(f"bad manifest field: {exc}") from exc

    arrays = load_tensors(path)
    if len(arrays) != 4:
        raise ContainerFormatError(f"expected 4 tensors, found {len(arrays)}")
    image, labels, train_idx, test_idx = arrays
    total_channels = sum(m.channels for m in modalities)
    if image.ndim != 3 or image.shape != (total_channels, height, width):
        raise ContainerFormatError(
            f"image shape {image.shape} does not match manifest "
            f"({total_channels}, {height}, {width})"
        )
    if labels.shape != (height, width):
        raise ContainerFormatError("label shape does not match manifest")
    return SyntheticDataset(
        image=image,
        labels=labels.astype(np.int64),
        num_classes=num_classes,
        train_indices=train_idx.astype(np.int64).reshape(-1),
        test_indices=test_idx.astype(np.int64).reshape(-1),
        modalities=modalities,
        fusion_difficulty=fusion,
        informative=informative,
        seed=seed,
        task=task,
    )
