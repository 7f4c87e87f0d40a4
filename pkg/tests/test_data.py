import numpy as np
import pytest

from sepgnet.container import ContainerFormatError
from sepgnet.data import (
    ModalitySpec,
    SyntheticDataset,
    balanced_subset,
    best_joint_oa,
    best_single_modality_oa,
    extract_patches,
    extract_tiles,
    generate,
    load_dataset,
    save_dataset,
)

TWO_MODALITIES = (
    ModalitySpec("optical", 4, "spectral_smooth", 0.0),
    ModalitySpec("height", 3, "elevation_like", 0.0),
)


def small_dataset(fusion="cross_modal", classes=4, noise=0.0, seed=5, size=32, region=8):
    mods = tuple(
        ModalitySpec(m.name, m.channels, m.kind, noise) for m in TWO_MODALITIES
    )
    return generate(mods, classes, size, seed, fusion, region=region)


class TestGenerate:
    def test_same_seed_is_identical(self):
        a = small_dataset(seed=9)
        b = small_dataset(seed=9)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.train_indices, b.train_indices)

    def test_different_seed_differs(self):
        a = small_dataset(seed=1)
        b = small_dataset(seed=2)
        assert not np.array_equal(a.labels, b.labels) or not np.array_equal(a.image, b.image)

    def test_splits_disjoint_and_labeled(self):
        ds = small_dataset()
        assert not set(ds.train_indices) & set(ds.test_indices)
        flat = ds.labels.reshape(-1)
        assert (flat[ds.train_indices] >= 0).all()
        assert (flat[ds.test_indices] >= 0).all()

    def test_channel_stacking_matches_manifest_order(self):
        ds = small_dataset()
        slices = ds.modality_slices()
        assert slices["optical"] == slice(0, 4)
        assert slices["height"] == slice(4, 7)
        part = ds.sensor_partition((8, 8))
        assert part.input_widths == (4, 3)

    def test_label_values_in_range(self):
        ds = small_dataset(classes=4)
        flat = ds.labels.reshape(-1)
        labeled = flat[flat >= 0]
        assert labeled.min() >= 0 and labeled.max() < 4

    def test_border_ignore_marks_cell_edges(self):
        ds = generate(TWO_MODALITIES, 4, 32, 3, "separable", region=8, border_ignore=2)
        labels = ds.labels
        assert (labels[0, :] == -1).all()  # first row is a cell border
        interior = labels[2:6, 2:6]
        assert (interior >= 0).all()

    def test_validation_errors(self):
        with pytest.raises(ValueError):
            generate(TWO_MODALITIES, 4, 30, 0, "separable", region=8)  # not divisible
        with pytest.raises(ValueError):
            generate(TWO_MODALITIES, 4, 32, 0, "sideways")
        with pytest.raises(ValueError):
            generate(TWO_MODALITIES[:1], 4, 32, 0, "cross_modal")
        with pytest.raises(ValueError):
            generate(TWO_MODALITIES, 4, 24, 0, "separable", task="segmentation", region=8)
        with pytest.raises(ValueError):
            generate(TWO_MODALITIES, 4, 32, 0, "separable", region=8, border_ignore=4)

    def test_informative_table(self):
        sep = small_dataset(fusion="separable")
        assert all(names == ("optical", "height") for names in sep.informative)
        cross = small_dataset(fusion="cross_modal")
        assert all(names == () for names in cross.informative)


class TestReferenceClassifiers:
    def test_separable_every_modality_suffices(self):
        ds = small_dataset(fusion="separable")
        for m in range(2):
            assert best_single_modality_oa(ds, m) == 1.0

    def test_cross_modal_single_modality_near_chance(self):
        # two balanced classes: a lone modality cannot beat chance by much
        ds = small_dataset(fusion="cross_modal", classes=2)
        for m in range(2):
            assert best_single_modality_oa(ds, m) <= 0.5 + 0.1

    def test_cross_modal_joint_is_perfect(self):
        ds = small_dataset(fusion="cross_modal")
        assert best_joint_oa(ds) == 1.0
        for m in range(2):
            assert best_single_modality_oa(ds, m) <= 0.35  # 4 classes, chance 0.25

    def test_modality_by_name(self):
        ds = small_dataset(fusion="separable")
        assert best_single_modality_oa(ds, "optical") == 1.0


def tiny_manual_dataset(h=5, w=5, channels=1):
    labels = np.arange(h * w).reshape(h, w) % 3
    return SyntheticDataset(
        image=np.linspace(0, 1, channels * h * w, dtype=np.float32).reshape(channels, h, w),
        labels=labels.astype(np.int64),
        num_classes=3,
        train_indices=np.arange(0, h * w, 2, dtype=np.int64),
        test_indices=np.arange(1, h * w, 2, dtype=np.int64),
        modalities=(ModalitySpec("only", channels),),
        fusion_difficulty="separable",
        informative=(("only",), ("only",), ("only",)),
        seed=0,
        task="patch_classification",
    )


class TestExtractPatches:
    def test_all_centers_of_small_image(self):
        ds = tiny_manual_dataset()
        patches, labels = extract_patches(ds, 3)
        assert patches.shape == (25, 1, 3, 3)
        assert labels.shape == (25,)

    def test_center_pixel_carries_label(self):
        ds = tiny_manual_dataset()
        patches, labels = extract_patches(ds, 3)
        flat_labels = ds.labels.reshape(-1)
        np.testing.assert_array_equal(labels, flat_labels)
        # center of each patch equals the image value at its center pixel
        flat_img = ds.image[0].reshape(-1)
        np.testing.assert_allclose(patches[:, 0, 1, 1], flat_img)

    def test_even_patch_rejected(self):
        with pytest.raises(ValueError):
            extract_patches(tiny_manual_dataset(), 4)

    def test_reflect_padding_at_corner(self):
        ds = tiny_manual_dataset()
        patches, _ = extract_patches(ds, 3, centers=np.array([0]))
        img = ds.image[0]
        assert patches[0, 0, 1, 1] == img[0, 0]
        assert patches[0, 0, 0, 1] == img[1, 0]  # reflected above
        assert patches[0, 0, 1, 0] == img[0, 1]  # reflected left

    def test_custom_centers(self):
        ds = tiny_manual_dataset()
        centers = np.array([6, 12, 18])
        patches, labels = extract_patches(ds, 3, centers=centers)
        assert patches.shape == (3, 1, 3, 3)
        np.testing.assert_array_equal(labels, ds.labels.reshape(-1)[centers])


class TestExtractTiles:
    def test_tile_counts(self):
        ds = generate(TWO_MODALITIES, 4, 128, 0, "separable", task="segmentation", region=16)
        tiles, labels = extract_tiles(ds, 64, 64)
        assert tiles.shape[0] == 4
        tiles, labels = extract_tiles(ds, 64, 32)
        assert tiles.shape[0] == 9
        assert labels.shape == (9, 64, 64)

    def test_split_masks_other_pixels(self):
        ds = generate(TWO_MODALITIES, 4, 32, 0, "separable", task="segmentation", region=8)
        _, train_labels = extract_tiles(ds, 32, 32, split="train")
        _, test_labels = extract_tiles(ds, 32, 32, split="test")
        train_set = set(np.flatnonzero(train_labels.reshape(-1) >= 0))
        test_set = set(np.flatnonzero(test_labels.reshape(-1) >= 0))
        assert not train_set & test_set
        assert train_set == set(ds.train_indices)

    def test_oversized_tile_rejected(self):
        with pytest.raises(ValueError):
            extract_tiles(tiny_manual_dataset(), 10, 5)


class TestBalancedSubset:
    def test_per_class_cap(self):
        ds = small_dataset(fusion="separable")
        rng = np.random.default_rng(0)
        subset = balanced_subset(ds, ds.train_indices, 5, rng)
        flat = ds.labels.reshape(-1)
        counts = np.bincount(flat[subset], minlength=4)
        assert (counts <= 5).all()

    def test_deterministic(self):
        ds = small_dataset(fusion="separable")
        a = balanced_subset(ds, ds.train_indices, 5, np.random.default_rng(3))
        b = balanced_subset(ds, ds.train_indices, 5, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)


class TestDatasetIO:
    def test_round_trip_bitwise(self, tmp_path):
        ds = small_dataset(noise=0.02)
        path = tmp_path / "ds.bin"
        save_dataset(ds, path)
        back = load_dataset(path)
        np.testing.assert_array_equal(back.image, ds.image)
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.train_indices, ds.train_indices)
        np.testing.assert_array_equal(back.test_indices, ds.test_indices)
        assert back.modalities == ds.modalities
        assert back.informative == ds.informative
        assert back.num_classes == ds.num_classes
        assert back.seed == ds.seed

    def test_truncated_payload_fails_clean(self, tmp_path):
        ds = small_dataset()
        path = tmp_path / "ds.bin"
        save_dataset(ds, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(ContainerFormatError):
            load_dataset(path)

    def test_manifest_channel_mismatch_fails(self, tmp_path):
        ds = small_dataset()
        path = tmp_path / "ds.bin"
        save_dataset(ds, path)
        manifest = path.with_suffix(".manifest")
        text = manifest.read_text().replace("optical:4", "optical:5")
        manifest.write_text(text)
        with pytest.raises(ContainerFormatError):
            load_dataset(path)

    def test_missing_manifest_fails(self, tmp_path):
        ds = small_dataset()
        path = tmp_path / "ds.bin"
        save_dataset(ds, path)
        path.with_suffix(".manifest").unlink()
        with pytest.raises(ContainerFormatError):
            load_dataset(path)
