"""Image I/O, directory loading, stratified splits and the synthetic dataset."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image as PILImage

from dualstream.augment import Image
from dualstream.data import (
    CLASS_NAMES,
    LabeledDataset,
    LabeledItem,
    generate_synthetic,
    load_dataset,
    make_split_plan,
    read_image,
    read_manifest,
    read_pgm,
    round_half_down,
    save_dataset,
    stratified_kfold,
    stratified_split,
    write_pgm,
)
from dualstream.edges import sobel_magnitude
from dualstream.errors import ConfigError, DataError


def counted_dataset(counts):
    items = []
    for label, n in enumerate(counts):
        for i in range(n):
            ident = f"{CLASS_NAMES[label]}/{i:04d}"
            items.append(LabeledItem(Image(np.zeros((1, 1))), label, ident))
    return LabeledDataset(items)


def label_counts(ds, ids):
    label_of = {it.id: it.label for it in ds.items}
    return tuple(int(np.sum([label_of[i] == c for i in ids])) for c in range(3))


class TestImageFiles:
    def test_pgm_roundtrip(self, tmp_path):
        p = np.random.default_rng(0).integers(0, 256, (7, 5)).astype(float)
        write_pgm(tmp_path / "a.pgm", p)
        assert np.array_equal(read_pgm(tmp_path / "a.pgm"), p)

    def test_ascii_pgm_with_comment(self, tmp_path):
        (tmp_path / "a.pgm").write_text("P2\n# note\n3 2\n15\n0 15 5\n10 0 15\n")
        np.testing.assert_allclose(read_pgm(tmp_path / "a.pgm"), [[0, 255, 85], [170, 0, 255]])

    def test_sixteen_bit_pgm(self, tmp_path):
        raw = np.array([[0, 65535], [32768, 1000]], dtype=">u2")
        (tmp_path / "a.pgm").write_bytes(b"P5\n2 2\n65535\n" + raw.tobytes())
        np.testing.assert_allclose(read_pgm(tmp_path / "a.pgm"), raw.astype(float) * 255 / 65535)

    def test_png_rgb_is_channel_averaged(self, tmp_path):
        rgb = np.zeros((4, 4, 3), dtype=np.uint8)
        rgb[..., 0], rgb[..., 1], rgb[..., 2] = 30, 60, 90
        PILImage.fromarray(rgb).save(tmp_path / "a.png")
        np.testing.assert_allclose(read_image(tmp_path / "a.png"), 60.0)

    @pytest.mark.parametrize("content", [b"P6\n1 1\n255\n\x00\x00\x00", b"P5\n4 4\n255\n\x00", b"not an image"])
    def test_unreadable(self, tmp_path, content):
        path = tmp_path / ("bad.pgm" if content.startswith(b"P") else "bad.png")
        path.write_bytes(content)
        with pytest.raises(DataError, match="bad"):
            read_image(path)


class TestLoadDataset:
    def make_root(self, tmp_path, counts=(2, 1, 1)):
        for name, n in zip(CLASS_NAMES, counts):
            (tmp_path / name).mkdir()
            for i in range(n):
                write_pgm(tmp_path / name / f"{name} ({i}).pgm", np.full((4, 4), 10.0 * i))
        return tmp_path

    def test_counts_and_order(self, tmp_path):
        root = self.make_root(tmp_path)
        write_pgm(root / "benign" / "benign (0)_mask.pgm", np.zeros((4, 4)))
        a, b = load_dataset(root), load_dataset(root)
        assert a.class_counts == (2, 1, 1)
        assert a.ids == b.ids == ["benign/benign (0)", "benign/benign (1)", "malignant/malignant (0)", "normal/normal (0)"]

    def test_missing_directory(self, tmp_path):
        root = self.make_root(tmp_path)
        for f in (root / "normal").iterdir():
            f.unlink()
        (root / "normal").rmdir()
        with pytest.raises(DataError, match="normal"):
            load_dataset(root)

    def test_empty_directory(self, tmp_path):
        root = self.make_root(tmp_path, (1, 1, 0))
        with pytest.raises(DataError, match="no images"):
            load_dataset(root)

    def test_duplicate_ids_rejected(self):
        item = LabeledItem(Image(np.zeros((2, 2))), 0, "x")
        with pytest.raises(DataError):
            LabeledDataset([item, item])


class TestSplits:
    def test_round_half_down(self):
        assert [round_half_down(x) for x in (65.55, 31.5, 19.95, 2.5, 2.51, 0.49)] == [66, 31, 20, 2, 3, 0]

    def test_busi_counts(self):
        ds = counted_dataset((437, 210, 133))
        plan = stratified_split(ds, 0.15, seed=0)
        assert label_counts(ds, plan.test_ids) == (66, 31, 20)
        assert label_counts(ds, plan.train_ids) == (371, 179, 113)
        assert not set(plan.train_ids) & set(plan.test_ids)

    def test_zero_fraction(self):
        plan = stratified_split(counted_dataset((5, 4, 3)), 0.0)
        assert plan.test_ids == [] and len(plan.train_ids) == 12

    def test_seed_determinism(self):
        ds = counted_dataset((40, 20, 12))
        a, b, c = (stratified_split(ds, 0.15, s) for s in (1, 1, 2))
        assert a.test_ids == b.test_ids and a.test_ids != c.test_ids
        assert label_counts(ds, a.test_ids) == label_counts(ds, c.test_ids)

    def test_class_too_small(self):
        with pytest.raises(DataError):
            stratified_split(counted_dataset((5, 1, 3)))

    def test_kfold_bucket_sizes(self):
        ds = counted_dataset((437, 210, 133))
        plan = make_split_plan(ds, 0.15, 5, seed=0)
        sizes = np.array([label_counts(ds, val) for _, val in plan.folds])
        assert set(sizes[:, 0]) <= {74, 75} and set(sizes[:, 1]) <= {35, 36} and set(sizes[:, 2]) <= {22, 23}
        assert np.all(sizes.max(axis=0) - sizes.min(axis=0) <= 1)
        vals = [i for _, val in plan.folds for i in val]
        assert sorted(vals) == sorted(plan.train_ids) and len(set(vals)) == len(vals)
        for trn, val in plan.folds:
            assert not set(trn) & set(val) and len(trn) + len(val) == len(plan.train_ids)

    @settings(max_examples=40, deadline=None)
    @given(st.tuples(st.integers(5, 60), st.integers(5, 60), st.integers(5, 60)), st.integers(2, 5), st.integers(0, 99))
    def test_kfold_stratification_property(self, counts, k, seed):
        ds = counted_dataset(counts)
        folds = stratified_kfold(ds, ds.ids, k, seed)
        sizes = np.array([label_counts(ds, val) for _, val in folds])
        for c in range(3):
            assert abs(sizes[:, c] - counts[c] / k).max() < 1
        # totals stay balanced too: the rotating offset spreads remainders
        assert sizes.sum(axis=1).max() - sizes.sum(axis=1).min() <= 1

    def test_kfold_rejects_k1(self):
        ds = counted_dataset((5, 5, 5))
        with pytest.raises(ConfigError):
            stratified_kfold(ds, ds.ids, 1)

    def test_kfold_class_smaller_than_k(self):
        ds = counted_dataset((6, 3, 6))
        with pytest.raises(DataError):
            stratified_kfold(ds, ds.ids, 5)


class TestSynthetic:
    def test_counts_and_range(self):
        ds = generate_synthetic((20, 10, 6), size=32, seed=1)
        assert ds.class_counts == (20, 10, 6)
        px = np.stack([it.image.pixels for it in ds.items])
        assert px.min() >= 0 and px.max() <= 255 and np.all(px == np.rint(px))

    def test_bit_identical_by_seed(self):
        a = generate_synthetic((3, 3, 3), 32, seed=5)
        b = generate_synthetic((3, 3, 3), 32, seed=5)
        assert all(x.image.pixels.tobytes() == y.image.pixels.tobytes() for x, y in zip(a.items, b.items))

    def test_boundary_energy_separates_lesion_from_background(self):
        # unnormalized magnitude: per-image max normalization would mask the absolute edge content
        ds = generate_synthetic((100, 1, 100), 64, seed=3)
        energy = {c: np.mean([sobel_magnitude(it.image.pixels).mean() for it in ds.items if it.label == c]) for c in (0, 2)}
        assert energy[0] > energy[2]

    def test_size_must_divide_by_16(self):
        with pytest.raises(ConfigError):
            generate_synthetic((1, 1, 1), size=40)

    def test_save_and_reload(self, tmp_path):
        ds = generate_synthetic((3, 2, 2), 32, seed=0)
        manifest = save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path)
        assert back.ids == ds.ids
        for a, b in zip(ds.items, back.items):
            assert np.array_equal(a.image.pixels, b.image.pixels)
        rows = read_manifest(manifest)
        assert rows[0] == ("benign/benign_0000", "benign/benign_0000.pgm", 0) and len(rows) == 7
