import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from frinet.data import (ImageSample, OrientationSet, SegmentationDataset, augment_flip, augment_rotation,
                         binarize_mask, inverse_angle, isaid_split, make_orientation_set, make_split,
                         rotate_exact, sample_episode)

ANGLES = (0, 90, 180, 270)


class TestRotateExact:
    def test_identity(self):
        g = torch.tensor([[1, 2], [3, 4]])
        assert torch.equal(rotate_exact(g, 0), g)

    def test_90_then_270(self):
        g = torch.tensor([[1, 2], [3, 4]])
        assert torch.equal(rotate_exact(rotate_exact(g, 90), 270), g)

    def test_counter_clockwise(self):
        g = torch.tensor([[1, 2], [3, 4]])
        assert rotate_exact(g, 90).tolist() == [[2, 4], [1, 3]]

    def test_four_quarter_turns_bit_exact(self):
        g = torch.randn(3, 17, 23)
        out = g
        for _ in range(4):
            out = rotate_exact(out, 90)
        assert torch.equal(out, g)

    def test_swaps_height_and_width(self):
        g = torch.zeros(2, 5, 7, dtype=torch.int16)
        assert rotate_exact(g, 90).shape == (2, 7, 5)
        assert rotate_exact(g, 180).shape == (2, 5, 7)
        assert rotate_exact(g, 270).dtype == torch.int16

    def test_numpy_input(self):
        g = np.arange(6).reshape(2, 3)
        np.testing.assert_array_equal(rotate_exact(g, 90), np.rot90(g))

    @pytest.mark.parametrize("angle", [45, 30, -45, 91.0, 1.5])
    def test_rejects_non_right_angles(self, angle):
        with pytest.raises(ValueError):
            rotate_exact(torch.zeros(2, 2), angle)

    def test_negative_and_large_multiples(self):
        g = torch.randn(4, 6)
        assert torch.equal(rotate_exact(g, -90), rotate_exact(g, 270))
        assert torch.equal(rotate_exact(g, 450), rotate_exact(g, 90))

    @given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 9), st.integers(1, 9)),
                  elements=st.floats(-1e3, 1e3, width=32)),
           st.sampled_from(ANGLES))
    def test_inverse_round_trip(self, g, angle):
        t = torch.from_numpy(g)
        back = rotate_exact(rotate_exact(t, angle), inverse_angle(angle))
        assert torch.equal(back, t)

    @given(st.integers(1, 6), st.integers(1, 6), st.sampled_from(ANGLES), st.sampled_from(ANGLES))
    def test_composition_adds_angles(self, h, w, a, b):
        g = torch.arange(h * w).reshape(h, w)
        assert torch.equal(rotate_exact(rotate_exact(g, a), b), rotate_exact(g, (a + b) % 360))


class TestOrientationSet:
    def test_constant_grid(self):
        g = torch.full((3, 3), 7)
        s = make_orientation_set(g)
        for a in ANGLES:
            assert torch.equal(s[a], g)

    def test_one_hot_visits_all_corners(self):
        g = torch.tensor([[1, 0], [0, 0]])
        s = make_orientation_set(g)
        corners = {tuple(torch.nonzero(s[a])[0].tolist()) for a in ANGLES}
        assert corners == {(0, 0), (0, 1), (1, 0), (1, 1)}

    def test_at_180_is_double_quarter_turn(self):
        g = torch.randn(3, 4, 5)
        s = make_orientation_set(g)
        assert torch.equal(s.at_180, rotate_exact(rotate_exact(g, 90), 90))
        assert s.at_0 is g

    def test_shapes_swap_at_odd_quarters(self):
        s = make_orientation_set(torch.zeros(2, 3, 8))
        assert s.at_90.shape == s.at_270.shape == (2, 8, 3)
        assert s.at_0.shape == s.at_180.shape == (2, 3, 8)

    def test_subset_requires_zero(self):
        with pytest.raises(ValueError):
            OrientationSet({90: 1, 180: 2})
        s = make_orientation_set(torch.zeros(2, 2), angles=(0, 180))
        assert s.angles == (0, 180)
        assert len(s) == 2

    def test_map_and_order(self):
        s = OrientationSet({270: 3, 0: 0, 90: 1})
        assert list(s) == [0, 90, 270]
        assert dict(s.map(lambda v: v * 2)) == {0: 0, 90: 2, 270: 6}


class TestSplits:
    def test_isaid_fold0_matches_table(self):
        split = isaid_split(0)
        names = [split.class_names[c] for c in split.novel_classes]
        assert names == ["ship", "storage tank", "baseball diamond", "tennis court", "basketball court"]

    @pytest.mark.parametrize("fold", [0, 1, 2])
    def test_isaid_partition(self, fold):
        split = isaid_split(fold)
        assert not set(split.base_classes) & set(split.novel_classes)
        assert set(split.base_classes) | set(split.novel_classes) == set(range(1, 16))
        assert len(split.novel_classes) == 5

    def test_isaid_other_folds(self):
        n1 = [isaid_split(1).class_names[c] for c in isaid_split(1).novel_classes]
        n2 = [isaid_split(2).class_names[c] for c in isaid_split(2).novel_classes]
        assert n1 == ["ground track field", "bridge", "large vehicle", "small vehicle", "helicopter"]
        assert n2 == ["swimming pool", "roundabout", "soccer ball field", "plane", "harbor"]

    def test_unknown_novel_class_rejected(self):
        with pytest.raises(ValueError):
            make_split(0, {0: [9]}, {1: "a", 2: "b"})

    def test_phase_classes(self, small_dataset):
        split = small_dataset.split(1)
        assert split.classes_for("test") == [4, 5, 6]
        assert split.classes_for("train") == [1, 2, 3, 7, 8, 9]
        with pytest.raises(ValueError):
            split.classes_for("val")


class TestBinarize:
    def test_values(self):
        m = torch.tensor([[0, 1, 2], [3, 255, 1]])
        out = binarize_mask(m, 1, excluded=(3,))
        assert out.tolist() == [[0, 1, 0], [255, 255, 1]]

    @given(arrays(np.uint8, (6, 6), elements=st.sampled_from([0, 1, 2, 3, 255])), st.integers(1, 3))
    def test_only_three_values(self, m, target):
        out = binarize_mask(torch.from_numpy(m.astype(np.int64)), target, excluded=(3,) if target != 3 else ())
        assert set(torch.unique(out).tolist()) <= {0, 1, 255}
        assert torch.equal(out == 1, torch.from_numpy(m == target))


class TestSampleEpisode:
    def test_contract(self, small_dataset):
        split = small_dataset.split(0)
        ep = sample_episode(small_dataset, split, "test", 1, rng_seed=7)
        assert ep.shot_count == 1
        assert ep.target_class in split.novel_classes
        for s in ep.supports + [ep.query]:
            assert int((s.mask == 1).sum()) >= 1
            assert set(torch.unique(s.mask).tolist()) <= {0, 1, 255}

    def test_deterministic(self, small_dataset):
        split = small_dataset.split(0)
        a = sample_episode(small_dataset, split, "test", 1, rng_seed=7)
        b = sample_episode(small_dataset, split, "test", 1, rng_seed=7)
        assert a.image_ids == b.image_ids and a.target_class == b.target_class
        assert torch.equal(a.query.image, b.query.image)

    @pytest.mark.parametrize("shots", [1, 5])
    def test_distinct_images(self, small_dataset, shots):
        split = small_dataset.split(2)
        for seed in range(30):
            ep = sample_episode(small_dataset, split, "train", shots, rng_seed=seed)
            assert len(set(ep.image_ids)) == shots + 1
            assert ep.target_class in split.base_classes

    def test_train_phase_hides_novel_pixels(self, small_dataset):
        split = small_dataset.split(0)
        for seed in range(20):
            ep = sample_episode(small_dataset, split, "train", 1, rng_seed=seed)
            for s in ep.supports + [ep.query]:
                raw = torch.from_numpy(small_dataset.masks[s.index].astype(np.int64))
                novel = sum((raw == c) for c in split.novel_classes).bool()
                assert bool((s.mask[novel] == 255).all())

    def test_train_class_frequencies_uniform(self, small_dataset):
        split = small_dataset.split(0)
        rng = np.random.default_rng(11)
        n = 10_000
        counts = {c: 0 for c in split.base_classes}
        for _ in range(n):
            counts[sample_episode(small_dataset, split, "train", 1, rng).target_class] += 1
        observed = np.array(list(counts.values()))
        expected = np.full(len(observed), n / len(observed))
        _, p = stats.chisquare(observed, expected)
        assert p > 1e-3
        sigma = np.sqrt(n * (1 / len(observed)) * (1 - 1 / len(observed)))
        assert np.all(np.abs(observed - expected) <= 3 * sigma)

    def test_skips_classes_without_enough_images(self, small_dataset):
        # keep a single image containing class 1
        drop = set(small_dataset.class_index[1][1:])
        sub = small_dataset.subset(i for i in range(len(small_dataset)) if i not in drop)
        split = sub.split(0)
        assert len(sub.class_index[1]) == 1
        for seed in range(20):
            assert sample_episode(sub, split, "test", 1, rng_seed=seed).target_class != 1

    def test_no_usable_class_is_fatal(self, small_dataset):
        split = small_dataset.split(0)
        with pytest.raises(RuntimeError):
            sample_episode(small_dataset.subset([0]), split, "test", 1, rng_seed=0)

    def test_rejects_zero_shots(self, small_dataset):
        with pytest.raises(ValueError):
            sample_episode(small_dataset, small_dataset.split(0), "test", 0, rng_seed=0)

    def test_resizes(self, small_dataset):
        ep = sample_episode(small_dataset, small_dataset.split(0), "test", 1, rng_seed=1, input_size=96)
        assert ep.query.image.shape == (3, 96, 96) and ep.query.mask.shape == (96, 96)


def _sample(h=6, w=8):
    image = torch.rand(3, h, w)
    mask = torch.zeros(h, w, dtype=torch.long)
    mask[1:3, 0:3] = 1
    return ImageSample(image, mask)


class TestAugmentation:
    def test_forced_flip_twice(self):
        s = _sample()
        back = augment_flip(augment_flip(s, force=True), force=True)
        assert torch.equal(back.image, s.image) and torch.equal(back.mask, s.mask)

    def test_no_flip_identity(self):
        s = _sample()
        assert augment_flip(s, force=False) is s

    def test_flip_keeps_alignment(self):
        s = _sample()
        f = augment_flip(s, force=True)
        w = s.mask.shape[1]
        cx = torch.nonzero(s.mask == 1)[:, 1].float().mean()
        fx = torch.nonzero(f.mask == 1)[:, 1].float().mean()
        assert float(cx + fx) == pytest.approx(w - 1)
        assert torch.equal(f.image, torch.flip(s.image, dims=(-1,)))
        assert torch.equal(f.mask, torch.flip(s.mask, dims=(-1,)))

    def test_flip_rate(self):
        rng = np.random.default_rng(0)
        s = _sample()
        flips = sum(augment_flip(s, rng) is not s for _ in range(2000))
        assert 900 < flips < 1100

    def test_rotation_joint(self):
        s = _sample()
        rng = np.random.default_rng(5)
        for _ in range(8):
            r = augment_rotation(s, rng)
            k = [a for a in ANGLES if torch.equal(rotate_exact(s.mask, a), r.mask)
                 and rotate_exact(s.image, a).shape == r.image.shape
                 and torch.equal(rotate_exact(s.image, a), r.image)]
            assert k


class TestDatasetIO:
    def test_round_trip(self, small_dataset, tmp_path):
        sub = small_dataset.subset(range(5))
        sub.save(tmp_path / "ds")
        assert sorted(p.name for p in (tmp_path / "ds").iterdir()) == ["classes.json", "images", "masks",
                                                                          "splits.json"]
        back = SegmentationDataset.load(tmp_path / "ds")
        np.testing.assert_array_equal(back.images, sub.images)
        np.testing.assert_array_equal(back.masks, sub.masks)
        assert back.class_names == sub.class_names
        assert back.novel_by_fold == sub.novel_by_fold

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            SegmentationDataset.load(tmp_path)

    def test_rejects_unknown_labels(self):
        with pytest.raises(ValueError):
            SegmentationDataset(np.zeros((1, 4, 4, 3)), np.full((1, 4, 4), 9), {1: "a"}, {0: [1]})

    def test_class_index(self, small_dataset):
        for c, idx in small_dataset.class_index.items():
            for i in idx:
                assert (small_dataset.masks[i] == c).any()
