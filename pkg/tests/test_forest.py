import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from activesearch.dataio import Dataset, ImageRecord
from activesearch.errors import InvalidInputError, NoTrainingDataError, ValidationError
from activesearch.features import AppearanceCode, DistanceKind, hamming_distance
from activesearch.forest import (ForestConfig, ForestModel, Leaf, QueryStats, SampleSet, Split,
                                 Tree, closest_gt_index, entropy, extract_context,
                                 image_samples, information_gain, medoid_index, route,
                                 train_forest, train_tree)
from activesearch.geometry import apply_displacement, iou

NBYTES = 8


def leaf(*d):
    return Leaf(np.array(d, dtype=float))


def code(byte):
    return np.full(NBYTES, byte, dtype=np.uint8)


def proposal_like(window, c):
    class P:
        pass

    p = P()
    p.window, p.code = window, AppearanceCode(c)
    return p


def brute_medoid(d):
    sums = [sum(math.dist(a, b) for b in d) for a in d]
    return int(np.argmin(sums))


def hist_entropy(d, bins=20):
    total = 0.0
    for k in range(4):
        counts = {}
        for v in d[:, k]:
            b = min(max(int(math.floor((v + 1.0) / 2.0 * bins)), 0), bins - 1)
            counts[b] = counts.get(b, 0) + 1
        for c in counts.values():
            p = c / len(d)
            total -= p * math.log2(p)
    return total


class TestRoute:
    def test_single_leaf(self, rng):
        tree = Tree.single_leaf([0.1, -0.2, 0.0, 0.05], NBYTES)
        for _ in range(20):
            w = (rng.uniform(0, 0.5), rng.uniform(0, 0.5), 0.2, 0.2)
            assert tree.route(w, random_code(rng)).tolist() == [0.1, -0.2, 0.0, 0.05]

    def test_zero_threshold_goes_left(self, rng):
        root = Split(DistanceKind.LOCATION, 0.0, np.array([0.1, 0.1, 0.2, 0.2]), code(0),
                     leaf(1, 0, 0, 0), leaf(-1, 0, 0, 0))
        tree = Tree.from_nested(root, NBYTES)
        for w in [(0.1, 0.1, 0.2, 0.2), (0.7, 0.7, 0.2, 0.2), (0.15, 0.1, 0.2, 0.2)]:
            assert tree.route(w, code(0))[0] == 1.0

    def test_depth_two_by_hand(self, rng):
        pivot_w = np.array([0.2, 0.2, 0.3, 0.3])
        pivot_c = code(0b10101010)
        root = Split(DistanceKind.LOCATION, 0.6, pivot_w, code(0),
                     Split(DistanceKind.APPEARANCE, 0.25, np.zeros(4), pivot_c,
                           leaf(0, 0, 0, 1), leaf(0, 0, 1, 0)),
                     leaf(1, 0, 0, 0))
        tree = Tree.from_nested(root, NBYTES)
        for _ in range(200):
            w = (rng.uniform(0, 0.6), rng.uniform(0, 0.6), rng.uniform(0.05, 0.4),
                 rng.uniform(0.05, 0.4))
            c = random_code(rng)
            if 1.0 - iou(w, pivot_w) >= 0.6:
                expect = [0, 0, 0, 1] if hamming_distance(c, pivot_c) >= 0.25 else [0, 0, 1, 0]
            else:
                expect = [1, 0, 0, 0]
            assert tree.route(w, c).tolist() == expect

    def test_route_deterministic_and_counted(self, small_forest, small_data):
        im = small_data[1][0]
        p = im.proposal(3)
        tree = small_forest.trees[0]
        s = QueryStats()
        a = route(tree, p, s)
        b = route(tree, p, s)
        assert a == b
        assert s.routes == 2
        assert s.distance_evals <= 2 * small_forest.config.max_depth

    def test_compiled_router_matches_references(self, small_forest, small_data):
        for im in small_data[1]:
            for tree in small_forest.trees:
                evals = np.zeros(im.n_proposals, dtype=np.int64)
                fast = tree.leaves_many(im.windows, im.codes, evals)
                assert np.array_equal(fast, tree.leaves_levelwise(im.windows, im.codes))
                slow = [tree.leaf_of(tuple(w), int.from_bytes(c.tobytes(), "big"))
                        for w, c in zip(im.windows.tolist(), im.codes)]
                assert np.array_equal(fast, slow)
                assert evals.max() <= tree.depth() <= small_forest.config.max_depth


def random_code(rng):
    return rng.integers(0, 256, size=NBYTES, dtype=np.uint8)


class TestEntropy:
    def test_identical_is_zero(self):
        assert entropy(np.tile([0.1, 0.2, -0.3, 0.0], (10, 1))) == 0.0

    def test_uniform_over_bins(self):
        centers = -1.0 + (np.arange(20) + 0.5) / 10.0
        d = np.repeat(centers[:, None], 4, axis=1)
        assert entropy(d) == pytest.approx(4 * math.log2(20), abs=1e-12)

    def test_two_clusters_scalar_oracle(self, rng):
        d = np.vstack([rng.normal(-0.4, 0.05, (30, 4)), rng.normal(0.5, 0.2, (17, 4))])
        assert entropy(d) == pytest.approx(hist_entropy(d), abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            entropy(np.zeros((0, 4)))


class TestInformationGain:
    def test_empty_side_rejected(self):
        d = np.zeros((4, 4))
        with pytest.raises(InvalidInputError):
            information_gain(d, d, np.zeros((0, 4)))

    def test_not_a_partition(self, rng):
        d = rng.uniform(-1, 1, (6, 4))
        with pytest.raises(InvalidInputError):
            information_gain(d, d[:3], d[:3])

    def test_perfect_split(self):
        a = np.tile([0.5, 0.0, 0.0, 0.0], (5, 1))
        b = np.tile([-0.5, 0.0, 0.0, 0.0], (7, 1))
        parent = np.vstack([a, b])
        gain = information_gain(parent, a, b)
        assert gain == pytest.approx(entropy(parent), abs=1e-12)
        assert gain > 0

    def test_never_negative(self):
        rng = np.random.default_rng(99)
        d = rng.uniform(-1, 1, (40, 4))
        for _ in range(10_000):
            mask = rng.random(40) < rng.uniform(0.05, 0.95)
            if mask.all() or not mask.any():
                continue
            assert information_gain(d, d[mask], d[~mask]) >= -1e-12


class TestMedoid:
    @settings(max_examples=100)
    @given(st.integers(1, 30), st.integers(0, 2**32 - 1))
    def test_matches_brute_force(self, n, seed):
        r = np.random.default_rng(seed)
        d = np.round(r.uniform(-1, 1, (n, 4)), 1)  # coarse grid forces ties
        assert medoid_index(d) == brute_medoid(d)

    def test_ties_take_lowest_index(self):
        d = np.array([[0.0, 0, 0, 0], [1.0, 0, 0, 0]])
        assert medoid_index(d) == 0

    def test_large_set_path(self, rng):
        d = np.round(rng.uniform(-1, 1, (3000, 4)), 1)
        small = medoid_index(d[:2000])
        assert small == brute_medoid_vec(d[:2000])
        assert medoid_index(d) == brute_medoid_vec(d)


def brute_medoid_vec(d):
    sums = np.array([np.sqrt(((d - a) ** 2).sum(axis=1)).sum() for a in d])
    return int(np.flatnonzero(sums == sums.min())[0])


def sample_set(windows, codes, disp):
    return SampleSet(np.asarray(windows, float), np.asarray(codes, np.uint8),
                     np.asarray(disp, float))


class TestTrainTree:
    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            train_tree(sample_set(np.zeros((0, 4)), np.zeros((0, NBYTES)), np.zeros((0, 4))))

    def test_shared_displacement_single_leaf(self, rng):
        n = 40
        s = sample_set(np.tile([0.1, 0.1, 0.2, 0.2], (n, 1)),
                       rng.integers(0, 256, (n, NBYTES)),
                       np.tile([0.1, 0.0, -0.05, 0.0], (n, 1)))
        tree = train_tree(s, ForestConfig(), rng_seed=3)
        assert tree.n_nodes == 1
        assert tree.values[0].tolist() == [0.1, 0.0, -0.05, 0.0]

    def test_min_leaf_n_gives_brute_medoid(self, rng):
        n = 25
        disp = rng.uniform(-0.5, 0.5, (n, 4))
        s = sample_set(rng.uniform(0, 0.5, (n, 4)) + [0, 0, 0.1, 0.1],
                       rng.integers(0, 256, (n, NBYTES)), disp)
        tree = train_tree(s, ForestConfig(min_leaf=n), rng_seed=0)
        assert tree.n_nodes == 1
        assert np.array_equal(tree.values[0], disp[brute_medoid(disp)])

    def test_separable_clusters_depth_one(self, rng):
        n = 30
        codes = np.vstack([np.zeros((n, NBYTES)), np.full((n, NBYTES), 255)])
        disp = np.vstack([np.tile([0.3, 0, 0, 0], (n, 1)), np.tile([-0.3, 0, 0, 0], (n, 1))])
        windows = np.tile([0.4, 0.4, 0.2, 0.2], (2 * n, 1))  # location carries no signal
        tree = train_tree(sample_set(windows, codes, disp), ForestConfig(), rng_seed=5)
        assert tree.depth() == 1
        assert tree.kind[0] == DistanceKind.APPEARANCE
        assert tree.route((0.4, 0.4, 0.2, 0.2), np.zeros(NBYTES, np.uint8))[0] == 0.3
        assert tree.route((0.4, 0.4, 0.2, 0.2), np.full(NBYTES, 255, np.uint8))[0] == -0.3

    def test_check_mode_and_invariants(self, small_data):
        train, _ = small_data
        cfg = ForestConfig(n_trees=1, images_per_tree=4, max_depth=8, n_candidates=30,
                           check=True)
        model = train_forest(train, "car", cfg, rng_seed=11)
        tree = model.trees[0]
        assert tree.depth() <= 8
        assert np.all(tree.threshold[tree.kind >= 0] >= 0)
        assert np.all(tree.threshold[tree.kind >= 0] <= 1)
        assert np.all(tree.n_samples[tree.kind < 0] >= 1)


def one_image_dataset(boxes, gt, nbytes=NBYTES, seed=0):
    r = np.random.default_rng(seed)
    im = ImageRecord("a", np.asarray(boxes, float),
                     r.integers(0, 256, (len(boxes), nbytes), dtype=np.uint8),
                     {"car": np.asarray(gt, float)})
    return Dataset([im])


class TestTrainForest:
    def test_proposals_equal_gt_give_zero_leaves(self):
        gt = [[0.3, 0.4, 0.2, 0.1]]
        ds = one_image_dataset(gt * 6, gt)
        model = train_forest(ds, "car", ForestConfig(n_trees=3), rng_seed=0)
        for tree in model.trees:
            assert np.all(tree.values[tree.kind < 0] == 0.0)

    def test_missing_class(self, small_data):
        with pytest.raises(NoTrainingDataError):
            train_forest(small_data[0], "dog", ForestConfig(n_trees=1))

    def test_default_tree_count(self):
        assert ForestConfig().n_trees == 10
        gt = [[0.3, 0.4, 0.2, 0.1]]
        ds = one_image_dataset([[0.1, 0.1, 0.3, 0.3], [0.3, 0.35, 0.2, 0.1]] * 3, gt)
        assert train_forest(ds, "car").n_trees == 10

    def test_training_pairs(self, small_data):
        im = small_data[0][0]
        s = image_samples(im, "car")
        gt = im.gt("car")
        target = gt[closest_gt_index(im.windows, gt)]
        assert np.array_equal(s.displacements, target - im.windows)
        for w, k in zip(im.windows[:50], closest_gt_index(im.windows[:50], gt)):
            assert iou(w, gt[k]) == max(iou(w, g) for g in gt)

    def test_zero_iou_falls_back_to_center_distance(self):
        gt = np.array([[0.0, 0.0, 0.1, 0.1], [0.8, 0.8, 0.1, 0.1]])
        w = np.array([[0.6, 0.6, 0.1, 0.1]])
        assert closest_gt_index(w, gt)[0] == 1

    def test_candidate_count(self):
        from activesearch.synthetic import SyntheticConfig, generate_synthetic
        cfg = SyntheticConfig(n_train=6, n_test=0, proposals_per_image=40)
        train, _ = generate_synthetic(cfg)
        model = train_forest(train, "car", ForestConfig(n_trees=1, images_per_tree=3),
                             rng_seed=0)
        assert model.meta["n_candidate_samples"] == 6 * 40
        assert len(model.meta["tree_images"][0]) == 3

    def test_jobs_do_not_change_result(self, small_data):
        cfg = ForestConfig(n_trees=2, images_per_tree=5, max_depth=6, n_candidates=20)
        a = train_forest(small_data[0], "car", cfg, rng_seed=4, jobs=1)
        b = train_forest(small_data[0], "car", cfg, rng_seed=4, jobs=2)
        for ta, tb in zip(a.trees, b.trees):
            for k, v in ta.arrays().items():
                assert np.array_equal(v, tb.arrays()[k])


class TestContext:
    def test_zero_forest_copies_window(self):
        model = ForestModel([Tree.single_leaf(np.zeros(4), NBYTES)] * 4, "car")
        p = proposal_like((0.1, 0.2, 0.3, 0.3), code(7))
        assert [w.astuple() for w in extract_context(model, p)] == [(0.1, 0.2, 0.3, 0.3)] * 4

    def test_single_tree_clamped(self):
        model = ForestModel([Tree.single_leaf([0.5, 0.0, 0.0, 0.0], NBYTES)], "car")
        ctx = extract_context(model, proposal_like((0.6, 0.2, 0.3, 0.3), code(1)))
        assert len(ctx) == 1
        assert ctx[0] == apply_displacement((0.6, 0.2, 0.3, 0.3), (0.5, 0.0, 0.0, 0.0))
        assert ctx[0].x + ctx[0].w <= 1.0

    def test_many_matches_single(self, small_forest, small_data):
        im = small_data[1][2]
        many = small_forest.context_many(im.windows, im.codes)
        for i in range(0, im.n_proposals, 7):
            assert np.array_equal(many[i], small_forest.context_windows(im.windows[i],
                                                                        im.codes[i]))

    def test_noise_free_band_a_hits_target(self):
        from activesearch.synthetic import SyntheticConfig, anchor_mask, generate_synthetic
        cfg = SyntheticConfig(n_train=40, n_test=10, proposals_per_image=150,
                              noise_rate=0.0, jitter=0.0, max_objects=1, seed=2)
        train, test = generate_synthetic(cfg)
        model = train_forest(train, "car", ForestConfig(n_trees=10, images_per_tree=20),
                             rng_seed=0)
        for im in test:
            gt = im.gt("car")[0]
            for i in np.flatnonzero(anchor_mask(im, cfg)):
                ctx = model.context_windows(im.windows[i], im.codes[i])
                assert len(ctx) == 10
                assert min(iou(w, gt) for w in ctx) >= 0.5


class TestSerialization:
    def test_round_trip_bit_identical(self, small_forest, small_data, tmp_path, rng):
        path = tmp_path / "sub" / "model.npz"
        small_forest.save(path)
        back = ForestModel.load(path)
        assert back.n_trees == small_forest.n_trees
        assert back.class_name == "car"
        assert np.array_equal(back.start_window, small_forest.start_window)
        im = small_data[1][0]
        pick = rng.choice(im.n_proposals, size=100, replace=False)
        for i in pick:
            a = small_forest.context_windows(im.windows[i], im.codes[i])
            b = back.context_windows(im.windows[i], im.codes[i])
            assert a.tobytes() == b.tobytes()

    def test_save_is_deterministic(self, small_forest, tmp_path):
        small_forest.save(tmp_path / "a.npz")
        small_forest.save(tmp_path / "b.npz")
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()

    def test_garbage_rejected(self, tmp_path):
        p = tmp_path / "bad.npz"
        p.write_bytes(b"not a zip")
        with pytest.raises(ValidationError):
            ForestModel.load(p)

    def test_wrong_version_rejected(self, small_forest, tmp_path):
        import json
        import zipfile
        path = tmp_path / "m.npz"
        small_forest.save(path)
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
        header = json.loads(str(arrays["header"]))
        header["format_version"] = 99
        arrays["header"] = np.array(json.dumps(header))
        np.savez(path, **arrays)
        assert zipfile.is_zipfile(path)
        with pytest.raises(ValidationError, match="format"):
            ForestModel.load(path)
