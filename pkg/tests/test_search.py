import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from activesearch.classifier import ConstantScorer, CountingScorer, OracleScorer
from activesearch.dataio import Dataset, ImageRecord
from activesearch.errors import EpisodeExhausted, InvalidInputError, InvalidParameterError
from activesearch.forest import ForestModel, QueryStats, Tree
from activesearch.geometry import iou, kernel
from activesearch.search import (BeliefState, Hyperparameters, context_force, initial_window,
                                 read_trace, recompute_beliefs, run_episode, score_force,
                                 select_next, start_index, update_beliefs, write_snapshot,
                                 write_trace)


def image_with(windows, gt=((0.4, 0.4, 0.2, 0.2),), nbytes=8, image_id="im"):
    windows = np.asarray(windows, float)
    codes = np.zeros((len(windows), nbytes), np.uint8)
    return ImageRecord(image_id, windows, codes, {"car": np.asarray(gt, float)})


def zero_forest(n_trees=2, nbytes=8):
    return ForestModel([Tree.single_leaf(np.zeros(4), nbytes)] * n_trees, "car")


class TestHyperparameters:
    @pytest.mark.parametrize("kw", [dict(lam=1.5), dict(lam=-0.1), dict(sigma_s=0.0),
                                    dict(sigma_c=-1.0), dict(budget=0)])
    def test_rejects(self, kw):
        with pytest.raises(InvalidParameterError):
            Hyperparameters(**kw)

    def test_dict_round_trip(self):
        th = Hyperparameters(0.25, 0.1, 0.3, 40)
        assert Hyperparameters.from_dict(th.to_dict()) == th


class TestInitialWindow:
    def test_one_box(self):
        ds = Dataset([image_with([[0, 0, 0.1, 0.1]], gt=[(0.1, 0.2, 0.3, 0.4)])])
        assert initial_window(ds, "car").astuple() == (0.1, 0.2, 0.3, 0.4)

    def test_two_boxes(self):
        ds = Dataset([image_with([[0, 0, 0.1, 0.1]], gt=[(0, 0, 0.2, 0.2), (0.4, 0.4, 0.2, 0.2)])])
        assert initial_window(ds, "car").astuple() == pytest.approx((0.2, 0.2, 0.2, 0.2))

    def test_full_training_set(self, small_data):
        train, _ = small_data
        acc, n = np.zeros(4), 0
        for im in train:
            for box in im.gt("car"):
                acc += box
                n += 1
        assert initial_window(train, "car").as_array() == pytest.approx(acc / n, abs=1e-12)

    def test_no_boxes(self):
        with pytest.raises(InvalidInputError):
            initial_window(Dataset([image_with([[0, 0, 0.1, 0.1]], gt=())]), "car")


class TestSelectNext:
    def test_first_pick_nearest_start(self):
        windows = np.array([[0.0, 0.0, 0.2, 0.2], [0.35, 0.35, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]])
        state = BeliefState.fresh(3)
        assert select_next(state, windows, (0.4, 0.4, 0.2, 0.2)) == 1

    def test_zero_iou_start_uses_center_distance(self):
        windows = np.array([[0.0, 0.0, 0.1, 0.1], [0.6, 0.6, 0.1, 0.1]])
        assert start_index(windows, (0.45, 0.45, 0.1, 0.1)) == 1

    def test_tie_lowest_index(self):
        state = BeliefState([0.1, 0.9, 0.9], t=1)
        assert select_next(state) == 1

    def test_skips_visited(self):
        state = BeliefState([0.1, 0.9, 0.3], visited=[(1, 0.5)], t=1)
        assert select_next(state) == 2

    def test_exhausted(self):
        state = BeliefState([0.1, 0.2], visited=[(0, 0.1), (1, 0.1)], t=2)
        with pytest.raises(EpisodeExhausted):
            select_next(state)

    def test_mark_twice(self):
        state = BeliefState.fresh(2)
        state.mark(0, 0.5)
        with pytest.raises(InvalidInputError):
            state.mark(0, 0.5)


class TestForces:
    def test_centered_score_is_zero(self, rng):
        w = rng.uniform(0, 0.5, (10, 4)) + [0, 0, 0.1, 0.1]
        assert np.all(score_force(w, (0.2, 0.2, 0.3, 0.3), 0.5, 0.3) == 0.0)

    def test_self_attraction_and_repulsion(self):
        o = (0.1, 0.1, 0.3, 0.3)
        assert score_force(o, o, 1.0, 0.2) == 0.5
        assert score_force(o, o, 0.0, 0.2) == -0.5

    def test_context_repeated_self(self):
        o = (0.1, 0.1, 0.3, 0.3)
        assert context_force(o, [o] * 10, 0.4) == 10.0

    def test_context_disjoint(self):
        o = (0.0, 0.0, 0.1, 0.1)
        gamma = [(0.5 + 0.04 * j, 0.5, 0.05, 0.05) for j in range(6)]
        assert context_force(o, gamma, 1.0) == pytest.approx(6 * math.exp(-0.5), rel=1e-14)

    def test_context_term_by_term(self, rng):
        o = (0.2, 0.3, 0.25, 0.2)
        gamma = rng.uniform(0, 0.5, (10, 4)) + [0, 0, 0.05, 0.05]
        expect = sum(kernel(g, o, 0.3) for g in gamma)
        assert context_force(o, gamma, 0.3) == pytest.approx(expect, rel=1e-13)
        assert 0 < context_force(o, gamma, 0.3) <= 10

    def test_vector_forms(self, rng):
        windows = rng.uniform(0, 0.5, (30, 4)) + [0, 0, 0.05, 0.05]
        gamma = rng.uniform(0, 0.5, (4, 4)) + [0, 0, 0.05, 0.05]
        o = windows[3]
        sv = score_force(windows, o, 0.8, 0.2)
        cv = context_force(windows, gamma, 0.3)
        for i in range(30):
            assert sv[i] == pytest.approx(score_force(windows[i], o, 0.8, 0.2), rel=1e-14)
            assert cv[i] == pytest.approx(context_force(windows[i], gamma, 0.3), rel=1e-14)


class TestUpdate:
    def setup_method(self):
        r = np.random.default_rng(5)
        self.windows = r.uniform(0, 0.5, (40, 4)) + [0, 0, 0.05, 0.05]
        self.gamma = r.uniform(0, 0.5, (3, 4)) + [0, 0, 0.05, 0.05]

    def test_lambda_one_is_pure_score(self):
        st_ = BeliefState.fresh(40)
        update_beliefs(st_, self.windows[0], 0.9, self.gamma, Hyperparameters(1.0, 0.2, 0.3),
                       self.windows)
        assert np.allclose(st_.beliefs, score_force(self.windows, self.windows[0], 0.9, 0.2),
                           rtol=1e-14, atol=0)

    def test_lambda_zero_is_pure_context(self):
        st_ = BeliefState.fresh(40)
        update_beliefs(st_, self.windows[0], 0.9, self.gamma, Hyperparameters(0.0, 0.2, 0.3),
                       self.windows)
        assert np.allclose(st_.beliefs, context_force(self.windows, self.gamma, 0.3),
                           rtol=1e-14, atol=0)

    def test_visited_still_updated(self):
        st_ = BeliefState.fresh(40)
        st_.mark(0, 0.9)
        update_beliefs(st_, self.windows[0], 0.9, self.gamma, Hyperparameters(0.5, 0.2, 0.3),
                       self.windows)
        assert st_.beliefs[0] != 0.0

    def test_lambda_zero_strictly_positive(self):
        # moderate bandwidth: exp(-1 / (2 * 0.3^2)) is far from underflow
        st_ = BeliefState.fresh(40)
        for t in range(5):
            before = st_.beliefs.copy()
            update_beliefs(st_, self.windows[t], 0.1, self.gamma, Hyperparameters(0.0, 0.2, 0.3),
                           self.windows)
            assert np.all(st_.beliefs - before > 0)


class TestEpisode:
    def test_budget_n_visits_all(self, small_forest, small_data, small_scorer):
        im = small_data[1][0]
        ep = run_episode(im, small_forest, small_scorer, Hyperparameters(budget=10_000))
        assert sorted(ep.indices.tolist()) == list(range(im.n_proposals))
        assert np.array_equal(ep.scores[np.argsort(ep.indices)], small_scorer.scores_for(im))

    def test_budget_one_is_start(self, small_forest, small_data, small_scorer):
        im = small_data[1][1]
        ep = run_episode(im, small_forest, small_scorer, Hyperparameters(budget=1))
        assert ep.indices.tolist() == [start_index(im.windows, small_forest.start_window)]

    def test_no_repeats_and_budget(self, small_forest, small_data, small_scorer):
        for im in small_data[1]:
            counter = CountingScorer(small_scorer)
            ep = run_episode(im, small_forest, counter, Hyperparameters(budget=40))
            assert len(ep) == 40 == len(set(ep.indices.tolist()))
            assert counter.calls == len(counter.seen) == 40

    def test_argmax_each_step(self, small_forest, small_data, small_scorer):
        im = small_data[1][2]
        th = Hyperparameters(0.5, 0.1, 0.3, 30)
        ep = run_episode(im, small_forest, small_scorer, th, snapshots=range(1, 30))
        for t in range(1, 29):
            b = np.where(np.isin(np.arange(im.n_proposals), ep.indices[:t]), -np.inf,
                         ep.snapshots[t])
            assert ep.indices[t] == int(np.argmax(b))
            assert ep.trace[t].belief == ep.snapshots[t][ep.indices[t]]

    def test_matches_reference_update(self, small_forest, small_data, small_scorer):
        im = small_data[1][3]
        th = Hyperparameters(0.4, 0.2, 0.5, 25)
        ep = run_episode(im, small_forest, small_scorer, th)
        state = BeliefState.fresh(im.n_proposals)
        for t, row in enumerate(ep.trace):
            nxt = select_next(state, im.windows, small_forest.start_window)
            assert nxt == row.index
            state.mark(nxt, row.score)
            gamma = small_forest.context_windows(im.windows[nxt], im.codes[nxt])
            update_beliefs(state, im.windows[nxt], row.score, gamma, th, im.windows)
        assert np.allclose(state.beliefs, ep.beliefs, rtol=0, atol=1e-12)

    def test_incremental_equals_batch(self, small_forest, small_data, small_scorer):
        for im in small_data[1]:
            th = Hyperparameters(0.3, 0.1, 0.3, 80)
            ep = run_episode(im, small_forest, small_scorer, th)
            assert np.abs(recompute_beliefs(im.windows, ep, th) - ep.beliefs).max() <= 1e-9

    def test_lazy_equals_eager(self, small_forest, small_data, small_scorer):
        im = small_data[1][4]
        th = Hyperparameters(0.5, 0.1, 0.3, 60)
        stats = QueryStats()
        a = run_episode(im, small_forest, small_scorer, th)
        b = run_episode(im, small_forest, small_scorer, th, context="lazy", stats=stats,
                        timed=True)
        assert np.array_equal(a.indices, b.indices)
        assert np.array_equal(a.beliefs, b.beliefs)
        assert stats.routes == 60 * small_forest.n_trees
        assert len(b.timings["forest_query"]) == 60

    def test_one_object_found_early(self):
        from activesearch.forest import ForestConfig, train_forest
        from activesearch.synthetic import SyntheticConfig, generate_synthetic
        cfg = SyntheticConfig(n_train=30, n_test=30, proposals_per_image=200, max_objects=1,
                              seed=21)
        train, test = generate_synthetic(cfg)
        model = train_forest(train, "car", ForestConfig(n_trees=5, images_per_tree=15),
                             rng_seed=0)
        model.start_window = initial_window(train, "car").as_array()
        scorer = OracleScorer(test, "car", noise=0.0)
        for im in test:
            # the setting tuning selects on the default benchmark
            ep = run_episode(im, model, scorer, Hyperparameters(0.25, 0.01, 0.01, 50))
            assert max(iou(w, im.gt("car")[0]) for w in ep.windows) >= 0.5

    def test_empty_image(self):
        im = ImageRecord("e", np.zeros((0, 4)), np.zeros((0, 8), np.uint8))
        with pytest.raises(InvalidInputError):
            run_episode(im, zero_forest(), ConstantScorer(), Hyperparameters(), (0, 0, 0.1, 0.1))

    def test_bad_score(self):
        class Bad:
            def __call__(self, image_id, index):
                return 1.5

        im = image_with([[0, 0, 0.1, 0.1], [0.5, 0.5, 0.1, 0.1]])
        with pytest.raises(InvalidInputError):
            run_episode(im, zero_forest(), Bad(), Hyperparameters(), (0, 0, 0.1, 0.1))

    def test_missing_start(self):
        im = image_with([[0, 0, 0.1, 0.1]])
        with pytest.raises(InvalidInputError):
            run_episode(im, zero_forest(), ConstantScorer(), Hyperparameters())

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.0, 1.0), st.sampled_from([0.05, 0.2, 1.0]),
           st.sampled_from([0.05, 0.2, 1.0]))
    def test_random_images_invariants(self, seed, lam, ss, sc):
        r = np.random.default_rng(seed)
        n = int(r.integers(2, 60))
        w = r.uniform(0.02, 0.4, (n, 2))
        windows = np.column_stack([r.uniform(0, 1, (n, 2)) * (1 - w), w])
        im = image_with(windows)
        forest = ForestModel([Tree.single_leaf(r.uniform(-0.2, 0.2, 4), 8) for _ in range(3)],
                             "car")
        scorer = OracleScorer(Dataset([im]), "car", noise=0.1, seed=seed)
        th = Hyperparameters(lam, ss, sc, int(r.integers(1, n + 5)))
        ep = run_episode(im, forest, scorer, th, (0.4, 0.4, 0.2, 0.2))
        assert len(ep) == min(th.budget, n)
        assert len(set(ep.indices.tolist())) == len(ep)
        assert np.abs(recompute_beliefs(im.windows, ep, th) - ep.beliefs).max() <= 1e-9


class TestExport:
    def test_trace_columns(self, small_forest, small_data, small_scorer, tmp_path):
        im = small_data[1][0]
        ep = run_episode(im, small_forest, small_scorer, Hyperparameters(budget=5))
        write_trace(ep, tmp_path / "t.tsv")
        back = read_trace(tmp_path / "t.tsv", im.id)
        assert np.array_equal(back.indices, ep.indices)
        assert np.array_equal(back.scores, ep.scores)
        assert np.array_equal(back.windows, ep.windows)
        assert [r.belief for r in back.trace] == [r.belief for r in ep.trace]

    def test_snapshot(self, tmp_path):
        write_snapshot(np.array([0.5, -1.25]), tmp_path / "s.tsv")
        lines = (tmp_path / "s.tsv").read_text().splitlines()
        assert lines[1] == "proposal_index\tbelief"
        assert lines[2:] == ["0\t0.5", "1\t-1.25"]
