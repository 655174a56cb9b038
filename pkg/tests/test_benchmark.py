import numpy as np

from activesearch.benchmark import OverheadReport, measure_episode, synthetic_image, within_linear
from activesearch.classifier import OracleScorer
from activesearch.dataio import Dataset
from activesearch.search import Hyperparameters


def report(n, ms):
    return OverheadReport(n, 10, 100, 0.0, ms, ms, 0.0, 0.0, 0.0, 0)


class TestLinearFit:
    def test_exact_line(self):
        rs = [report(500, 1.0), report(1000, 2.0), report(2000, 4.0)]
        assert within_linear(rs, 0.002, 0.0)

    def test_outlier(self):
        rs = [report(500, 1.0), report(1000, 9.0), report(2000, 4.0)]
        assert not within_linear(rs, 0.002, 0.0)


def test_measure_episode_counts(small_forest):
    image, cfg = synthetic_image(300, seed=4)
    scorer = OracleScorer(Dataset([image]), cfg.class_name, noise=0.0)
    r = measure_episode(image, small_forest, scorer, Hyperparameters(0.5, 0.1, 0.3, 40))
    assert r.iterations == 40
    assert r.n_proposals == 300
    assert r.mean_ms > 0 and r.median_ms > 0
    assert np.isclose(r.mean_ms, r.query_mean_ms + r.update_mean_ms)
    # every iteration routes once per tree, at most max_depth tests each
    assert r.distance_evals_per_iteration <= small_forest.n_trees * r.max_path_length
    assert r.max_path_length <= small_forest.config.max_depth


def test_synthetic_image_size():
    image, _ = synthetic_image(123, seed=1)
    assert image.n_proposals == 123
