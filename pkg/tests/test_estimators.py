import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from specdiff.estimators import DefectSegmenter, Sim2Registration, check_image, check_image_stack, check_pairs
from specdiff.registration import PoseSim2, warp_sim2
from specdiff.simgen import GenConfig, gen_dataset, gen_template


def test_check_image():
    assert check_image([[0, 1], [2, 3]]).dtype == np.float64
    for bad in (np.zeros(4), np.zeros((0, 4)), np.full((2, 2), np.nan), np.zeros((2, 2, 2, 2))):
        with pytest.raises(ValueError):
            check_image(bad)


def test_check_image_stack_promotes_plane():
    assert check_image_stack(np.zeros((4, 4))).shape == (1, 4, 4)
    with pytest.raises(ValueError):
        check_image_stack(np.zeros((0, 4, 4)))
    with pytest.raises(ValueError):
        check_image_stack(np.zeros(4))


def test_check_pairs():
    assert check_pairs(np.zeros((2, 8, 8))).shape == (1, 2, 8, 8)
    with pytest.raises(ValueError):
        check_pairs(np.zeros((3, 3, 8, 8)))
    bad = np.zeros((1, 2, 8, 8))
    bad[0, 1, 2, 2] = np.inf
    with pytest.raises(ValueError):
        check_pairs(bad)


def test_registration_recovers_poses():
    template = gen_template(0, GenConfig(image_size=128, n_shapes=(10, 15)))
    poses = [PoseSim2(math.radians(20), 0.9, 3.0, -5.0), PoseSim2(math.radians(75), 1.15, -8.0, 2.0)]
    sources = np.stack([warp_sim2(template, p) for p in poses])
    est = Sim2Registration().fit(template)
    out = est.predict(sources)
    assert out.shape == (2, 4)
    for row, p in zip(out, poses):
        assert abs(row[0] - p.theta_deg) <= 1.5
        assert row[1] == pytest.approx(p.scale, rel=0.03)
        assert math.hypot(row[2] - p.tx, row[3] - p.ty) <= 1.0
    aligned = est.transform(sources)
    assert aligned.shape == sources.shape


def test_registration_not_fitted_and_shape_mismatch():
    est = Sim2Registration()
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((1, 32, 32)))
    est.fit(np.zeros((32, 32)))
    with pytest.raises(ValueError):
        est.predict(np.zeros((1, 32, 64)))


def test_params_round_trip_through_clone():
    seg = DefectSegmenter(epochs=3, base_width=4, seed=5)
    twin = clone(seg)
    assert twin.get_params() == seg.get_params()
    assert clone(Sim2Registration(temperature=5.0)).temperature == 5.0


@pytest.fixture(scope="module")
def small_problem():
    pairs = gen_dataset(4, GenConfig(image_size=32, translation=(-3, 3)), seed=9)
    X = np.stack([np.stack([p.template, p.source]) for p in pairs])
    y = np.stack([p.gt_mask for p in pairs])
    return X, y


def test_segmenter_fit_predict(small_problem):
    X, y = small_problem
    seg = DefectSegmenter(epochs=1, batch_size=2, base_width=4, depth=2, seed=1).fit(X, y)
    assert len(seg.history_) == 1 and math.isfinite(seg.history_[0]["total"])
    proba = seg.predict_proba(X)
    assert proba.shape == y.shape and np.all((proba > 0) & (proba < 1))
    hard = seg.predict(X)
    assert hard.dtype == np.uint8 and set(np.unique(hard)) <= {0, 1}
    assert 0.0 <= seg.score(X, y) <= 1.0


def test_segmenter_is_deterministic(small_problem):
    X, y = small_problem
    a = DefectSegmenter(epochs=1, batch_size=2, base_width=4, depth=2, seed=1).fit(X, y).predict_proba(X)
    b = DefectSegmenter(epochs=1, batch_size=2, base_width=4, depth=2, seed=1).fit(X, y).predict_proba(X)
    assert np.array_equal(a, b)


def test_segmenter_validation(small_problem):
    X, y = small_problem
    seg = DefectSegmenter(epochs=1, base_width=4, depth=2)
    with pytest.raises(NotFittedError):
        seg.predict(X)
    with pytest.raises(ValueError):
        seg.fit(X, y[:2])
    with pytest.raises(ValueError):
        DefectSegmenter(epochs=0).fit(X, y)
