import numpy as np
import pytest

from floodseg.data import write_synthetic_dataset
from floodseg.errors import DataError, FormatError, RoutingError, ShapeError
from floodseg.fusion import (
    FusionModel,
    VoteConfig,
    class_weights,
    concat_features,
    majority_vote,
    route_prediction,
    specialist_seed,
    svm_objective,
    svm_predict,
    svm_train,
    train_location_models,
)
from floodseg.infer import ProbabilityMap, predict_image, threshold
from floodseg.optim import OptimConfig


def pmap(p):
    return ProbabilityMap(np.stack([1 - p, p]))


def test_concat_features():
    rng = np.random.default_rng(0)
    p = rng.uniform(size=(6, 7))
    assert np.array_equal(concat_features([pmap(p)]), p.reshape(-1, 1))
    f = concat_features([np.full((4, 4), 0.2), np.full((4, 4), 0.8)])
    assert f.shape == (16, 2) and np.all(f == [0.2, 0.8])
    assert concat_features([np.zeros((320, 320))] * 8).shape == (102400, 8)
    with pytest.raises(ShapeError):
        concat_features([np.zeros((4, 4)), np.zeros((4, 5))])


def test_svm_separable_1d():
    m = svm_train(np.array([[0.0], [1.0]]), np.array([-1, 1]), seed=0)
    assert svm_predict(m, np.array([[0.0], [1.0]]), 1, 2).tolist() == [[0, 1]]


def complementary_pair(n=4000, seed=1):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    good = np.clip(y + rng.normal(0, 0.1, n), 0, 1)
    noise = rng.uniform(size=n)
    return np.stack([good, noise], axis=1), np.where(y == 1, 1, -1)


def test_svm_prefers_informative_feature():
    x, y = complementary_pair()
    m = svm_train(x, y, seed=0)
    assert abs(m.weights[0]) > abs(m.weights[1])
    assert m.objective <= svm_objective(np.zeros(2), 0.0, x, y, m.C, class_weights(y, "balanced"))


def test_svm_objective_never_worse_than_origin():
    rng = np.random.default_rng(2)
    for seed in range(5):
        x = rng.uniform(size=(500, 3))
        y = np.where(rng.uniform(size=500) < 0.3, 1, -1)  # pure noise
        m = svm_train(x, y, seed=seed)
        assert m.objective <= svm_objective(np.zeros(3), 0.0, x, y, m.C, class_weights(y, "balanced")) + 1e-12


def test_svm_is_deterministic():
    x, y = complementary_pair()
    a, b = svm_train(x, y, seed=3), svm_train(x, y, seed=3)
    assert a.to_json() == b.to_json()


def test_svm_subsamples_large_inputs():
    x, y = complementary_pair(n=3000)
    m = svm_train(x, y, seed=0, max_samples=1000)
    assert abs(m.weights[0]) > abs(m.weights[1])


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_svm_agrees_with_liblinear():
    svm = pytest.importorskip("sklearn.svm")
    x, y = complementary_pair(n=3000, seed=5)
    C = 10.0
    sw = class_weights(y, "balanced")
    ours = svm_train(x, y, C=C, seed=0)
    # same objective: sum form with C/n, intercept made (almost) unregularized
    ref = svm.LinearSVC(C=C / len(y), loss="hinge", dual=True, intercept_scaling=100, tol=1e-10, max_iter=10 ** 6)
    ref.fit(x, y, sample_weight=sw)
    ref_obj = svm_objective(ref.coef_[0], float(ref.intercept_[0]), x, y, C, sw)
    assert ours.objective <= ref_obj * (1 + 1e-3)


def test_svm_input_errors():
    with pytest.raises(DataError):
        svm_train(np.zeros((3, 1)), np.array([0, 1, 1]))
    with pytest.raises(DataError):
        svm_train(np.zeros((3, 1)), np.array([1, 1, 1]))
    with pytest.raises(ShapeError):
        svm_train(np.zeros((3, 2)), np.array([1, -1]))


def test_svm_predict_reduces_to_threshold():
    rng = np.random.default_rng(4)
    for t in (0.1, 0.3, 0.5, 0.77, 0.9):
        p = rng.uniform(size=(9, 11))
        p[0, 0] = t
        m = FusionModel([1.0], -t)
        assert np.array_equal(svm_predict(m, concat_features([pmap(p)]), 9, 11), threshold(pmap(p), t))
    assert np.all(svm_predict(FusionModel([0.0], 1.0), np.zeros((12, 1)), 3, 4) == 1)


def test_svm_predict_checks_order():
    m = FusionModel([1.0, 1.0], 0.0, trained_on=["a", "b"])
    with pytest.raises(ShapeError):
        svm_predict(m, np.zeros((4, 2)), 2, 2, order=["b", "a"])
    with pytest.raises(ShapeError):
        svm_predict(m, np.zeros((4, 3)), 2, 2)


def test_fusion_model_json_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    for _ in range(50):
        k = int(rng.integers(1, 9))
        m = FusionModel(list(rng.standard_normal(k)), float(rng.standard_normal()), float(rng.uniform(0.1, 100)),
                        [f"net-{i}" for i in range(k)], int(rng.integers(0, 2 ** 31)), float(rng.uniform()))
        back = FusionModel.from_json(m.to_json())
        assert back == m and back.to_json() == m.to_json()
    m.save(tmp_path / "f.json")
    assert FusionModel.load(tmp_path / "f.json") == m
    with pytest.raises(FormatError):
        FusionModel.from_json('{"weights": [1.0]}')
    with pytest.raises(FormatError):
        FusionModel.from_json('{"weights": [NaN], "bias": 0}')


def test_vote_examples():
    one, zero = np.ones((1, 1)), np.zeros((1, 1))
    assert majority_vote([one, one, zero]).tolist() == [[1]]
    assert majority_vote([one, zero], VoteConfig(["a", "b"])).tolist() == [[0]]
    assert majority_vote([one, zero], VoteConfig(["a", "b"], "flooded")).tolist() == [[1]]
    m = np.random.default_rng(0).integers(0, 2, (5, 5))
    assert np.array_equal(majority_vote([m, m, m]), m)
    with pytest.raises(ValueError):
        VoteConfig(["only"])
    with pytest.raises(ShapeError):
        majority_vote([np.zeros((2, 2)), np.zeros((2, 3))])


def test_vote_symmetry_and_monotonicity():
    rng = np.random.default_rng(1)
    for _ in range(50):
        k = int(rng.integers(2, 7))
        maps = [rng.integers(0, 2, (6, 6)) for _ in range(k)]
        cfg = VoteConfig([str(i) for i in range(k)], str(rng.choice(["background", "flooded"])))
        out = majority_vote(maps, cfg)
        assert np.array_equal(out, majority_vote([maps[i] for i in rng.permutation(k)], cfg))
        j = int(rng.integers(0, k))
        flipped = [m.copy() for m in maps]
        flipped[j][:] = 1
        assert np.all(majority_vote(flipped, cfg) >= out)


@pytest.fixture(scope="module")
def tiny_locations(tmp_path_factory):
    root = tmp_path_factory.mktemp("loc")
    m = write_synthetic_dataset(root, seed=2, count=12, size=64, test_count=1, new_count=1)
    specialists = train_location_models(m, OptimConfig(epochs=1), seed=4, dtype=np.float64)
    return m, specialists


def test_specialists_have_distinct_seeds(tiny_locations):
    _, specialists = tiny_locations
    assert len(specialists) == 6
    assert len({specialist_seed(4, k) for k in range(1, 7)}) == 6
    firsts = [specialists[k].weights[0].tobytes() for k in range(1, 7)]
    assert len(set(firsts)) == 6
    assert specialists[3].meta["locations"] == [3]


def test_specialist_without_images_fails(tiny_locations):
    m, _ = tiny_locations
    empty = type(m)([e for e in m.entries if e.location != 5], m.band_stats, m.metadata, m.root)
    with pytest.raises(DataError, match="location 5"):
        train_location_models(empty, OptimConfig(epochs=1), seed=0, locations=[5])


def test_routing(tiny_locations):
    m, specialists = tiny_locations
    x = np.random.default_rng(0).standard_normal((4, 64, 64))
    got = route_prediction(3, specialists, None, x)
    assert np.array_equal(got, threshold(predict_image(specialists[3], x, 25)))
    fm = FusionModel([0.3, -0.2, 0.5, 0.1, 0.4, -0.1], -0.2,
                     trained_on=[f"location-{k}" for k in range(1, 7)])
    maps = [predict_image(specialists[k], x, 25) for k in range(1, 7)]
    want = svm_predict(fm, concat_features(maps), 64, 64)
    assert np.array_equal(route_prediction("new", specialists, fm, x), want)
    with pytest.raises(RoutingError, match="9"):
        route_prediction(9, specialists, fm, x)
    with pytest.raises(RoutingError):
        route_prediction("new", specialists, None, x)
