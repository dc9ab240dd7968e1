import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from binens.ensemble import (DegenerateTrainingError, EnsembleModel, SampleWeights, adaboost_train, fit_stump,
                             init_sample_weights, is_degenerate, model_weight, soft_vote, update_sample_weights,
                             vote, weighted_error)

from conftest import boost_stumps, prefix_errors, xor_task


class Fixed:
    """A member with canned predictions (and optionally logits)."""

    def __init__(self, pred, logits=None):
        self.pred = np.asarray(pred)
        if logits is not None:
            self.predict_logits = lambda data, **_: np.asarray(logits)

    def predict(self, data, **_):
        return self.pred


# -- sample weights -----------------------------------------------------------------


def test_init_weights_examples():
    np.testing.assert_array_equal(init_sample_weights(4).weights, [0.25] * 4)
    np.testing.assert_array_equal(init_sample_weights(1).weights, [1.0])
    with pytest.raises(ValueError):
        init_sample_weights(0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5000))
def test_init_weights_sum_to_one(m):
    assert abs(init_sample_weights(m).weights.sum() - 1) <= 1e-9


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        SampleWeights([0.5, -0.5])


def test_weighted_error_examples():
    D = init_sample_weights(4)
    assert weighted_error([0, 1, 1, 0], [0, 1, 1, 0], D) == 0.0
    assert weighted_error([0, 1, 1, 1], [0, 1, 1, 0], D) == 0.25
    with pytest.raises(ValueError):
        weighted_error([0, 1], [0, 1, 1], D)


def test_weighted_error_loop_oracle(rng):
    for _ in range(20):
        m = int(rng.integers(1, 50))
        pred, y = rng.integers(0, 3, m), rng.integers(0, 3, m)
        w = rng.random(m)
        D = SampleWeights(w / w.sum())
        expected = 0.0
        for j in range(m):
            if pred[j] != y[j]:
                expected += D.weights[j]
        assert weighted_error(pred, y, D) == pytest.approx(expected, abs=1e-15)


def test_model_weight_examples():
    assert model_weight(0.5, 2) == 0.0
    assert model_weight(0.25, 2) == pytest.approx(0.5 * math.log(3))
    assert model_weight(0.25, 3) == pytest.approx(math.log(3) + math.log(2))
    assert math.isfinite(model_weight(0.0)) and math.isfinite(model_weight(1.0))


def test_degenerate_threshold():
    assert is_degenerate(0.5, 2) and not is_degenerate(0.49, 2)
    assert is_degenerate(2 / 3, 3) and not is_degenerate(0.6, 3)


def test_update_example():
    D = update_sample_weights(init_sample_weights(4), 0.5 * math.log(3), [True, True, True, False])
    np.testing.assert_allclose(D.weights, [1 / 6, 1 / 6, 1 / 6, 0.5], atol=1e-12)
    assert D.round == 2


def test_update_alpha_zero_is_identity(rng):
    w = rng.random(7)
    D = SampleWeights(w / w.sum())
    np.testing.assert_allclose(update_sample_weights(D, 0.0, rng.random(7) < 0.5).weights, D.weights, atol=1e-15)


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 200), st.integers(0, 2 ** 32 - 1))
def test_reweight_identity_and_normalization(m, seed):
    g = np.random.default_rng(seed)
    w = g.random(m) + 1e-3
    D = SampleWeights(w / w.sum())
    correct = g.random(m) < 0.7
    correct[0], correct[1] = True, False     # keep 0 < e < 1
    e = weighted_error(correct.astype(int), np.ones(m, int), D)
    D2 = update_sample_weights(D, model_weight(e, 2), correct)
    assert abs(D2.weights.sum() - 1) <= 1e-9
    assert (D2.weights >= 0).all()
    if 1e-10 < e < 1 - 1e-10:
        assert abs(D2.weights[~correct].sum() - 0.5) <= 1e-9


# -- vote -----------------------------------------------------------------------------


def test_vote_two_members():
    pred, _ = vote([[0, 1], [1, 1]], [0.6, 0.4], 2)
    np.testing.assert_array_equal(pred, [0, 1])


def test_vote_ties_go_to_lowest_class():
    pred, _ = vote([[1], [0]], [0.5, 0.5], 2)
    assert pred[0] == 0


def test_vote_loop_oracle(rng):
    for _ in range(50):
        n, m, K = int(rng.integers(1, 6)), int(rng.integers(1, 30)), int(rng.integers(2, 5))
        P = rng.integers(0, K, size=(n, m))
        a = rng.random(n)
        pred, scores = vote(P, a, K)
        for x in range(m):
            s = [0.0] * K
            for i in range(n):
                s[P[i, x]] += a[i]
            assert scores[x].tolist() == s
            assert pred[x] == max(range(K), key=lambda k: (s[k], -k))


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(1e-3, 1e3))
def test_vote_properties(seed, c):
    g = np.random.default_rng(seed)
    n, m, K = int(g.integers(1, 6)), int(g.integers(1, 40)), int(g.integers(2, 5))
    P = g.integers(0, K, size=(n, m))
    a = g.random(n) + 0.01
    base = vote(P, a, K)[0]
    # positive rescaling of alpha
    np.testing.assert_array_equal(vote(P, a * c, K)[0], base)
    # a zero-weight member changes nothing
    extra = g.integers(0, K, size=(1, m))
    np.testing.assert_array_equal(vote(np.vstack([P, extra]), np.append(a, 0.0), K)[0], base)
    # one member is that member
    np.testing.assert_array_equal(vote(P[:1], a[:1], K)[0], P[0])


def test_vote_shape_error():
    with pytest.raises(ValueError):
        vote([[0, 1]], [0.5, 0.5], 2)


def test_soft_vote_weights_probabilities():
    probs = np.array([[[0.6, 0.4]], [[0.1, 0.9]]])
    pred, scores = soft_vote(probs, [1.0, 1.0])
    np.testing.assert_allclose(scores, [[0.7, 1.3]])
    assert pred[0] == 1
    # the hard vote would have tied and gone to class 0
    assert vote([[0], [1]], [1.0, 1.0], 2)[0][0] == 0


def test_soft_vote_with_one_hot_members_equals_hard(rng):
    P = rng.integers(0, 3, size=(4, 25))
    a = rng.random(4)
    E = EnsembleModel([(Fixed(p), w) for p, w in zip(P, a)], 3)
    np.testing.assert_array_equal(E.predict(None, vote_rule="soft"), E.predict(None))


def test_soft_vote_uses_logits():
    E = EnsembleModel([(Fixed([0], [[0.5, 0.0]]), 0.6), (Fixed([1], [[-5.0, 5.0]]), 0.4)], 2, vote="soft")
    assert E.predict(None)[0] == 1
    assert E.predict(None, vote_rule="hard")[0] == 0


def test_unknown_vote_rule():
    E = EnsembleModel([(Fixed([0]), 1.0)], 2)
    with pytest.raises(ValueError):
        E.predict(None, vote_rule="median")
    with pytest.raises(ValueError):
        adaboost_train(lambda *a: None, lambda h: np.zeros(2), [0, 1], 1, 2, vote="median")


def test_empty_ensemble_rejected():
    with pytest.raises(ValueError):
        EnsembleModel([], 2).predict(None)


# -- boosting loop --------------------------------------------------------------------


def test_n1_ensemble_is_its_member():
    X, y = xor_task()
    E = boost_stumps(X, y, 1)
    h = E.members[0][0]
    np.testing.assert_array_equal(E.predict(X), h.predict(X))


def test_stump_boosting_beats_best_stump():
    X, y = xor_task()
    best = np.mean(fit_stump(X, y, np.full(len(y), 1 / len(y))).predict(X) != y)
    E = boost_stumps(X, y, 10)
    assert all(r.error < 0.5 for r in E.diagnostics)
    assert prefix_errors(E, X, y)[-1] < best


def test_exponential_loss_bound_decreases():
    # the training-error bound prod_i 2 sqrt(e_i (1 - e_i)) shrinks every round and bounds the error
    X, y = xor_task()
    E = boost_stumps(X, y, 10)
    Z = np.cumprod([2 * math.sqrt(r.error * (1 - r.error)) for r in E.diagnostics])
    assert (np.diff(Z) < 0).all()
    assert all(err <= z + 1e-12 for err, z in zip(prefix_errors(E, X, y), Z))


def test_multiclass_stumps():
    g = np.random.default_rng(2)
    X = g.uniform(-1, 1, size=(300, 2))
    y = np.digitize(X[:, 0] + 0.5 * X[:, 1], [-0.4, 0.4])
    E = boost_stumps(X, y, 8, K=3)
    single = np.mean(E.members[0][0].predict(X) != y)
    assert prefix_errors(E, X, y)[-1] < single


def test_degenerate_round_is_retried():
    y = np.array([0, 1, 0, 1])
    attempts = []

    def fit(rnd, attempt, D):
        attempts.append((rnd, attempt, D.weights.copy()))
        return "bad" if attempt == 0 else "good"

    E = adaboost_train(fit, lambda h: 1 - y if h == "bad" else np.array([0, 1, 0, 0]), y, 1, 2)
    assert len(E) == 1 and E.members[0][0] == "good"
    assert [r.accepted for r in E.diagnostics] == [False, True]
    np.testing.assert_array_equal(attempts[1][2], [0.25] * 4)


def test_all_degenerate_raises():
    y = np.array([0, 1, 0, 1])
    with pytest.raises(DegenerateTrainingError) as info:
        adaboost_train(lambda *a: None, lambda h: 1 - y, y, 2, 2, max_retries=2)
    assert len(info.value.rounds) == 3


def test_perfect_learner_stops_early():
    y = np.array([0, 1, 1, 0])
    E = adaboost_train(lambda *a: None, lambda h: y, y, 5, 2)
    assert len(E) == 1
    assert E.alphas[0] == pytest.approx(model_weight(0.0))
    assert "stop" in E.diagnostics[0].note


def test_n_zero_rejected():
    with pytest.raises(ValueError):
        adaboost_train(lambda *a: None, lambda h: h, [0], 0, 2)


def test_fit_stump_finds_threshold():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    s = fit_stump(X, np.array([0, 0, 1, 1]), np.full(4, 0.25))
    assert (s.left, s.right, s.threshold) == (0, 1, 1.5)
