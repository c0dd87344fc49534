import math

import numpy as np
import pytest

from cilbench.cil import CilModel
from cilbench.model import Extractor, LinearHead
from cilbench.numerics import logsumexp, softmax
from cilbench.posthoc import (
    SCORER_NAMES,
    PosthocParams,
    ScorerFit,
    fit_scorer,
    odin_input_gradient,
    percentile_nearest_rank,
    score_batch,
    score_energy,
    score_gen,
    score_klm,
    score_maxlogit,
    score_msp,
    score_nnguide,
    score_odin,
    score_react,
    score_relation_simplified,
)

P = PosthocParams()


def logit_model(W, b):
    """Identity-extractor model whose logits equal W x + b."""
    head = LinearHead(np.asarray(W, float), np.asarray(b, float))
    return CilModel(Extractor(), head, list(range(head.n_classes)))


def passthrough(logits):
    """Model whose logits on the canonical basis arrangement are fixed:
    uses identity weights so x IS the logit vector."""
    C = len(logits)
    return logit_model(np.eye(C), np.zeros(C)), np.asarray(logits, float)


def test_msp_examples():
    model, x = passthrough([0.0, 0.0])
    assert score_msp(model, None, x) == pytest.approx(0.5, abs=1e-12)
    model, x = passthrough([10.0, 0.0])
    assert score_msp(model, None, x) == pytest.approx(
        math.exp(10) / (math.exp(10) + 1), abs=1e-9
    )
    model, x = passthrough([1.3, -0.4, 2.2])
    shifted_model = logit_model(np.eye(3), np.full(3, 7.0))
    assert score_msp(model, None, x) == pytest.approx(
        score_msp(shifted_model, None, x), abs=1e-12
    )


def test_maxlogit_examples():
    model, x = passthrough([3.0, -1.0])
    assert score_maxlogit(model, None, x) == 3.0
    shifted = logit_model(np.eye(2), np.full(2, 5.0))
    assert score_maxlogit(shifted, None, x) == 8.0
    gen = np.random.default_rng(0)
    for _ in range(20):
        v = gen.normal(size=4)
        model, x = passthrough(v)
        assert score_maxlogit(model, None, x) == max(v)


def test_energy_examples():
    model, x = passthrough([0.0, 0.0])
    assert score_energy(model, None, x) == pytest.approx(math.log(2), abs=1e-12)
    single = logit_model(np.array([[1.0]]), np.zeros(1))
    assert score_energy(single, None, np.array([4.2])) == pytest.approx(4.2, abs=1e-12)
    model, x = passthrough([1.0, 2.0, 3.0])
    assert score_energy(model, None, x) == pytest.approx(
        logsumexp([1.0, 2.0, 3.0], 1.0), abs=1e-12
    )


def test_gen_examples():
    # sharp distribution scores near zero (the maximum)
    model, x = passthrough([200.0, 0.0])
    assert score_gen(model, None, x) == pytest.approx(0.0, abs=1e-8)
    model, x = passthrough([0.0, 0.0])
    assert score_gen(model, None, x) == pytest.approx(
        -2.0 * 0.5**0.2, abs=1e-12
    )  # frozen: -1.7411011265922483
    # sharpening along a one-parameter family increases the score
    scores = []
    for a in np.linspace(0.0, 5.0, 11):
        model, x = passthrough([a, -a])
        scores.append(score_gen(model, None, x))
    assert all(s2 > s1 for s1, s2 in zip(scores, scores[1:]))


def test_odin_degenerate_equals_msp():
    gen = np.random.default_rng(1)
    model = logit_model(gen.normal(size=(3, 5)), gen.normal(size=3))
    params = PosthocParams(odin_epsilon=0.0, odin_temperature=1.0)
    for _ in range(50):
        x = gen.normal(size=5)
        assert score_odin(model, None, x, params) == pytest.approx(
            score_msp(model, None, x), abs=1e-12
        )


def test_odin_eps0_is_tempered_msp():
    gen = np.random.default_rng(2)
    model = logit_model(gen.normal(size=(4, 3)), gen.normal(size=4))
    params = PosthocParams(odin_epsilon=0.0, odin_temperature=1000.0)
    x = gen.normal(size=3)
    expect = softmax(model.logits(x[None, :])[0], 1000.0).max()
    assert score_odin(model, None, x, params) == pytest.approx(expect, abs=1e-15)


def test_odin_gradient_matches_finite_differences():
    gen = np.random.default_rng(3)
    for trial in range(5):
        model = logit_model(gen.normal(size=(3, 4)), gen.normal(size=3))
        X = gen.normal(size=(1, 4))
        T = 10.0
        g = odin_input_gradient(model, X, T)[0]

        def obj(x):
            p = softmax(model.logits(x[None, :])[0], T)
            return math.log(p.max())

        eps = 1e-6
        for j in range(4):
            xp, xm = X[0].copy(), X[0].copy()
            xp[j] += eps
            xm[j] -= eps
            num = (obj(xp) - obj(xm)) / (2 * eps)
            assert abs(g[j] - num) / max(abs(num), 1e-9) < 1e-6


def test_odin_gradient_through_projection():
    gen = np.random.default_rng(4)
    ext = Extractor("random_projection", d_in=6, d_out=4, seed=1)
    head = LinearHead(gen.normal(size=(3, 4)), gen.normal(size=3))
    model = CilModel(ext, head, [0, 1, 2])
    X = gen.normal(size=(1, 6))
    T = 5.0
    g = odin_input_gradient(model, X, T)[0]
    eps = 1e-6

    def obj(x):
        z = ext.extract(x[None, :])
        return math.log(softmax(head.logits(z)[0], T).max())

    for j in range(6):
        xp, xm = X[0].copy(), X[0].copy()
        xp[j] += eps
        xm[j] -= eps
        num = (obj(xp) - obj(xm)) / (2 * eps)
        assert abs(g[j] - num) / max(abs(num), 1e-9) < 1e-6


def test_react_p100_equals_energy_exactly():
    gen = np.random.default_rng(5)
    model = logit_model(gen.normal(size=(4, 6)), gen.normal(size=4))
    fit = fit_scorer("react", model, gen.normal(size=(50, 6)), PosthocParams(react_percentile=100.0))
    assert fit.react_threshold == np.inf
    for _ in range(1000):
        x = gen.normal(size=6) * 10
        assert score_react(model, fit, x) == score_energy(model, None, x)


def test_react_saturation_is_constant():
    gen = np.random.default_rng(6)
    model = logit_model(gen.normal(size=(3, 4)), gen.normal(size=3))
    fit = ScorerFit("react", react_threshold=-5.0)
    xs = gen.normal(size=(5, 4)) + 10.0  # all activations above the threshold
    vals = [score_react(model, fit, x) for x in xs]
    expect = logsumexp(model.head.logits(np.full((1, 4), -5.0))[0], 1.0)
    assert all(v == pytest.approx(expect, abs=1e-12) for v in vals)


def test_percentile_matches_sort_oracle():
    gen = np.random.default_rng(7)
    vals = gen.normal(size=1000)
    for p in (5, 37.5, 50, 90, 99, 100):
        srt = np.sort(vals)
        rank = max(1, math.ceil(p / 100 * 1000))
        assert percentile_nearest_rank(vals, p) == srt[rank - 1]


def test_klm_template_match_scores_zero():
    gen = np.random.default_rng(8)
    model = logit_model(gen.normal(size=(3, 3)), np.zeros(3))
    row = gen.normal(size=(1, 3))
    fit = fit_scorer("klm", model, row)
    assert score_klm(model, fit, row[0]) == pytest.approx(0.0, abs=1e-12)


def test_klm_uniform_template_one_hot_input():
    model, x = passthrough([1000.0, 0.0])
    fit = ScorerFit("klm", klm_templates=np.array([[0.5, 0.5]]))
    assert score_klm(model, fit, x) == pytest.approx(-math.log(2), abs=1e-12)


def test_klm_finite_for_extreme_inputs():
    gen = np.random.default_rng(9)
    model = logit_model(gen.normal(size=(4, 4)), np.zeros(4))
    fit = fit_scorer("klm", model, gen.normal(size=(30, 4)))
    x = np.array([1e4, -1e4, 0.0, 0.0])
    assert np.isfinite(score_klm(model, fit, x))


def test_nnguide_identity_and_orthogonal():
    model = logit_model(np.eye(2), np.zeros(2))
    bank_row = np.array([[2.0, 0.0]])
    fit = fit_scorer("nnguide", model, bank_row, PosthocParams(knn_k=1))
    x = np.array([3.0, 0.0])  # same direction as the bank row
    assert score_nnguide(model, fit, x, PosthocParams(knn_k=1)) == pytest.approx(
        score_energy(model, None, x), abs=1e-12
    )
    x_orth = np.array([0.0, 4.0])
    assert score_nnguide(model, fit, x_orth, PosthocParams(knn_k=1)) == pytest.approx(
        0.0, abs=1e-12
    )


def test_nnguide_matches_exhaustive_knn():
    gen = np.random.default_rng(10)
    model = logit_model(gen.normal(size=(3, 4)), gen.normal(size=3))
    bank = gen.normal(size=(5, 4))
    params = PosthocParams(knn_k=3)
    fit = fit_scorer("nnguide", model, bank, params)
    for _ in range(20):
        x = gen.normal(size=4)
        z = x / np.linalg.norm(x)
        sims = sorted(
            (b / np.linalg.norm(b)) @ z for b in model.penultimate(bank)
        )[-3:]
        expect = score_energy(model, None, x) * np.mean(sims)
        assert score_nnguide(model, fit, x, params) == pytest.approx(expect, abs=1e-12)


def test_relation_examples_and_oracle():
    model = logit_model(np.eye(2), np.zeros(2))
    # single bank row equal to x
    bank = np.array([[4.0, 0.0]])
    fit = fit_scorer("relation_simplified", model, bank, PosthocParams(knn_k=1))
    msp_of_row = score_msp(model, None, bank[0])
    x = np.array([4.0, 0.0])
    assert score_relation_simplified(
        model, fit, x, PosthocParams(knn_k=1)
    ) == pytest.approx(msp_of_row, abs=1e-12)
    # all-negative similarities give zero
    x_neg = np.array([-4.0, 0.0])
    assert score_relation_simplified(
        model, fit, x_neg, PosthocParams(knn_k=1)
    ) == pytest.approx(0.0, abs=1e-12)

    gen = np.random.default_rng(11)
    model2 = logit_model(gen.normal(size=(3, 4)), gen.normal(size=3))
    bank2 = gen.normal(size=(9, 4))
    params = PosthocParams(knn_k=5)
    fit2 = fit_scorer("relation_simplified", model2, bank2, params)
    for _ in range(10):
        x = gen.normal(size=4)
        z = x / np.linalg.norm(x)
        pairs = []
        for b in bank2:
            sim = (b / np.linalg.norm(b)) @ z
            msp_b = score_msp(model2, None, b)
            pairs.append((sim, msp_b))
        pairs.sort()
        expect = sum(max(0.0, s) * m for s, m in pairs[-5:])
        assert score_relation_simplified(model2, fit2, x, params) == pytest.approx(
            expect, abs=1e-12
        )


def test_scorers_are_deterministic():
    gen = np.random.default_rng(12)
    model = logit_model(gen.normal(size=(4, 6)), gen.normal(size=4))
    bank = gen.normal(size=(40, 6))
    X = gen.normal(size=(10, 6))
    for name in SCORER_NAMES:
        fit = fit_scorer(name, model, bank)
        s1 = score_batch(name, model, fit, X)
        s2 = score_batch(name, model, fit, X)
        np.testing.assert_array_equal(s1, s2)


def test_fit_scorer_rejects_unknown():
    model = logit_model(np.eye(2), np.zeros(2))
    with pytest.raises(ValueError):
        fit_scorer("mahalanobis", model, np.ones((2, 2)))
