import numpy as np
import pytest

from cupid_lab import cupid as cp
from cupid_lab import nn
from cupid_lab import uncertainty as un
from cupid_lab.losses import LossWeights
from cupid_lab.rng import Rng


def trained_toy(layer=1, k=1, head="regression", seed=0):
    r = np.random.default_rng(seed)
    x = r.uniform(-2, 2, size=(80, 2))
    spec = nn.MlpSpec((2, 8, 6, k), ("sigmoid", "sigmoid", "none"), head=head)
    net = nn.Mlp.build(spec, seed)
    y = r.integers(0, k, size=80) if head != "regression" else np.sin(x[:, :1])
    split = net.split_at(layer)
    mod = cp.train_cupid(split, cp.build_for(split, 1, seed), x, y, nn.TrainHyper(3, 10, 1e-2),
                         LossWeights(), seed).module
    return split, mod, x, y


def test_estimate_definitions_regression():
    split, mod, x, y = trained_toy()
    recs = un.estimate(split, mod, x, y)
    pred = cp.perturbed_predict(split, mod, x)
    assert [r.input_id for r in recs] == list(range(80))
    np.testing.assert_allclose(un.column(recs, "u_epis"), np.abs(pred.y_hat - pred.y_hat_prime).sum(1))
    np.testing.assert_allclose(un.column(recs, "u_alea"), np.exp(pred.s).sum(1))
    np.testing.assert_allclose(un.column(recs, "error"), np.abs(y[:, 0] - pred.y_hat[:, 0]))
    assert (un.column(recs, "u_epis") >= 0).all() and (un.column(recs, "u_alea") > 0).all()


def test_estimate_classification_uses_probabilities_and_flags():
    split, mod, x, y = trained_toy(k=3, head="softmax-classification")
    recs = un.estimate(split, mod, x, y, ids=np.arange(80) + 100)
    assert recs[0].input_id == 100
    np.testing.assert_allclose([r.y_hat.sum() for r in recs], 1.0)
    np.testing.assert_allclose([r.y_hat_prime.sum() for r in recs], 1.0)
    errs = un.column(recs, "error")
    assert set(np.unique(errs)) <= {0.0, 1.0}
    pred = np.array([r.y_hat.argmax() for r in recs])
    np.testing.assert_array_equal(errs, (pred != y).astype(float))
    # L1 distance between two probability vectors is at most 2
    assert un.column(recs, "u_epis").max() <= 2.0


def test_estimate_without_targets():
    split, mod, x, _ = trained_toy()
    recs = un.estimate(split, mod, x[:3])
    assert all(r.error is None and r.y_true is None for r in recs)


def test_suffix_jacobian_matches_finite_differences():
    split, _, x, _ = trained_toy(k=2, head="softmax-classification")
    m, _ = split.prefix(x[:3])
    jac = un.suffix_jacobian(split, m)
    eps = 1e-6
    for i in range(m.shape[1]):
        d = np.zeros_like(m)
        d[:, i] = eps
        fd = (split.suffix(m + d).data - split.suffix(m - d).data) / (2 * eps)
        np.testing.assert_allclose(jac[:, :, i], fd, rtol=1e-6, atol=1e-10)


def test_taylor_error_shrinks_with_alpha():
    split, mod, x, _ = trained_toy(layer=1)
    big = un.taylor_check(split, mod, x, 1e-1)
    small = un.taylor_check(split, mod, x, 1e-4)
    assert np.median(small.rel_err) < np.median(big.rel_err)
    # second-order remainder: relative error scales roughly linearly with alpha
    assert np.median(small.rel_err) < 1e-2


def test_taylor_exact_when_suffix_is_linear():
    split, mod, x, _ = trained_toy(layer=2)
    tc = un.taylor_check(split, mod, x, 0.5)
    np.testing.assert_allclose(tc.exact, tc.linear, rtol=1e-8, atol=1e-15)


def test_taylor_alpha_range():
    split, mod, x, _ = trained_toy()
    with pytest.raises(ValueError):
        un.taylor_check(split, mod, x, 1.5)


def dropout_net(rate, w2=2.0):
    spec = nn.MlpSpec((1, 1, 1), ("none", "none"), (rate, 0.0))
    params = {"layer1.weight": np.array([[1.0]]), "layer1.bias": np.array([0.0]),
              "layer2.weight": np.array([[w2]]), "layer2.bias": np.array([0.5])}
    return nn.Mlp(spec, params)


def test_mc_dropout_replays_the_documented_stream():
    rate, passes = 0.3, 6
    net = dropout_net(rate)
    x = np.array([[1.0], [2.0], [-1.0]])
    got = un.mc_dropout_estimate(net, x, passes=passes, seed=4)
    rng = Rng(4).child("mc-dropout")
    draws = []
    for _ in range(passes):
        keep = rng.uniform((3, 1)) >= rate
        draws.append(2.0 * x * keep / (1 - rate) + 0.5)
    want = np.stack(draws).var(axis=0, ddof=1).mean(axis=1)
    np.testing.assert_allclose(got, want, rtol=1e-15)


def test_mc_dropout_expected_variance():
    # one Bernoulli unit: each pass is either c/(1-p) or 0 (plus bias), so the
    # unbiased sample variance has expectation p(1-p) * (c/(1-p))^2 = p c^2 / (1-p)
    rate = 0.2
    x = np.ones((4000, 1))
    v = un.mc_dropout_estimate(dropout_net(rate), x, passes=10, seed=0)
    want = rate * 4.0 / (1 - rate)
    assert v.mean() == pytest.approx(want, rel=0.05)


def test_mc_dropout_zero_rate_gives_zero():
    v = un.mc_dropout_estimate(dropout_net(0.0), np.ones((5, 1)), passes=3)
    assert not v.any()


def test_mc_dropout_preconditions():
    with pytest.raises(ValueError, match="passes"):
        un.mc_dropout_estimate(dropout_net(0.1), np.ones((2, 1)), passes=1)
    net = nn.Mlp.build(nn.MlpSpec((1, 2, 1), ("sigmoid", "none")), 0)
    with pytest.raises(ValueError, match="dropout"):
        un.mc_dropout_estimate(net, np.ones((2, 1)))


def test_records_csv_round_trip():
    split, mod, x, y = trained_toy(k=3, head="softmax-classification")
    recs = un.estimate(split, mod, x[:5], y[:5])
    recs[1].label = 1
    text = un.records_csv(recs)
    header = text.splitlines()[0].split(",")
    assert header[:4] == ["input_id", "u_alea", "u_epis", "error"]
    back = un.read_records_csv(text)
    assert [r.label for r in back] == [None, 1, None, None, None]
    for a, b in zip(recs, back):
        assert (a.input_id, a.u_alea, a.u_epis, a.error) == (b.input_id, b.u_alea, b.u_epis, b.error)
        np.testing.assert_array_equal(a.y_hat, b.y_hat)
        np.testing.assert_array_equal(a.y_hat_prime, b.y_hat_prime)
