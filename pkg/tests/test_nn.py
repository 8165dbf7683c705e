import numpy as np
import pytest

from cupid_lab import autodiff as ad
from cupid_lab import nn
from cupid_lab.rng import Rng


def spec(widths=(2, 5, 4, 3), head="regression", acts=None, dropout=()):
    acts = acts or ("sigmoid",) * (len(widths) - 2) + ("none",)
    return nn.MlpSpec(widths, acts, dropout, head)


@pytest.mark.parametrize(
    "kwargs,match",
    [
        ({"widths": (2, 3), "activations": ("none",)}, "at least 2 layers"),
        ({"widths": (2, 3, 1), "activations": ("sigmoid",)}, "one entry per layer"),
        ({"widths": (2, 3, 1), "activations": ("tanh", "none")}, "unknown activations"),
        ({"widths": (2, 3, 1), "activations": ("sigmoid", "relu")}, "must be linear"),
        ({"widths": (2, 0, 1), "activations": ("sigmoid", "none")}, "positive"),
        ({"widths": (2, 3, 1), "activations": ("sigmoid", "none"), "dropout": (0.5,)}, "dropout"),
        ({"widths": (2, 3, 1), "activations": ("sigmoid", "none"), "dropout": (1.0, 0.0)}, "dropout"),
        ({"widths": (2, 3, 1), "activations": ("sigmoid", "none"), "head": "svm"}, "head"),
        ({"widths": (2, 3, 1), "activations": ("sigmoid", "none"), "input_scale": (1.0,)}, "input_scale"),
    ],
)
def test_spec_validation(kwargs, match):
    with pytest.raises(ValueError, match=match):
        nn.MlpSpec(**kwargs)


def test_spec_dict_round_trip():
    s = spec(dropout=(0.1, 0.0, 0.0))
    assert nn.MlpSpec.from_dict(s.to_dict()) == s


def test_build_is_deterministic_and_xavier_bounded():
    a = nn.Mlp.build(spec(), 3)
    b = nn.Mlp.build(spec(), 3)
    c = nn.Mlp.build(spec(), 4)
    assert a.parameter_digest() == b.parameter_digest() != c.parameter_digest()
    w = a.params["layer1.weight"]
    assert w.shape == (2, 5)
    assert np.abs(w).max() <= np.sqrt(6 / 7)
    assert not a.params["layer1.bias"].any()
    assert a.param_count() == 2 * 5 + 5 + 5 * 4 + 4 + 4 * 3 + 3


def test_forward_matches_manual_computation():
    net = nn.Mlp.build(spec(), 0)
    x = np.array([[0.3, -1.0], [2.0, 0.5]])
    p = net.params
    sig = lambda z: 1 / (1 + np.exp(-z))
    h = sig(x @ p["layer1.weight"] + p["layer1.bias"])
    h = sig(h @ p["layer2.weight"] + p["layer2.bias"])
    want = h @ p["layer3.weight"] + p["layer3.bias"]
    np.testing.assert_allclose(net.predict(x), want, rtol=1e-13)


def test_classification_head_gives_probabilities():
    net = nn.Mlp.build(spec(head="softmax-classification"), 0)
    p = net.predict(np.random.default_rng(0).normal(size=(6, 2)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert (p > 0).all()


@pytest.mark.parametrize("layer", [1, 2])
def test_split_composes_to_full_network(layer):
    net = nn.Mlp.build(spec(), 1)
    x = np.random.default_rng(2).normal(size=(5, 2))
    split = net.split_at(layer)
    m, pre = split.prefix(x)
    assert m.shape == (5, net.spec.widths[layer]) == (5, split.width)
    np.testing.assert_allclose(split.suffix(m).data, net.predict(x), rtol=1e-14)
    np.testing.assert_allclose(1 / (1 + np.exp(-pre)), m, rtol=1e-14)
    assert split.prefix_layers + split.suffix_layers == (1, 2, 3)


@pytest.mark.parametrize("layer", [0, 3, -1])
def test_invalid_split(layer):
    with pytest.raises(ValueError):
        nn.Mlp.build(spec(), 0).split_at(layer)


def test_input_standardisation():
    s = nn.MlpSpec((1, 3, 1), ("sigmoid", "none"), input_offset=(10.0,), input_scale=(2.0,))
    net = nn.Mlp.build(s, 0)
    plain = nn.Mlp(nn.MlpSpec((1, 3, 1), ("sigmoid", "none")), net.params)
    np.testing.assert_allclose(net.predict(np.array([[14.0]])), plain.predict(np.array([[2.0]])))


def test_dropout_only_with_rng():
    net = nn.Mlp.build(spec(dropout=(0.5, 0.5, 0.0)), 0)
    x = np.ones((50, 2))
    a = net.predict(x)
    assert np.array_equal(a, net.predict(x))
    b = net.predict(x, rng=Rng(1))
    assert not np.allclose(a, b)
    assert np.array_equal(b, net.predict(x, rng=Rng(1)))


def test_zero_rate_dropout_is_a_noop_but_declared():
    net = nn.Mlp.build(spec(dropout=(0.0, 0.0, 0.0)), 0)
    x = np.ones((4, 2))
    assert net.has_dropout()
    assert np.array_equal(net.predict(x), net.predict(x, rng=Rng(5)))
    assert not nn.Mlp.build(spec(), 0).has_dropout()


def test_train_base_reduces_loss_and_leaves_input_untouched():
    r = np.random.default_rng(0)
    x = r.uniform(-2, 2, size=(200, 1))
    y = np.sin(x)
    net = nn.Mlp.build(nn.MlpSpec((1, 16, 1), ("sigmoid", "none")), 0)
    before = net.parameter_digest()
    res = nn.train_base(net, x, y, nn.TrainHyper(epochs=30, batch_size=16, lr=0.01), seed=0)
    assert net.parameter_digest() == before
    assert res.losses[-1] < 0.2 * res.losses[0]
    assert len(res.losses) == 30


def test_train_base_is_deterministic():
    x = np.linspace(0, 1, 40).reshape(-1, 1)
    y = x**2
    net = nn.Mlp.build(nn.MlpSpec((1, 4, 1), ("sigmoid", "none")), 0)
    h = nn.TrainHyper(3, 8, 1e-2)
    a = nn.train_base(net, x, y, h, 7).network.parameter_digest()
    assert a == nn.train_base(net, x, y, h, 7).network.parameter_digest()
    assert a != nn.train_base(net, x, y, h, 8).network.parameter_digest()


def test_classifier_separates_tight_blobs():
    r = np.random.default_rng(0)
    centers = np.array([[2.0, 0.0], [-2.0, 0.0], [0.0, 2.0]])
    labels = np.repeat(np.arange(3), 60)
    x = centers[labels] + r.normal(scale=0.1, size=(180, 2))
    net = nn.Mlp.build(nn.MlpSpec((2, 8, 3), ("sigmoid", "none"), head="softmax-classification"), 0)
    res = nn.train_base(net, x, labels, nn.TrainHyper(20, 16, 0.05), 0)
    assert (res.network.predict(x).argmax(axis=1) == labels).mean() > 0.99


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_training_divergence_is_reported():
    x = np.ones((8, 1))
    y = np.full((8, 1), 1e200)
    net = nn.Mlp.build(nn.MlpSpec((1, 2, 1), ("sigmoid", "none")), 0)
    with pytest.raises(nn.TrainingDiverged):
        nn.train_base(net, x, y, nn.TrainHyper(1, 8, 1e-3), 0)


def test_empty_training_set():
    net = nn.Mlp.build(nn.MlpSpec((1, 2, 1), ("sigmoid", "none")), 0)
    with pytest.raises(ValueError, match="empty"):
        nn.train_base(net, np.zeros((0, 1)), np.zeros((0, 1)), nn.TrainHyper(1, 8, 1e-3), 0)


def test_checkpoint_round_trip_is_exact(tmp_path):
    net = nn.Mlp.build(spec(dropout=(0.1, 0.1, 0.0)), 9)
    path = tmp_path / "net.json"
    nn.save_checkpoint(net, path)
    back = nn.load_checkpoint(path)
    assert back.spec == net.spec and back.seed == 9
    assert back.parameter_digest() == net.parameter_digest()
    first = path.read_bytes()
    nn.save_checkpoint(back, path)
    assert path.read_bytes() == first


def test_one_hot():
    np.testing.assert_array_equal(nn.one_hot([2, 0], 3), [[0, 0, 1], [1, 0, 0]])


def test_base_loss_gradient_matches_finite_differences():
    net = nn.Mlp.build(spec(head="softmax-classification"), 0)
    x = np.random.default_rng(3).normal(size=(4, 2))
    y = nn.one_hot([0, 2, 1, 1], 3)

    def loss(params):
        out, _ = net.run_layers(net.normalize(x), 0, net.n_layers, params)
        return nn._base_loss(net, out, y)

    tape = ad.Tape()
    leaves = tape.leaves(net.params)
    got = tape.grad(loss(leaves), leaves)
    want = ad.finite_difference(lambda p: loss(p).item(), net.params)
    for k in got:
        np.testing.assert_allclose(got[k], want[k], rtol=1e-5, atol=1e-9)
