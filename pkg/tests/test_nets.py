import numpy as np
import pytest

from dbplab.errors import ConfigError, FormatError, ShapeError
from dbplab.nets import (Adam, ClassifierNet, DenoiserNet, classifier_forward, cross_entropy, denoiser_forward,
                         load_weights, save_weights)
from dbplab.tensorgrad import Tensor, backward, tsum

from conftest import central_fd, rel_err


@pytest.mark.parametrize("hidden,depth", [(4, 1), (8, 2), (6, 3)])
def test_denoiser_shape_and_zero(hidden, depth):
    net = DenoiserNet(5, 10, hidden=hidden, depth=depth, time_dim=4)
    x = np.random.default_rng(0).normal(size=(3, 5))
    assert denoiser_forward(net, x, np.array([1, 5, 10])).shape == (3, 5)
    assert np.array_equal(denoiser_forward(net.zero_(), x, 3).data, np.zeros((3, 5)))


def test_denoiser_rejects_bad_input():
    net = DenoiserNet(5, 10, hidden=4)
    with pytest.raises(ShapeError):
        denoiser_forward(net, np.ones((2, 4)), 1)
    with pytest.raises(ConfigError):
        denoiser_forward(net, np.ones((2, 5)), 11)
    with pytest.raises(ConfigError):
        DenoiserNet(5, 10, activation="gelu")


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_denoiser_input_gradient_matches_fd(activation):
    rng = np.random.default_rng(5)
    net = DenoiserNet(6, 10, hidden=7, depth=2, time_dim=4, seed=2, activation=activation).requires_grad_(False)
    x0, w = rng.normal(size=(2, 6)), rng.normal(size=(2, 6))

    def f(x):
        return float(np.sum(denoiser_forward(net, x, 4).data * w))

    xt = Tensor(x0, requires_grad=True)
    backward(tsum(denoiser_forward(net, xt, 4) * Tensor(w)))
    coords = rng.choice(12, 8, replace=False)
    assert rel_err(xt.grad.ravel()[coords], central_fd(f, x0, coords)) < 1e-3


def test_zero_classifier_gives_log_k():
    net = ClassifierNet(6, 4, hidden=5).zero_()
    logits = classifier_forward(net, np.ones((2, 6)))
    assert np.array_equal(logits.data, np.zeros((2, 4)))
    np.testing.assert_allclose(cross_entropy(logits, [0, 3]).data, np.log(4))


def test_swapping_output_rows_swaps_logits():
    net = ClassifierNet(6, 3, hidden=5, seed=1)
    x = np.random.default_rng(0).normal(size=(2, 6))
    before = classifier_forward(net, x).data
    w, b = net.params["w_out"].data, net.params["b_out"].data
    w[:, [0, 2]] = w[:, [2, 0]]
    b[[0, 2]] = b[[2, 0]]
    after = classifier_forward(net, x).data
    np.testing.assert_array_equal(after[:, [2, 1, 0]], before)


def test_adam_descends_quadratic():
    p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        backward(tsum(p * p))
        opt.step()
    assert np.all(np.abs(p.data) < 0.05)


@pytest.mark.parametrize("factory", [lambda: DenoiserNet(5, 10, hidden=4, seed=9),
                                     lambda: ClassifierNet(5, 3, hidden=4, seed=9)])
def test_save_load_save_identical(tmp_path, factory):
    net = factory()
    save_weights(net, tmp_path / "a.dbpt")
    back = load_weights(tmp_path / "a.dbpt")
    save_weights(back, tmp_path / "b.dbpt")
    assert (tmp_path / "a.dbpt").read_bytes() == (tmp_path / "b.dbpt").read_bytes()
    assert (tmp_path / "a.dbpt.json").read_text() == (tmp_path / "b.dbpt.json").read_text()


def test_truncated_weights(tmp_path):
    save_weights(ClassifierNet(5, 3, hidden=4), tmp_path / "w.dbpt")
    raw = (tmp_path / "w.dbpt").read_bytes()
    (tmp_path / "w.dbpt").write_bytes(raw[:-9])
    with pytest.raises(FormatError):
        load_weights(tmp_path / "w.dbpt")


def test_downcast_needs_flag(tmp_path):
    net = DenoiserNet(5, 10, hidden=4, seed=1)
    save_weights(net, tmp_path / "w.dbpt")
    with pytest.raises(FormatError):
        load_weights(tmp_path / "w.dbpt", dtype=np.float32)
    small = load_weights(tmp_path / "w.dbpt", dtype=np.float32, allow_downcast=True)
    assert small.dtype == np.float32
    np.testing.assert_allclose(small.params["w_in"].data, net.params["w_in"].data, rtol=1e-6)


def test_upcast_refused(tmp_path):
    save_weights(ClassifierNet(5, 3, hidden=4, dtype=np.float32), tmp_path / "w.dbpt")
    with pytest.raises(FormatError):
        load_weights(tmp_path / "w.dbpt", dtype=np.float64)


def test_copy_is_independent():
    net = ClassifierNet(5, 3, hidden=4)
    twin = net.copy()
    twin.params["w0"].data[...] = 0
    assert np.any(net.params["w0"].data != 0)
