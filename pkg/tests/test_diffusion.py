import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dbplab.diffusion import (PurifyConfig, Sampler, Schedule, ddim_reverse_step, ddpm_reverse_step,
                              diffusion_loss, forward_diffuse, make_linear_schedule, nfe_subsequence,
                              recover_onestep, schedule_from_betas)
from dbplab.errors import ConfigError, NumericError, ShapeError
from dbplab.nets import DenoiserNet, denoiser_forward
from dbplab.tensorgrad import Tensor, backward

from conftest import central_fd, rel_err


def fixed(abar, beta=None):
    """Two-step schedule whose t=2 entry has the requested alpha_bar (and beta)."""
    beta = [0.01, 0.5 if beta is None else beta]
    return Schedule(2, np.array(beta), np.array([0.99, abar]))


def test_single_step_schedule():
    s = schedule_from_betas([0.02])
    assert s.alpha_bar.tolist() == [0.98]


def test_linear_schedule_monotone():
    s = make_linear_schedule(100, 1e-4, 0.02)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert 0 < s.alpha_bar[-1] < 1


def test_standard_schedule_endpoint():
    s = make_linear_schedule(1000)
    # cumulative product of the standard linear betas
    ref = np.prod(1 - np.linspace(1e-4, 0.02, 1000))
    assert s.alpha_bar[-1] == pytest.approx(ref, rel=1e-12)
    assert s.alpha_bar[-1] == pytest.approx(4.04e-5, rel=0.01)


def test_default_scaling_for_small_T():
    s = make_linear_schedule(100)
    assert s.beta[0] == pytest.approx(1e-3) and s.beta[-1] == pytest.approx(0.2)


@pytest.mark.parametrize("bad", [[0.0, 0.1], [0.2, 0.1], [0.5, 1.0]])
def test_bad_betas(bad):
    with pytest.raises(ConfigError):
        schedule_from_betas(bad)


def test_schedule_json_roundtrip():
    s = make_linear_schedule(30)
    back = Schedule.from_json(s.to_json())
    assert back.T == 30 and back.beta.tobytes() == s.beta.tobytes()


def test_forward_limits():
    s = make_linear_schedule(10)
    x0, eps = np.full(4, 0.3), np.full(4, -1.0)
    assert np.array_equal(forward_diffuse(x0, 0, eps, s).data, x0)
    zero = Schedule(2, np.array([0.5, 0.9]), np.array([0.5, 0.0]))
    np.testing.assert_allclose(forward_diffuse(x0, 2, eps, zero).data, eps)


def test_forward_value():
    xt = forward_diffuse(np.ones(3), 2, np.ones(3), fixed(0.25))
    np.testing.assert_allclose(xt.data, 0.5 + np.sqrt(0.75), rtol=1e-15)
    assert xt.data[0] == pytest.approx(1.36603, abs=1e-5)


def test_forward_shape_mismatch():
    with pytest.raises(ShapeError):
        forward_diffuse(np.ones(3), 1, np.ones(4), make_linear_schedule(5))


@given(st.integers(1, 50), st.integers(0, 2 ** 32 - 1))
def test_onestep_inverts_forward(t, seed):
    s = make_linear_schedule(50)
    rng = np.random.default_rng(seed)
    x0, eps = rng.uniform(-1, 1, 8), rng.normal(size=8)
    back = recover_onestep(forward_diffuse(x0, t, eps, s), t, eps, s).data
    assert rel_err(back, x0, floor=1e-3) < 1e-12


def test_onestep_values():
    s = fixed(0.25)
    assert recover_onestep(np.full(2, 0.5 + np.sqrt(0.75)), 2, np.ones(2), s).data == pytest.approx(1.0)
    x = np.array([0.4, -2.0])
    assert np.array_equal(recover_onestep(x, 0, np.ones(2), s).data, x)


def test_onestep_guard():
    s = Schedule(1, np.array([0.999]), np.array([1e-13]))
    with pytest.raises(NumericError):
        recover_onestep(np.ones(2), 1, np.ones(2), s)


def test_ddpm_zero_prediction():
    s = make_linear_schedule(10)
    xt = np.array([0.2, -0.7])
    out = ddpm_reverse_step(xt, 5, np.zeros(2), np.zeros(2), s).data
    np.testing.assert_allclose(out, xt / np.sqrt(1 - s.beta_at(5)), rtol=1e-15)


def test_ddpm_value():
    out = ddpm_reverse_step(np.ones(3), 2, np.ones(3), np.zeros(3), fixed(0.5, beta=0.02)).data
    expect = (1 - 0.02 / np.sqrt(0.5)) / np.sqrt(0.98)
    np.testing.assert_allclose(out, expect, rtol=1e-14)
    assert out[0] == pytest.approx(0.981581, abs=1e-6)


def test_ddpm_skipped_step_uses_effective_beta():
    s = make_linear_schedule(20)
    xt, ep, e = np.full(2, 0.3), np.full(2, 0.1), np.full(2, -0.4)
    beta = 1 - s.abar(10) / s.abar(5)
    expect = (xt - ep * beta / np.sqrt(1 - s.abar(10))) / np.sqrt(1 - beta) + np.sqrt(beta) * e
    np.testing.assert_allclose(ddpm_reverse_step(xt, 10, ep, e, s, t_prev=5).data, expect, rtol=1e-14)


def test_ddpm_landing_on_zero_needs_no_noise():
    s = make_linear_schedule(10)
    out = ddpm_reverse_step(np.ones(2), 1, np.zeros(2), None, s).data
    np.testing.assert_allclose(out, 1 / np.sqrt(1 - s.beta_at(1)))
    with pytest.raises(ConfigError):
        ddpm_reverse_step(np.ones(2), 3, np.zeros(2), None, s)


def test_ddim_to_zero_equals_onestep():
    s = make_linear_schedule(10)
    xt, ep = np.array([0.5, -0.1]), np.array([0.3, 0.9])
    assert np.array_equal(ddim_reverse_step(xt, 6, 0, ep, s).data, recover_onestep(xt, 6, ep, s).data)


def test_ddim_value():
    s = Schedule(2, np.array([0.5, 0.5]), np.array([0.5, 0.25]))
    out = ddim_reverse_step(np.full(2, 0.5 + np.sqrt(0.75)), 2, 1, np.ones(2), s).data
    np.testing.assert_allclose(out, np.sqrt(0.5) + np.sqrt(0.5), rtol=1e-12)


def test_nfe_subsequence_values():
    assert nfe_subsequence(100, 5) == [100, 80, 60, 40, 20, 0]
    assert nfe_subsequence(10, 2) == [10, 5, 0]
    assert nfe_subsequence(7, 7) == list(range(7, -1, -1))
    with pytest.raises(ConfigError):
        nfe_subsequence(5, 6)


@given(st.integers(1, 200), st.data())
def test_nfe_subsequence_shape(t_star, data):
    nfe = data.draw(st.integers(1, t_star))
    seq = nfe_subsequence(t_star, nfe)
    assert seq[0] == t_star and seq[-1] == 0 and len(seq) == nfe + 1
    assert all(a > b for a, b in zip(seq, seq[1:]))


def test_purify_config_defaults():
    cfg = PurifyConfig.default(make_linear_schedule(100))
    assert cfg.t_star == 10 and cfg.nfe == 10 and cfg.stochastic_steps == 9
    ddim = PurifyConfig.make(Sampler.DDIM, 10, 5)
    assert ddim.stochastic_steps == 0 and ddim.step_list == (10, 8, 6, 4, 2, 0)
    with pytest.raises(ConfigError):
        PurifyConfig(Sampler.DDPM, 5, (5, 5, 0))


def test_loss_of_exact_and_offset_model():
    s = make_linear_schedule(10)
    x0, eps = np.random.default_rng(0).normal(size=(2, 3)), np.random.default_rng(1).normal(size=(2, 3))
    assert diffusion_loss(lambda xt, t: Tensor(eps), x0, 4, eps, s).item() == 0.0
    assert diffusion_loss(lambda xt, t: Tensor(eps + 1), x0, 4, eps, s).item() == pytest.approx(6.0)


@pytest.mark.parametrize("seed", range(3))
def test_loss_parameter_gradient_matches_fd(seed):
    s = make_linear_schedule(20)
    rng = np.random.default_rng(seed)
    net = DenoiserNet(6, 20, hidden=5, depth=2, time_dim=4, seed=seed)
    x0, eps, t = rng.uniform(-1, 1, (3, 6)), rng.normal(size=(3, 6)), np.array([2, 9, 17])
    w = net.params["w_in"]
    backward(diffusion_loss(lambda xt, tt: denoiser_forward(net, xt, tt), x0, t, eps, s))
    grad = w.grad.copy()

    def f(wv):
        old = w.data.copy()
        w.data[...] = wv
        val = diffusion_loss(lambda xt, tt: denoiser_forward(net, xt, tt), x0, t, eps, s).item()
        w.data[...] = old
        return val

    coords = rng.choice(w.size, 8, replace=False)
    assert rel_err(grad.ravel()[coords], central_fd(f, w.data.copy(), coords)) < 1e-3
