import json
import warnings

import numpy as np
import pytest

from dbplab import rngtape
from dbplab.attacks import (AttackConfig, AttackReport, Norm, concat_reports, dw_attack, dw_semi_attack,
                            eot_gradient, fgsm, gradient_similarity, grid_coords, landscape_grid,
                            orthonormal_plane, pgd, project, run_attack, save_trajectories, semi_gradient)
from dbplab.diffusion import PurifyConfig
from dbplab.errors import ConfigError, NumericError, ShapeError
from dbplab.purify import DBPPipeline


class LinearMock:
    """Loss ``sign_row * <g, x>``; rows of copy ``j`` in a stacked batch get sign ``(-1)**j``."""

    dim, reverse_count = 4, 0

    def __init__(self, g, batch, alternate=False):
        self.g, self.batch, self.alternate = np.asarray(g, dtype=float), batch, alternate

    def _signs(self, rows):
        if not self.alternate:
            return np.ones(rows)
        return np.array([(-1.0) ** (r // self.batch) for r in range(rows)])

    def loss_grad(self, x, y, tape, fresh_seeds=None):
        s = self._signs(len(x))
        return s * (x @ self.g), s[:, None] * self.g[None, :]

    def evaluate(self, x, y, tape):
        return np.zeros(len(x), dtype=int), x @ self.g

    def victim_tape(self, seeds):
        return rngtape.record_tapes(seeds, (self.dim,), 0)


def cfg(**kw):
    base = dict(norm="linf", radius=0.1, step_size=0.025, steps=4)
    base.update(kw)
    return AttackConfig(**base)


def test_config_validation_and_roundtrip():
    c = cfg(knowledge="dw_semi-8", eot_samples=3)
    assert AttackConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    for bad in (dict(radius=0), dict(step_size=-1), dict(steps=0), dict(eot_samples=0)):
        with pytest.raises(ConfigError):
            cfg(**bad)
    with pytest.raises(ValueError):
        cfg(norm="l1")


def test_budget_warnings():
    x = np.full((1, 4), 0.5)
    with pytest.warns(UserWarning):
        pgd(x, [0], cfg(step_size=0.2), LinearMock(np.ones(4), 1))
    with pytest.warns(UserWarning):
        pgd(x, [0], cfg(steps=1), LinearMock(np.ones(4), 1))


def test_zero_gradient_leaves_input():
    x = np.full((2, 4), 0.5)
    rep = pgd(x, [0, 0], cfg(), LinearMock(np.zeros(4), 2))
    assert np.array_equal(rep.adversarial, x)


def test_one_linf_step():
    x = np.array([[0.2, 0.5, 0.99, 0.0]])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = pgd(x, [0], cfg(steps=1, step_size=0.05), LinearMock(np.ones(4), 1))
    np.testing.assert_array_equal(rep.adversarial, np.clip(x + 0.05, 0, 1))


def test_l2_projection_lands_on_sphere():
    x0 = np.full((3, 4), 0.5)
    far = x0 + np.array([[0.3, 0.3, 0.3, 0.3], [0.4, 0, 0, 0], [0.1, -0.2, 0.3, 0.0]])
    out = project(far, x0, Norm.L2, 0.2)
    np.testing.assert_allclose(np.linalg.norm(out - x0, axis=1), 0.2, atol=1e-6)


def test_projection_keeps_box_and_ball():
    rng = np.random.default_rng(0)
    x0 = rng.uniform(0, 1, (50, 8))
    for norm in Norm:
        out = project(x0 + rng.normal(size=x0.shape), x0, norm, 0.1)
        assert out.min() >= 0 and out.max() <= 1
        d = out - x0
        size = np.abs(d).max(axis=1) if norm is Norm.LINF else np.linalg.norm(d, axis=1)
        assert np.all(size <= 0.1 + 1e-12)


def test_out_of_range_input():
    with pytest.raises(ConfigError):
        pgd(np.full((1, 4), 1.5), [0], cfg(), LinearMock(np.ones(4), 1))


def test_eot_alternating_mock_averages_to_zero():
    g = eot_gradient(np.full((2, 4), 0.5), [0, 0], 4, LinearMock([1.0, -2.0, 0.5, 3.0], 2, alternate=True))
    assert np.array_equal(g, np.zeros((2, 4)))


def test_eot_n1_is_single_draw(tiny_pipeline):
    x = np.random.default_rng(0).uniform(0, 1, (3, 16))
    y = np.array([0, 1, 2])
    g = eot_gradient(x, y, 1, tiny_pipeline, seed=5, step=2)
    seeds = [rngtape.derive_seed(5, 2, 0, i) for i in range(3)]
    ref = tiny_pipeline.loss_grad(x, y, tiny_pipeline.victim_tape(seeds))[1]
    assert g.tobytes() == ref.tobytes()


def test_eot_rejects_zero():
    with pytest.raises(ConfigError):
        eot_gradient(np.zeros((1, 4)), [0], 0, LinearMock(np.ones(4), 1))


def test_dw_both_deterministic_rerun(tiny_pipeline):
    x = np.random.default_rng(1).uniform(0, 1, (3, 16))
    y = np.array([0, 1, 2])
    victim = tiny_pipeline.victim_tape([10, 11, 12])
    a = dw_attack(x, y, victim, rngtape.DW_BOTH, cfg(eot_samples=3), tiny_pipeline)
    b = dw_attack(x, y, victim, rngtape.DW_BOTH, cfg(eot_samples=1), tiny_pipeline)
    assert a.adversarial.tobytes() == b.adversarial.tobytes()
    assert a.losses.tobytes() == b.losses.tobytes()


def test_dw_attack_rejects_other_settings(tiny_pipeline):
    x, victim = np.full((1, 16), 0.5), tiny_pipeline.victim_tape([1])
    with pytest.raises(ConfigError):
        dw_attack(x, [0], victim, rngtape.WHITE_BOX, cfg(), tiny_pipeline)
    with pytest.raises(ShapeError):
        dw_attack(np.full((2, 16), 0.5), [0, 0], victim, rngtape.DW_BOTH, cfg(), tiny_pipeline)


def test_ddim_dw_fwd_equals_dw_both(tiny_schedule, tiny_nets):
    den, clf = (n.copy().requires_grad_(False) for n in tiny_nets)
    pipe = DBPPipeline(tiny_schedule, PurifyConfig.make("ddim", 6, 3), den, clf)
    x = np.random.default_rng(2).uniform(0, 1, (4, 16))
    y = np.arange(4)
    victim = pipe.victim_tape(range(4))
    fwd = dw_attack(x, y, victim, rngtape.DW_FWD, cfg(eot_samples=4), pipe)
    both = dw_attack(x, y, victim, rngtape.DW_BOTH, cfg(), pipe)
    assert fwd.adversarial.tobytes() == both.adversarial.tobytes()
    assert fwd.robust_accuracy == both.robust_accuracy


def test_semi_k1_equals_dw_both(tiny_pipeline):
    x = np.random.default_rng(3).uniform(0, 1, (3, 16))
    y = np.array([3, 1, 0])
    tapes = rngtape.sample_semi_set(1, 4, (16,), tiny_pipeline.reverse_count)
    victim = rngtape.concat_tapes([tapes[0]] * 3)
    semi = dw_semi_attack(x, y, tapes, cfg(), tiny_pipeline)
    both = dw_attack(x, y, victim, rngtape.DW_BOTH, cfg(), tiny_pipeline)
    assert semi.adversarial.tobytes() == both.adversarial.tobytes()


def test_semi_gradient_is_mean_over_set(tiny_pipeline):
    x = np.random.default_rng(4).uniform(0, 1, (2, 16))
    y = np.array([0, 1])
    tapes = rngtape.sample_semi_set(2, 9, (16,), tiny_pipeline.reverse_count)
    _, g = semi_gradient(tiny_pipeline, x, y, tapes)
    parts = [tiny_pipeline.loss_grad(x, y, t.repeat(2))[1] for t in tapes]
    np.testing.assert_allclose(g, (parts[0] + parts[1]) / 2, rtol=1e-12, atol=1e-15)


def test_semi_empty_set(tiny_pipeline):
    with pytest.raises(ConfigError):
        dw_semi_attack(np.full((1, 16), 0.5), [0], [], cfg(), tiny_pipeline)


def test_white_box_chunk_invariance(tiny_pipeline):
    x = np.random.default_rng(5).uniform(0, 1, (4, 16))
    y = np.array([0, 1, 2, 3])
    c = cfg(eot_samples=2, random_start=True, seed=3)
    victim = tiny_pipeline.victim_tape(range(4))
    whole = pgd(x, y, c, tiny_pipeline, victim)
    parts = concat_reports([pgd(x[r], y[r], c, tiny_pipeline, victim.select(r), indices=r)
                            for r in (np.arange(2), np.arange(2, 4))])
    assert whole.adversarial.tobytes() == parts.adversarial.tobytes()
    assert whole.success.tolist() == parts.success.tolist()


def test_report_roundtrip(tmp_path, tiny_pipeline):
    x = np.random.default_rng(6).uniform(0, 1, (2, 16))
    rep = run_attack(x, [0, 1], cfg(knowledge="dw_rev"), tiny_pipeline, tiny_pipeline.victim_tape([1, 2]))
    rep.save(tmp_path / "r.dbpt")
    back = AttackReport.load(tmp_path / "r.dbpt")
    assert back.adversarial.tobytes() == rep.adversarial.tobytes()
    assert back.clean_losses.tobytes() == rep.clean_losses.tobytes()
    assert len(back.trajectory) == rep.config.steps + 1 == len(back.grad_records) + 1
    assert back.config == rep.config and back.setting == rep.setting
    assert json.loads((tmp_path / "r.dbpt.json").read_text())["robust_accuracy"] == rep.robust_accuracy


def test_fgsm_is_one_full_step():
    x = np.full((1, 4), 0.5)
    rep = fgsm(x, [0], cfg(radius=0.05), LinearMock(np.array([1.0, -1.0, 0.0, 2.0]), 1))
    np.testing.assert_allclose(rep.adversarial, [[0.55, 0.45, 0.5, 0.55]])


def test_similarity_basics():
    g = np.array([1.0, 2.0, -3.0])
    assert gradient_similarity(g, g) == pytest.approx(1.0)
    assert gradient_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert gradient_similarity(np.eye(2), -np.eye(2), per_sample=True).tolist() == [-1.0, -1.0]
    with pytest.raises(NumericError):
        gradient_similarity([0.0, 0.0], [1.0, 0.0])


def test_orthonormal_plane():
    rng = np.random.default_rng(7)
    u1, u2 = orthonormal_plane(rng.normal(size=30), rng.normal(size=30))
    assert abs(u1 @ u2) < 1e-9
    assert np.linalg.norm(u1) == pytest.approx(1) and np.linalg.norm(u2) == pytest.approx(1)
    with pytest.raises(NumericError):
        orthonormal_plane(np.ones(4), 2 * np.ones(4))


def test_grid_coords_center():
    c = grid_coords(1.5, 7)
    assert c[3] == 0.0 and c[0] == -1.5 and c[-1] == 1.5


def test_landscape_center_and_endpoints(tmp_path, tiny_pipeline):
    rng = np.random.default_rng(8)
    x = rng.uniform(0.2, 0.8, (1, 16))
    tape = tiny_pipeline.victim_tape([5])
    p1, p2 = rng.normal(size=16) * 0.05, rng.normal(size=16) * 0.05
    grid = landscape_grid(x, [1], p1, p2, 0.2, 5, tiny_pipeline, tape)
    base = tiny_pipeline.losses(x, [1], tape)[0]
    assert grid.base_loss() == base
    ab, resid = grid.project([p1, p2, 0.5 * p1 + rng.normal(size=16) * 0.01])
    assert resid[0] < 1e-12 and resid[1] < 1e-12 and resid[2] > 0
    assert ab[0, 0] == pytest.approx(np.linalg.norm(p1)) and abs(ab[0, 1]) < 1e-12
    grid.to_csv(tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "a,b,loss" and len(lines) == 26
    save_trajectories(tmp_path / "t.json", grid, {"dw": [p1]})
    assert set(json.loads((tmp_path / "t.json").read_text())["dw"]) == {"a", "b", "residual"}
