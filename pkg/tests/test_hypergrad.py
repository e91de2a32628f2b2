import numpy as np
import pytest

from ibau import tensor_core as tc
from ibau.hypergrad import (
    HvpOperator,
    LinSolveConfig,
    contraction_rate,
    cross_vp,
    fd_step,
    hvp_delta,
    implicit_hypergrad,
    solve_linear,
    inner_error_curve,
)
from ibau.objectives import NetObjective, QuadraticBilevel


def rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def test_oracle_validation():
    with pytest.raises(ValueError):
        QuadraticBilevel(np.array([[1.0, 2.0], [0.0, 1.0]]), np.eye(2), np.zeros(2))
    with pytest.raises(ValueError):
        QuadraticBilevel(-np.eye(2), np.eye(2), np.zeros(2))


def test_oracle_closed_forms(rng):
    o = QuadraticBilevel.random(4, 3, rng)
    theta = rng.standard_normal(3)
    obj = o.at(theta)
    star = o.inner_argmax(theta)
    assert obj.value(star) == pytest.approx(o.psi(theta), rel=1e-12)
    np.testing.assert_allclose(obj.evaluate(star).delta_grad, 0, atol=1e-12)
    num = np.array([(o.psi(theta + 1e-6 * e) - o.psi(theta - 1e-6 * e)) / 2e-6 for e in np.eye(3)])
    np.testing.assert_allclose(o.grad_psi(theta), num, rtol=1e-6)


def test_hvp_examples(rng):
    o = QuadraticBilevel(2 * np.eye(2), np.eye(2), np.zeros(2))
    obj = o.at(np.zeros(2))
    np.testing.assert_array_equal(hvp_delta(obj, np.zeros(2), [1.0, 0.0], analytic=True), [-2.0, 0.0])
    np.testing.assert_array_equal(hvp_delta(obj, np.zeros(2), [0.0, 0.0]), [0.0, 0.0])
    o = QuadraticBilevel.random(6, 4, rng)
    obj = o.at(rng.standard_normal(4))
    delta, v = rng.standard_normal(6), rng.standard_normal(6)
    assert rel(hvp_delta(obj, delta, v), -o.A @ v) <= 1e-6
    assert rel(cross_vp(obj, delta, v)[0], o.B.T @ v) <= 1e-6
    np.testing.assert_array_equal(cross_vp(obj, delta, v, analytic=True)[0], o.B.T @ v)
    np.testing.assert_array_equal(cross_vp(obj, delta, np.zeros(6))[0], np.zeros(4))
    with pytest.raises(ValueError):
        hvp_delta(obj, delta, np.ones(3))


def test_cross_zero_without_coupling(rng):
    o = QuadraticBilevel.random(5, 3, rng, coupled=False)
    obj = o.at(rng.standard_normal(3))
    np.testing.assert_array_equal(cross_vp(obj, rng.standard_normal(5), rng.standard_normal(5))[0], np.zeros(3))


def test_fd_step_rule():
    assert fd_step(np.array([0.0, -3.0])) == pytest.approx(4e-4)


def test_hvp_linear_and_symmetric_on_network(poisoned_small):
    params, clean, _, _ = poisoned_small
    obj = NetObjective(params, clean.x[:40], clean.y[:40])
    r = tc.make_rng(5)
    delta = r.normal(0, 0.1, 16)
    u, w = r.standard_normal(16), r.standard_normal(16)
    hu, hw = hvp_delta(obj, delta, u), hvp_delta(obj, delta, w)
    combo = hvp_delta(obj, delta, 2.0 * u - 0.5 * w)
    assert rel(combo, 2.0 * hu - 0.5 * hw) <= 1e-5
    assert abs(u @ hw - w @ hu) <= 1e-5 * max(abs(u @ hw), abs(w @ hu))


def test_solve_linear_examples(rng):
    rhs = rng.standard_normal(5)
    v, res, div, used = solve_linear(lambda x: x, rhs, LinSolveConfig(rounds=1))
    np.testing.assert_allclose(v, rhs, rtol=1e-15)
    assert used == 1 and not div
    v, res, div, used = solve_linear(lambda x: x, np.zeros(5), LinSolveConfig())
    assert not v.any() and res == 0.0 and used == 0
    q = rng.standard_normal((8, 8))
    M = q @ q.T + np.eye(8)
    v, res, div, _ = solve_linear(lambda x: M @ x, rhs[:1].repeat(8), LinSolveConfig(rounds=8, tol=0.0))
    assert res <= 1e-10 and not div


def test_fixed_point_converges_and_diverges(rng):
    M = np.diag([1.0, 2.0, 3.0])
    rhs = rng.standard_normal(3)
    v, res, div, used = solve_linear(lambda x: M @ x, rhs, LinSolveConfig("fixed_point", 200, 0.3, tol=0.0))
    np.testing.assert_allclose(v, rhs / np.diag(M), rtol=1e-10)
    assert used == 200 and not div
    _, _, div, used = solve_linear(lambda x: M @ x, rhs, LinSolveConfig("fixed_point", 50, 2.0))
    assert div and used < 50


def test_cg_flags_indefinite_operator():
    M = np.diag([1.0, -5.0])
    _, _, div, _ = solve_linear(lambda x: M @ x, np.array([1.0, 1.0]), LinSolveConfig())
    assert div


def test_linsolve_config_validation():
    with pytest.raises(ValueError):
        LinSolveConfig(method="gmres")
    with pytest.raises(ValueError):
        LinSolveConfig(rounds=0)
    with pytest.raises(ValueError):
        LinSolveConfig(fp_step=0)


@pytest.mark.parametrize("analytic,tol", [(True, 1e-8), (False, 1e-4)])
def test_linear_coupling_is_exact_anywhere(analytic, tol, rng):
    o = QuadraticBilevel.linear_coupling(6)
    for _ in range(5):
        theta = rng.standard_normal(6)
        delta = 3.0 * rng.standard_normal(6)
        rep = implicit_hypergrad(o.at(theta), delta, LinSolveConfig(), analytic)
        assert rel(rep.hypergrad[0], theta) <= tol
        assert not rep.fallback_used


def test_stationary_delta_has_no_indirect_term(rng):
    o = QuadraticBilevel.random(5, 3, rng)
    theta = rng.standard_normal(3)
    rep = implicit_hypergrad(o.at(theta), o.inner_argmax(theta), LinSolveConfig(), analytic=True)
    assert rep.indirect_norm <= 1e-12 * max(rep.direct_norm, 1.0)


def test_coupling_free_oracle_returns_direct(rng):
    o = QuadraticBilevel.random(5, 3, rng, coupled=False)
    obj = o.at(rng.standard_normal(3))
    rep = implicit_hypergrad(obj, rng.standard_normal(5), LinSolveConfig())
    np.testing.assert_array_equal(rep.hypergrad[0], rep.direct[0])


@pytest.mark.parametrize("d", [4, 8, 16])
def test_general_oracle_matches_closed_form(d, rng):
    o = QuadraticBilevel.random(d, 5, rng)
    theta = rng.standard_normal(5)
    delta = rng.standard_normal(d)
    rep = implicit_hypergrad(o.at(theta), delta, LinSolveConfig(rounds=d, tol=0.0))
    assert rel(rep.hypergrad[0], o.hypergrad_closed_form(delta, theta)) <= 1e-4
    assert rep.linear_residual_norm <= 1e-10


def test_fallback_zeroes_indirect_term():
    class Convex:
        """``H = +1/2 |delta|^2 + delta . theta``, so M = -I is indefinite."""

        dim = 2
        has_analytic = True

        def evaluate(self, delta, want_delta=True, want_theta=True):
            from ibau.model import LossGrads

            th = np.array([1.0, 2.0])
            return LossGrads(float(0.5 * delta @ delta + delta @ th), delta + th, [delta.copy()])

        def analytic_hvp(self, delta, v):
            return np.asarray(v, dtype=float)

        def analytic_cross(self, delta, v):
            return [np.asarray(v, dtype=float)]

    rep = implicit_hypergrad(Convex(), np.array([0.5, 0.5]), LinSolveConfig(), analytic=True)
    assert rep.diverged and rep.fallback_used and rep.indirect_norm == 0.0
    np.testing.assert_array_equal(rep.hypergrad[0], rep.direct[0])
    rep = implicit_hypergrad(Convex(), np.array([0.5, 0.5]),
                             LinSolveConfig(fallback_on_divergence=False), analytic=True)
    assert rep.diverged and not rep.fallback_used


def test_contraction_rate_examples():
    assert contraction_rate(1, 3) == (0.5, 0.5)
    assert contraction_rate(2, 2)[1] == 0.0
    assert contraction_rate(1, 9)[1] == pytest.approx(0.8, rel=1e-15)
    for bad in [(0, 1), (2, 1)]:
        with pytest.raises(ValueError):
            contraction_rate(*bad)


def test_error_curve_shape(rng):
    o = QuadraticBilevel.random(8, 4, rng, cond=5.0)
    theta = rng.standard_normal(4)
    ts = [0, 1, 3, 5, 10, 50]
    curve = dict(inner_error_curve(o, theta, ts, LinSolveConfig(rounds=2)))
    assert curve[50] < curve[0]
    errs = [curve[t] for t in ts if t >= 3]
    assert all(b <= a for a, b in zip(errs, errs[1:]))
    assert curve[50] <= 1e-6


def test_error_curve_zero_without_coupling(rng):
    o = QuadraticBilevel.random(6, 3, rng, coupled=False)
    curve = inner_error_curve(o, rng.standard_normal(3), [0, 1, 5], LinSolveConfig(), analytic=True)
    assert all(e <= 1e-12 for _, e in curve)


def test_operator_bookkeeping(rng):
    o = QuadraticBilevel.random(3, 2, rng)
    op = HvpOperator(o.at(np.zeros(2)), np.array([0.0, 2.0, 0.0]))
    assert "eps=0.0003" in op.step_rule
    op(np.ones(3))
    assert op.calls == 1
