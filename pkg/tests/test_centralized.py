import dataclasses
import itertools
import math

import numpy as np
import pytest
from scipy import optimize, stats

from hybrid_se.centralized import (PhaseBelief, am_estimate, cvi_run, cvi_update_s,
                                   cvi_update_theta, elbo, log_joint, stack_model,
                                   uniform_phase_prior, wls_estimate)
from hybrid_se.network import bundled_case
from hybrid_se.scada import RectPrior
from hybrid_se.truncnorm import TruncatedGaussian

from helpers import BOUND, make_instance, three_bus_case, two_bus_case


@pytest.fixture(scope="module")
def inst2():
    return make_instance(two_bus_case(), 3)


@pytest.fixture(scope="module")
def inst14():
    return make_instance(bundled_case("ieee14"), 5)


def _dense(model):
    return model.H, model.G, np.diag(1 / model.r_var)


def test_wls_no_pmu_returns_prior():
    case = two_bus_case(pmus=())
    model = stack_model(case, {}, {})
    prior = RectPrior(np.array([1.0, 0.0, 0.9, -0.1]), np.diag([1e-2, 2e-2, 3e-2, 4e-2]))
    mu, P = wls_estimate(model, prior)
    np.testing.assert_allclose(mu, prior.s_hat)
    np.testing.assert_allclose(P, prior.gamma)


def test_wls_uninformative_prior_inverts_H(inst2):
    m = inst2.model
    assert m.H.shape == (4, 4)
    flat = RectPrior(np.zeros(4), 1e12 * np.eye(4))
    mu, _ = wls_estimate(m, flat)
    np.testing.assert_allclose(mu, np.linalg.solve(m.H, m.z), atol=1e-8)


def test_wls_normal_equations(inst2):
    m, prior = inst2.model, inst2.prior
    omega = {1: 0.03}
    A = m.H + 0.03 * m.G
    Gi = np.linalg.inv(prior.gamma)
    Ri = np.diag(1 / m.r_var)
    N = Gi + A.T @ Ri @ A
    expect = np.linalg.solve(N, Gi @ prior.s_hat + A.T @ Ri @ m.z)
    mu, P = wls_estimate(m, prior, omega)
    np.testing.assert_allclose(mu, expect, rtol=1e-10)
    np.testing.assert_allclose(P, np.linalg.inv(N), rtol=1e-7)


def test_theta_update_without_G_keeps_prior(inst2):
    m = dataclasses.replace(inst2.model, G=np.zeros_like(inst2.model.G))
    pt = {1: TruncatedGaussian(-BOUND, BOUND, 0.01, 4e-3)}
    out = cvi_update_theta(m, pt, inst2.prior.s_hat, inst2.prior.gamma)
    assert out[1].v == pytest.approx(0.01) and out[1].C == pytest.approx(4e-3)


def test_theta_update_huge_noise_keeps_prior(inst2):
    m = dataclasses.replace(inst2.model, sigma={1: 1e8},
                            r_var=np.full(inst2.model.z.size, 1e16))
    pt = {1: TruncatedGaussian(-BOUND, BOUND, 0.02, 1e-3)}
    out = cvi_update_theta(m, pt, inst2.prior.s_hat, inst2.prior.gamma)
    assert out[1].v == pytest.approx(0.02, abs=1e-9)
    assert out[1].C == pytest.approx(1e-3, rel=1e-9)


def test_theta_update_matches_grid_fit(inst2):
    m, prior = inst2.model, inst2.prior
    mu, P = prior.s_hat, prior.gamma
    out = cvi_update_theta(m, inst2.prior_theta, mu, P)[1]
    grid = np.linspace(-0.2, 0.2, 41)
    vals = []
    for t in grid:
        A = m.H + t * m.G
        r = m.z - A @ mu
        vals.append(-0.5 * (r @ r + np.trace(A @ P @ A.T)) / m.sigma[1] ** 2)
    a, b, _ = np.polyfit(grid, vals, 2)
    assert out.C == pytest.approx(-1 / (2 * a), rel=1e-8)
    assert out.v == pytest.approx(-b / (2 * a), rel=1e-8)


def _phase(v_mean, v_second):
    d = TruncatedGaussian(-1.0, 1.0)
    return {i: PhaseBelief(d, v_mean[i], v_second[i]) for i in v_mean}


def test_s_update_reductions(inst14):
    m, prior = inst14.model, inst14.prior
    zero = {i: 0.0 for i in m.pmu_buses}
    mu, P = cvi_update_s(m, prior, _phase(zero, zero))
    mu0, P0 = wls_estimate(m, prior)
    np.testing.assert_allclose(mu, mu0, atol=1e-12)
    np.testing.assert_allclose(P, P0, atol=1e-14)
    om = {i: 0.01 * k for k, i in enumerate(m.pmu_buses)}
    mu, P = cvi_update_s(m, prior, _phase(om, {i: v * v for i, v in om.items()}))
    mu1, _ = wls_estimate(m, prior, om)
    np.testing.assert_allclose(mu, mu1, atol=1e-12)


def test_s_update_matches_expected_objective_optimum(inst2):
    # E_theta over a two-point law with the same first two moments, then BFGS
    m, prior = inst2.model, inst2.prior
    w, tau = 0.02, 0.02**2 + 1e-3
    phase = _phase({1: w}, {1: tau})
    mu, P = cvi_update_s(m, prior, phase)
    sd = math.sqrt(tau - w * w)
    Gi = np.linalg.inv(prior.gamma)

    def negobj(s):
        d = s - prior.s_hat
        val = 0.5 * d @ Gi @ d
        for t in (w - sd, w + sd):
            r = m.z - (m.H + t * m.G) @ s
            val += 0.25 * np.sum(r * r / m.r_var)
        return val

    h = 1e-4
    eye = np.eye(4) * h
    grad = np.array([(negobj(mu + e) - negobj(mu - e)) / (2 * h) for e in eye])
    hess = np.empty((4, 4))
    for a, b in itertools.product(range(4), repeat=2):
        ea, eb = eye[a], eye[b]
        hess[a, b] = (negobj(mu + ea + eb) - negobj(mu + ea - eb)
                      - negobj(mu - ea + eb) + negobj(mu - ea - eb)) / (4 * h * h)
    # the objective is quadratic, so one Newton step from mu lands on its optimum
    step = np.linalg.solve(hess, grad)
    assert np.max(np.abs(step)) < 1e-9
    info = np.linalg.inv(P)
    assert np.linalg.norm(hess - info) < 1e-6 * np.linalg.norm(info)


def test_collapsed_prior_gives_wls_after_one_iteration():
    inst = make_instance(bundled_case("ieee14"), 9, zero_theta=True, prior_bound=0.0)
    post = cvi_run(inst.model, inst.prior, inst.prior_theta)
    mu0, _ = wls_estimate(inst.model, inst.prior)
    np.testing.assert_allclose(post.trace[1]["mu"], mu0, atol=1e-8)
    am = am_estimate(inst.model, inst.prior, inst.prior_theta)
    np.testing.assert_allclose(am.s_hat, mu0, atol=1e-8)


def test_cvi_invariants_and_monotone_elbo(inst14):
    post = cvi_run(inst14.model, inst14.prior, inst14.prior_theta, max_iter=100)
    assert post.converged
    e = [x for r in post.trace[1:] for x in (r["elbo_theta"], r["elbo"])]
    assert np.all(np.diff([post.trace[0]["elbo"]] + e) >= -1e-10)
    np.testing.assert_allclose(post.P, post.P.T, atol=1e-15)
    assert np.linalg.eigvalsh(post.P).min() > 0
    for b in post.phase.values():
        assert -BOUND < b.mean < BOUND
        assert b.second - b.mean**2 > 0
    lam, om = np.diag(post.lam(inst14.model)), np.diag(post.omega(inst14.model))
    assert np.all(lam >= om**2)


def test_cvi_improves_on_oblivious_wls(inst14):
    truth = inst14.state.s
    post = cvi_run(inst14.model, inst14.prior, inst14.prior_theta, max_iter=200)
    obl, _ = wls_estimate(inst14.model, inst14.prior)
    assert np.sum((post.mu - truth) ** 2) < np.sum((obl - truth) ** 2)


def test_elbo_without_data_is_negative_kl():
    case = two_bus_case(pmus=())
    model = stack_model(case, {}, {})
    prior = RectPrior(np.array([1.0, 0.0, 0.9, -0.1]), np.diag([1e-2, 2e-2, 3e-2, 4e-2]))
    assert elbo(model, prior, {}, prior.s_hat, prior.gamma, {}) == pytest.approx(0.0, abs=1e-12)
    mu = prior.s_hat + 0.05
    P = 0.5 * prior.gamma
    d = mu - prior.s_hat
    Gi = np.linalg.inv(prior.gamma)
    kl = 0.5 * (np.trace(Gi @ P) + d @ Gi @ d - 4
                + np.linalg.slogdet(prior.gamma)[1] - np.linalg.slogdet(P)[1])
    assert elbo(model, prior, {}, mu, P, {}) == pytest.approx(-kl, rel=1e-12)


def test_elbo_monte_carlo(inst2):
    m, prior, pt = inst2.model, inst2.prior, inst2.prior_theta
    post = cvi_run(m, prior, pt, max_iter=3)
    q_th = post.phase[1].dist
    rng = np.random.default_rng(0)
    n = 10**6
    s = rng.multivariate_normal(post.mu, post.P, size=n)
    th = q_th.sample(rng, n)
    r = m.z[None] - s @ m.H.T - th[:, None] * (s @ m.G.T)
    loglik = (-0.5 * np.sum(r * r / m.r_var, 1)
              - 0.5 * np.sum(np.log(2 * np.pi * m.r_var)))
    lp_s = stats.multivariate_normal(prior.s_hat, prior.gamma).logpdf(s)
    lq_s = stats.multivariate_normal(post.mu, post.P).logpdf(s)
    lp_th = -math.log(2 * BOUND)
    lq_th = q_th.logpdf(th)
    x = loglik + lp_s - lq_s + lp_th - lq_th
    est, se = x.mean(), x.std(ddof=1) / math.sqrt(n)
    val = elbo(m, prior, pt, post.mu, post.P, post.phase)
    assert abs(est - val) < 3 * se


def test_am_monotone_and_dense_optimum(inst2):
    m, prior, pt = inst2.model, inst2.prior, inst2.prior_theta
    res = am_estimate(m, prior, pt, max_iter=500, tol=1e-13)
    objs = [res.trace[0]["objective"]]
    for r in res.trace[1:]:
        objs += [r["objective_theta"], r["objective"]]
    assert np.all(np.diff(objs) >= -1e-9)

    def neg(x):
        return -log_joint(m, prior, pt, x[:4], {1: x[4]})

    x0 = np.append(prior.s_hat, 0.0)
    bounds = [(None, None)] * 4 + [(-BOUND, BOUND)]
    opt = optimize.minimize(neg, x0, method="L-BFGS-B", bounds=bounds,
                            options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 10_000})
    assert -opt.fun <= objs[-1] + 1e-6
    np.testing.assert_allclose(res.s_hat, opt.x[:4], atol=1e-5)
    assert res.theta_hat[1] == pytest.approx(opt.x[4], abs=1e-4)


def test_uniform_phase_prior_zero_bound_is_point():
    pt = uniform_phase_prior((3, 5), 0.0)
    assert pt[3].is_point and pt[5].mean() == 0.0


def test_stack_model_bookkeeping():
    case = three_bus_case(pmus=(1, 3))
    pmu = {1: np.arange(4.0), 3: np.arange(4.0) + 10}
    m = stack_model(case, pmu, {1: 0.1, 3: 0.2})
    assert m.H.shape == (8, 6)
    np.testing.assert_array_equal(m.local(3)[0], pmu[3])
    np.testing.assert_allclose(m.r_var, [0.01] * 4 + [0.04] * 4)
    with pytest.raises(ValueError):
        stack_model(case, {1: np.zeros(3), 3: pmu[3]}, {1: 0.1, 3: 0.2})
