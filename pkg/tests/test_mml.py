"""Marginal-likelihood machinery: quadrature, loglik oracles, fitting, SEs."""

import json
import math

import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss
from scipy.integrate import dblquad, quad
from scipy.optimize import minimize
from scipy.special import ndtr
from scipy.stats import multivariate_normal

from irtmiss import mml
from irtmiss.distributions import RandomStream, std_normal_cdf
from irtmiss.model import MISSING, DataError, Dataset, ItemParams, NumericalError
from irtmiss.simulate import SimDesign, draw_truth, gen_dataset


def _sim_fixture(rho, gamma, n, j, seed):
    design = SimDesign(rho=rho, gamma=gamma, n_persons=n, n_items=j, seed=seed)
    rng = RandomStream(seed, 0)
    truth = draw_truth(design, rng)
    return truth, gen_dataset(truth, rng)


def _gamma_of(truth):
    s = truth.structural
    return (s.gamma0, s.gamma1, s.gamma2)


GAM_MID = (-1.1, 0.04, -0.2)
GAM_MILD = (-2.2, 0.02, -0.2)


class TestBuildGrid:
    def test_weights_normalized(self):
        for k, sigma in [(5, (0.0, 1.0)), (10, (0.8, 1.3)), (21, (-0.5, 2.0))]:
            g = mml.build_grid(k, sigma)
            assert abs(g.weights.sum() - 1.0) <= 1e-12

    def test_shape_and_positivity(self):
        g = mml.build_grid(7, (0.4, 1.0))
        assert g.nodes.shape == (49, 2)
        assert g.weights.shape == (49,)
        assert np.all(g.weights > 0)

    @pytest.mark.parametrize("s_tt", [-0.6, 0.0, 0.4, 0.8])
    def test_cross_moment_matches_covariance(self, s_tt):
        g = mml.build_grid(10, (s_tt, 1.0))
        assert abs((g.weights * g.theta * g.tau).sum() - s_tt) <= 1e-10

    def test_theta_second_moment_fixed_at_one(self):
        g = mml.build_grid(10, (0.8, 1.0))
        assert abs((g.weights * g.theta**2).sum() - 1.0) <= 1e-10

    def test_tau_second_moment(self):
        g = mml.build_grid(10, (0.5, 1.7))
        assert abs((g.weights * g.tau**2).sum() - 1.7) <= 1e-10

    def test_exact_for_total_degree_up_to_2k_minus_1(self):
        # Stein's identity gives the bivariate normal moment recursion
        # E[x^p y^q] = (p-1) Sxx E[x^(p-2) y^q] + q Sxy E[x^(p-1) y^(q-1)].
        s_tt, s_t2 = 0.6, 1.4
        memo = {(0, 0): 1.0}

        def moment(p, q):
            if p < 0 or q < 0:
                return 0.0
            if (p, q) in memo:
                return memo[(p, q)]
            if p > 0:
                val = (p - 1) * moment(p - 2, q) + q * s_tt * moment(p - 1, q - 1)
            else:
                val = (q - 1) * s_t2 * moment(p, q - 2)
            memo[(p, q)] = val
            return val

        g = mml.build_grid(5, (s_tt, s_t2))
        for p in range(10):
            for q in range(10 - p):
                got = float((g.weights * g.theta**p * g.tau**q).sum())
                want = moment(p, q)
                assert abs(got - want) <= 1e-12 * max(1.0, abs(want)), (p, q)

    @pytest.mark.parametrize("sigma", [(1.2, 1.0), (0.0, 0.0), (0.5, -1.0), (1.0, 1.0)])
    def test_rejects_non_positive_definite(self, sigma):
        with pytest.raises(ValueError, match="positive definite"):
            mml.build_grid(10, sigma)

    def test_rejects_too_few_points(self):
        with pytest.raises(ValueError, match="at least 5"):
            mml.build_grid(4, (0.0, 1.0))


class TestMarginalLoglik:
    def test_single_item_matches_direct_quadrature(self):
        a, b = 1.3, 0.4
        resp = np.array([[0], [1], [1], [0], [1], [0]], dtype=np.int8)
        data = Dataset.from_responses(resp)
        items = ItemParams(np.array([a]), np.array([b]), np.array([0.0]))
        grid = mml.build_grid(61, (0.0, 1.0))
        got = mml.marginal_loglik(items, data, None, grid)

        def lik(y):
            f = lambda t: ndtr(a * (t - b)) ** y * (1 - ndtr(a * (t - b))) ** (1 - y) * (
                math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
            )
            return quad(f, -9, 9, epsabs=1e-13, epsrel=1e-13)[0]

        want = sum(math.log(lik(int(y))) for y in resp[:, 0])
        assert abs(got - want) <= 1e-9

    def test_complete_data_matches_adaptive_2d_integration(self):
        # with gamma active every observed cell carries a (1 - pi) factor,
        # so the oracle must integrate over (theta, tau) jointly
        items = ItemParams(np.array([1.1, 0.8]), np.array([-0.3, 0.5]), np.array([0.2, -0.4]))
        resp = np.array([[1, 0], [0, 1], [1, 1]], dtype=np.int8)
        data = Dataset.from_responses(resp)
        gam, sig = GAM_MID, (0.4, 1.0)
        grid = mml.build_grid(31, sig)
        got = mml.marginal_loglik(items, data, gam, grid)

        mvn = multivariate_normal(mean=[0, 0], cov=[[1.0, 0.4], [0.4, 1.0]])

        def person(i):
            def f(tau, theta):
                val = 1.0
                for j in range(2):
                    p = ndtr(items.a[j] * (theta - items.b[j]))
                    y = resp[i, j]
                    idx = gam[0] - tau + items.zeta[j] + gam[2] * y
                    val *= (p if y == 1 else 1 - p) * ndtr(-idx)
                return val * mvn.pdf([theta, tau])

            return dblquad(f, -9, 9, -9, 9, epsabs=1e-12, epsrel=1e-12)[0]

        want = sum(math.log(person(i)) for i in range(3))
        assert abs(got - want) <= 1e-8

    def test_missing_cell_matches_monte_carlo(self):
        items = ItemParams(np.array([1.1, 0.8]), np.array([-0.3, 0.5]), np.array([0.2, -0.4]))
        resp = np.array([[1, MISSING], [0, 1]], dtype=np.int8)
        data = Dataset.from_responses(resp)
        gam, sig = GAM_MID, (0.4, 1.0)
        got = mml.marginal_loglik(items, data, gam, mml.build_grid(31, sig))

        rng = np.random.default_rng(777)
        draws = 10**6
        theta = rng.standard_normal(draws)
        tau = 0.4 * theta + math.sqrt(1 - 0.16) * rng.standard_normal(draws)
        cum = np.asarray(data.cum_missing)
        miss = np.asarray(data.missing_indicator)
        want, var = 0.0, 0.0
        for i in range(2):
            lik = np.ones(draws)
            for j in range(2):
                p = std_normal_cdf(items.a[j] * (theta - items.b[j]))
                idx0 = gam[0] - tau + items.zeta[j] + gam[1] * cum[i, j]
                if miss[i, j]:
                    lik = lik * (
                        p * std_normal_cdf(idx0 + gam[2])
                        + (1 - p) * std_normal_cdf(idx0)
                    )
                else:
                    y = resp[i, j]
                    lik = lik * (p if y == 1 else 1 - p) * std_normal_cdf(
                        -(idx0 + gam[2] * y)
                    )
            m = lik.mean()
            want += math.log(m)
            var += (lik.std(ddof=1) / math.sqrt(draws) / m) ** 2
        assert abs(got - want) <= 3.0 * math.sqrt(var)

    def test_missing_cells_drop_out_without_gamma(self):
        # disabling the missingness terms reduces each person to the
        # likelihood of their observed cells only
        a = np.array([1.2, 0.8])
        b = np.array([-0.4, 0.6])
        items = ItemParams(a, b, np.zeros(2))
        resp = np.array([[1, 0], [0, MISSING], [MISSING, 1]], dtype=np.int8)
        data = Dataset.from_responses(resp)
        got = mml.marginal_loglik(items, data, None, mml.build_grid(61, (0.0, 1.0)))

        def cell(j, y):
            return lambda t: ndtr(a[j] * (t - b[j])) ** y * (
                1 - ndtr(a[j] * (t - b[j]))
            ) ** (1 - y)

        def person(factors):
            f = lambda t: math.prod(g(t) for g in factors) * math.exp(
                -0.5 * t * t
            ) / math.sqrt(2 * math.pi)
            return math.log(quad(f, -9, 9, epsabs=1e-13, epsrel=1e-13)[0])

        want = (
            person([cell(0, 1), cell(1, 0)])
            + person([cell(0, 0)])
            + person([cell(1, 1)])
        )
        assert abs(got - want) <= 1e-9

    def test_weight_scaling_shifts_loglik_by_n_log_k(self):
        truth, data = _sim_fixture(0.4, GAM_MID, 25, 4, 17)
        grid = mml.build_grid(15, (0.4, 1.0))
        base = mml.marginal_loglik(truth.items, data, _gamma_of(truth), grid)
        scaled = mml.QuadratureGrid(
            grid.nodes, grid.weights * math.exp(2.0), grid.n_points, grid.sigma
        )
        shifted = mml.marginal_loglik(truth.items, data, _gamma_of(truth), scaled)
        assert abs(shifted - (base + 2.0 * data.n_persons)) <= 1e-9

    def test_person_order_invariance_exact(self):
        truth, data = _sim_fixture(0.8, GAM_MID, 40, 5, 23)
        grid = mml.build_grid(15, (0.8, 1.0))
        base = mml.marginal_loglik(truth.items, data, _gamma_of(truth), grid)
        perm = np.random.default_rng(3).permutation(40)
        shuffled = Dataset.from_responses(np.asarray(data.responses)[perm])
        assert mml.marginal_loglik(truth.items, shuffled, _gamma_of(truth), grid) == base

    def test_item_relabel_invariance(self):
        # the cumulative-prior-missing regressor depends on presentation
        # order, so joint relabeling is an invariance only when gamma1 = 0
        truth, data = _sim_fixture(0.4, GAM_MID, 40, 5, 29)
        gam = (GAM_MID[0], 0.0, GAM_MID[2])
        grid = mml.build_grid(15, (0.4, 1.0))
        base = mml.marginal_loglik(truth.items, data, gam, grid)
        perm = np.array([3, 0, 4, 1, 2])
        relabeled = Dataset.from_responses(np.asarray(data.responses)[:, perm])
        items_p = ItemParams(truth.items.a[perm], truth.items.b[perm], truth.items.zeta[perm])
        assert abs(mml.marginal_loglik(items_p, relabeled, gam, grid) - base) <= 1e-9

    @pytest.mark.parametrize("seed", [21, 0])
    def test_quadrature_converges_at_desk_scale(self, seed):
        # refinement error grows with test length because the integrand
        # concentrates; at J=2 the 15-point rule is already this accurate
        truth, data = _sim_fixture(0.4, GAM_MILD, 40, 2, seed)
        gam = _gamma_of(truth)
        l15 = mml.marginal_loglik(truth.items, data, gam, mml.build_grid(15, (0.4, 1.0)))
        l31 = mml.marginal_loglik(truth.items, data, gam, mml.build_grid(31, (0.4, 1.0)))
        assert abs(l15 - l31) / data.n_persons <= 1e-6

    def test_refinement_error_shrinks_with_order(self):
        truth, data = _sim_fixture(0.8, GAM_MID, 50, 6, 9)
        gam = _gamma_of(truth)
        lls = {
            k: mml.marginal_loglik(truth.items, data, gam, mml.build_grid(k, (0.8, 1.0)))
            for k in (15, 31, 61)
        }
        assert abs(lls[31] - lls[61]) < abs(lls[15] - lls[31])

    def test_matches_adaptive_integration_on_concentrated_integrand(self):
        # anchor for the rule itself: one person, eight items, strong
        # selection; adaptive 2-D integration agrees at high order
        truth, data = _sim_fixture(0.8, GAM_MID, 50, 8, 9)
        gam = _gamma_of(truth)
        i = 0
        resp = np.asarray(data.responses)
        miss = np.asarray(data.missing_indicator)
        cum = np.asarray(data.cum_missing)
        one = Dataset(resp[i : i + 1], miss[i : i + 1])
        got = mml.marginal_loglik(truth.items, one, gam, mml.build_grid(101, (0.8, 1.0)))

        mvn = multivariate_normal(mean=[0, 0], cov=[[1.0, 0.8], [0.8, 1.0]])

        def f(tau, theta):
            val = 1.0
            for j in range(8):
                p = ndtr(truth.items.a[j] * (theta - truth.items.b[j]))
                idx0 = gam[0] - tau + truth.items.zeta[j] + gam[1] * cum[i, j]
                if miss[i, j]:
                    val *= p * ndtr(idx0 + gam[2]) + (1 - p) * ndtr(idx0)
                else:
                    y = resp[i, j]
                    val *= (p if y == 1 else 1 - p) * ndtr(-(idx0 + gam[2] * y))
            return val * mvn.pdf([theta, tau])

        want = math.log(dblquad(f, -9, 9, -9, 9, epsabs=1e-13, epsrel=1e-13)[0])
        assert abs(got - want) <= 1e-9


def _fd_gradient(fun, x, rel_step=1e-5):
    g = np.zeros_like(x)
    for k in range(x.size):
        h = rel_step * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        g[k] = (fun(xp) - fun(xm)) / (2.0 * h)
    return g


@pytest.fixture(scope="module")
def mid_fit():
    truth, data = _sim_fixture(0.8, GAM_MID, 300, 6, 5)
    est = mml.fit_mml(data, _gamma_of(truth), (0.8, 1.0))
    return truth, data, est


class TestFitMml:

    def test_recovers_truth_roughly(self, mid_fit):
        truth, _, est = mid_fit
        assert est.converged
        assert np.max(np.abs(est.a_hat - truth.items.a)) <= 0.55
        assert np.max(np.abs(est.b_hat - truth.items.b)) <= 0.35
        assert np.max(np.abs(est.zeta_hat - truth.items.zeta)) <= 0.45

    def test_all_discriminations_positive(self, mid_fit):
        _, _, est = mid_fit
        assert np.all(est.a_hat > 0)

    def test_std_errors_positive_when_converged(self, mid_fit):
        _, _, est = mid_fit
        assert est.std_errors.shape == (6, 3)
        assert np.all(est.std_errors > 0)

    def test_loglik_at_estimate_dominates_truth(self, mid_fit):
        truth, data, est = mid_fit
        grid = mml.build_grid(21, (0.8, 1.0))
        ll_est = mml.marginal_loglik(est.items, data, _gamma_of(truth), grid)
        ll_true = mml.marginal_loglik(truth.items, data, _gamma_of(truth), grid)
        assert ll_est >= ll_true - 1e-8
        assert est.loglik == pytest.approx(ll_est, abs=1e-9)

    def test_gradient_norm_at_optimum(self):
        truth, data = _sim_fixture(0.4, GAM_MID, 150, 3, 8)
        gam = _gamma_of(truth)
        est = mml.fit_mml(data, gam, (0.4, 1.0))
        assert est.converged
        grid = mml.build_grid(21, (0.4, 1.0))

        def ll_of(vec):
            items = ItemParams(vec[:3].copy(), vec[3:6].copy(), vec[6:].copy())
            return mml.marginal_loglik(items, data, gam, grid)

        x = np.concatenate([est.a_hat, est.b_hat, est.zeta_hat])
        assert np.linalg.norm(_fd_gradient(ll_of, x)) <= 10.0 * 1e-8

    def test_fit_invariant_to_person_order(self):
        truth, data = _sim_fixture(0.4, GAM_MID, 80, 3, 12)
        gam = _gamma_of(truth)
        cfg = mml.MmlConfig(n_points=11)
        est = mml.fit_mml(data, gam, (0.4, 1.0), cfg)
        perm = np.random.default_rng(5).permutation(80)
        shuffled = Dataset.from_responses(np.asarray(data.responses)[perm])
        est2 = mml.fit_mml(shuffled, gam, (0.4, 1.0), cfg)
        assert np.array_equal(est.a_hat, est2.a_hat)
        assert np.array_equal(est.b_hat, est2.b_hat)
        assert np.array_equal(est.zeta_hat, est2.zeta_hat)

    def test_matches_independent_em_on_complete_data(self):
        a_true = np.array([1.2, 0.7, 1.4, 0.9, 1.1])
        b_true = np.array([-0.8, 0.2, 0.5, -0.2, 1.0])
        rng = np.random.default_rng(404)
        theta = rng.standard_normal(200)
        p = std_normal_cdf(a_true[None, :] * (theta[:, None] - b_true[None, :]))
        y = (rng.random((200, 5)) < p).astype(np.int8)
        data = Dataset.from_responses(y)
        est = mml.fit_mml(data, None, (0.0, 1.0))
        a_em, b_em = _em_2pno(y)
        assert np.max(np.abs(est.a_hat - a_em)) <= 0.05
        assert np.max(np.abs(est.b_hat - b_em)) <= 0.05

    def test_zeta_inert_without_gamma(self):
        _, data = _sim_fixture(0.0, (-30.0, 0.01, -0.01), 100, 4, 2)
        assert data.missing_indicator.sum() == 0
        est = mml.fit_mml(data, None, (0.0, 1.0))
        assert np.all(est.zeta_hat == 0.0)
        assert np.all(np.isnan(est.std_errors[:, 2]))
        assert np.all(est.std_errors[:, :2] > 0)

    def test_nonconvergence_flagged_not_fatal(self):
        truth, data = _sim_fixture(0.8, GAM_MID, 200, 4, 5)
        est = mml.fit_mml(
            data, _gamma_of(truth), (0.8, 1.0), mml.MmlConfig(n_points=11, max_iter=1)
        )
        assert not est.converged
        assert est.n_iterations == 1
        assert np.all(np.isfinite(est.a_hat))

    def test_degenerate_item_rejected(self):
        _, data = _sim_fixture(0.0, (-30.0, 0.01, -0.01), 50, 3, 4)
        resp = np.asarray(data.responses).copy()
        resp[:, 1] = 1
        with pytest.raises(DataError, match="fewer than 2 distinct"):
            mml.fit_mml(Dataset.from_responses(resp), None, (0.0, 1.0))

    def test_fully_missing_item_rejected(self):
        truth, data = _sim_fixture(0.4, GAM_MID, 50, 3, 4)
        resp = np.asarray(data.responses).copy()
        resp[:, 0] = MISSING
        with pytest.raises(DataError, match="fewer than 2 distinct"):
            mml.fit_mml(Dataset.from_responses(resp), _gamma_of(truth), (0.4, 1.0))

    def test_estimate_requires_positive_a(self):
        with pytest.raises(ValueError, match="positive"):
            mml.MmlEstimate(
                a_hat=np.array([1.0, 0.0]),
                b_hat=np.zeros(2),
                zeta_hat=np.zeros(2),
                loglik=-1.0,
                std_errors=np.ones((2, 3)),
                converged=True,
                n_iterations=3,
            )

    @pytest.mark.parametrize(
        "kwargs", [{"n_points": 4}, {"tol": 0.0}, {"tol": -1.0}, {"max_iter": 0}]
    )
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            mml.MmlConfig(**kwargs).validate()


def _em_2pno(y, n_nodes=21, max_cycles=500, tol=1e-9):
    """Bock-Aitkin EM for the plain two-parameter model; M-step by BFGS."""
    nodes, w = hermegauss(n_nodes)
    w = w / w.sum()
    a = np.ones(y.shape[1])
    b = np.zeros(y.shape[1])
    prev = -np.inf
    for _ in range(max_cycles):
        p = np.clip(ndtr(a[None, :] * (nodes[:, None] - b[None, :])), 1e-10, 1 - 1e-10)
        ll_pn = y @ np.log(p).T + (1 - y) @ np.log1p(-p).T
        joint = ll_pn + np.log(w)[None, :]
        top = joint.max(axis=1, keepdims=True)
        post = np.exp(joint - top)
        norm = post.sum(axis=1, keepdims=True)
        post /= norm
        ll = float((top[:, 0] + np.log(norm[:, 0])).sum())
        r_tj = post.T @ y
        n_t = post.sum(axis=0)
        for j in range(y.shape[1]):
            rj = r_tj[:, j]

            def neg(x):
                pj = np.clip(ndtr(x[0] * (nodes - x[1])), 1e-10, 1 - 1e-10)
                return -float(rj @ np.log(pj) + (n_t - rj) @ np.log1p(-pj))

            res = minimize(neg, [a[j], b[j]], method="BFGS", options={"gtol": 1e-8})
            a[j], b[j] = res.x
        if abs(ll - prev) < tol:
            break
        prev = ll
    return a, b


class TestAsymptoticSe:
    def test_se_shrinks_like_root_n(self):
        a_true = np.array([1.2, 0.9, 1.1, 0.8])
        b_true = np.array([-0.5, 0.3, 0.0, 0.8])
        z_true = np.array([0.2, -0.3, 0.0, 0.4])
        gam, sig = GAM_MID, (0.4, 1.0)

        def gen(n, seed):
            rng = np.random.default_rng(seed)
            theta = rng.standard_normal(n)
            tau = 0.4 * theta + math.sqrt(1 - 0.16) * rng.standard_normal(n)
            p = std_normal_cdf(a_true[None, :] * (theta[:, None] - b_true[None, :]))
            y = (rng.random((n, 4)) < p).astype(np.int8)
            r = np.zeros((n, 4), dtype=bool)
            cum = np.zeros(n)
            for j in range(4):
                eta = gam[0] - tau + z_true[j] + gam[1] * cum + gam[2] * y[:, j]
                r[:, j] = rng.random(n) < std_normal_cdf(eta)
                cum += r[:, j]
            return Dataset.from_responses(np.where(r, MISSING, y).astype(np.int8))

        cfg = mml.MmlConfig(n_points=15)
        e500 = mml.fit_mml(gen(500, 11), gam, sig, cfg)
        e2000 = mml.fit_mml(gen(2000, 12), gam, sig, cfg)
        ratio = e500.std_errors / e2000.std_errors
        assert 1.6 <= float(np.median(ratio)) <= 2.4
        assert np.all(ratio > 1.2)

    def test_information_matrix_symmetric(self):
        # the shared finite-difference Hessian drives both the polish and
        # the information matrix; check it against an analytic Hessian
        def f(x):
            return -(2.0 * x[0] ** 2 + 1.5 * x[1] ** 2 + x[2] ** 2) - 0.7 * x[0] * x[1] + 0.3 * x[1] * x[2]

        h = mml._fd_hessian(f, np.array([0.4, -0.2, 1.1]))
        want = np.array([[-4.0, -0.7, 0.0], [-0.7, -3.0, 0.3], [0.0, 0.3, -2.0]])
        assert np.max(np.abs(h - h.T)) <= 1e-6 * np.max(np.abs(h))
        assert np.max(np.abs(h - want)) <= 1e-5

    def test_se_matches_standalone_call(self, mid_fit):
        truth, data, est = mid_fit
        grid = mml.build_grid(21, (0.8, 1.0))
        se = mml.asymptotic_se(est, data, _gamma_of(truth), grid)
        assert np.allclose(se, est.std_errors, rtol=1e-10, atol=0)

    def test_singular_information_reported(self):
        # a fully missing column with missingness terms disabled carries no
        # information at all, so its block is exactly zero; it sits first so
        # the report cannot come from an unrelated off-optimum item
        rng = np.random.default_rng(8)
        resp = (rng.random((40, 3)) < 0.6).astype(np.int8)
        resp[:, 0] = MISSING
        data = Dataset.from_responses(resp)
        est = mml.MmlEstimate(
            a_hat=np.ones(3),
            b_hat=np.zeros(3),
            zeta_hat=np.zeros(3),
            loglik=-1.0,
            std_errors=np.full((3, 3), np.nan),
            converged=True,
            n_iterations=1,
        )
        with pytest.raises(NumericalError, match="item 1 is singular"):
            mml.asymptotic_se(est, data, None, mml.build_grid(11, (0.0, 1.0)))


class TestExports:
    def test_estimates_csv_shape(self, mid_fit, tmp_path):
        _, _, est = mid_fit
        path = tmp_path / "estimates.csv"
        mml.write_estimates_csv(path, est)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "item,a_hat,se_a,b_hat,se_b,zeta_hat,se_zeta"
        assert len(lines) == 7
        for j, line in enumerate(lines[1:]):
            cells = line.split(",")
            assert cells[0] == str(j + 1)
            vals = [float(c) for c in cells[1:]]
            assert all(np.isfinite(vals))
            assert vals[0] == est.a_hat[j]
            assert vals[1] == est.std_errors[j, 0]

    def test_fit_manifest_round_trip(self, mid_fit, tmp_path):
        _, _, est = mid_fit
        cfg = mml.MmlConfig()
        path = tmp_path / "manifest.json"
        mml.write_fit_manifest(path, est, cfg)
        payload = json.loads(path.read_text())
        assert set(payload) == {"K", "tol", "iterations", "loglik", "converged"}
        assert payload["K"] == 21
        assert payload["tol"] == cfg.tol
        assert payload["iterations"] == est.n_iterations
        assert payload["loglik"] == est.loglik
        assert payload["converged"] is True
