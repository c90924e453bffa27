import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from vgc_lab.checks import random_path_instance, random_slope
from vgc_lab.errors import ConfigError
from vgc_lab.estimators import (
    cross_validation,
    cv_folds,
    evaluate,
    gaussian_path_increments,
    in_sample,
    oracle,
    selection_batch,
    stein_baseline,
    stein_correction,
    vgc_bound,
    vgc_closed_form,
    vgc_estimated_precision,
    vgc_fully_randomized,
    vgc_mc,
)
from vgc_lab.model import MINIMIZE, CoupledLP, DataSpec, Observation, PerturbationSpec, Selection, generate_observation
from vgc_lab.policies import LINEAR_MODEL, MIXED_EFFECTS, AffinePolicyClass
from vgc_lab.solvers import coordinate_path, solve

SAA = AffinePolicyClass()
TOY_MU = np.r_[np.ones(14), -np.ones(86)]
TOY_NU = np.full(100, 1.5)


def single(z=0.0, nu=1.0):
    return Selection(1), Observation([z], [nu])


# sigma * phi(0) / h with sigma^2 = 0.01 + 0.2
ANALYTIC_N1 = np.sqrt(0.21) * norm.pdf(0.0) / 0.1


class TestSingleCoordinate:
    def test_closed_form(self):
        inst, obs = single()
        d = vgc_closed_form(inst, SAA, obs, PerturbationSpec(0.1, 1))
        assert d.components[0] == pytest.approx(1.828183, abs=1e-6)
        assert d.components[0] == pytest.approx(ANALYTIC_N1, rel=1e-12)

    def test_monte_carlo(self):
        inst, obs = single()
        d = vgc_mc(inst, SAA, obs, PerturbationSpec(0.1, 1, 10**6), seed=4)
        assert abs(d.components[0] - ANALYTIC_N1) <= 0.01
        assert d.mc_std_err[0] < 0.005

    def test_mc_deterministic(self):
        inst, obs = single()
        pert = PerturbationSpec(0.1, 2, 100)
        assert vgc_mc(inst, SAA, obs, pert, seed=9).total == vgc_mc(inst, SAA, obs, pert, seed=9).total

    def test_estimated_precision_identity(self):
        inst, obs = single()
        pert = PerturbationSpec(0.1, 1, 1000)
        a = vgc_estimated_precision(inst, SAA, obs, pert, [1.0], seed=3, method="mc1")
        b = vgc_mc(inst, SAA, obs, pert, seed=3)
        assert np.array_equal(a.components, b.components)

    def test_estimated_precision_scaling(self):
        inst, obs = single()
        d = vgc_estimated_precision(inst, SAA, obs, PerturbationSpec(0.1, 1), [4.0])
        # sigma_hat^2 = 0.01 + 0.2 / 2, divisor h * sqrt(4)
        assert d.components[0] == pytest.approx(np.sqrt(0.11) * norm.pdf(0.0) / 0.2, rel=1e-12)

    def test_estimated_precision_rejects_nonpositive(self):
        inst, obs = single()
        with pytest.raises(ConfigError):
            vgc_estimated_precision(inst, SAA, obs, PerturbationSpec(0.1, 1), [0.0])

    def test_stein_examples(self):
        inst, obs = single(0.05)
        assert stein_correction(inst, SAA, obs, 0.1) == pytest.approx(5.0)
        inst, obs = single(1.0)
        assert stein_correction(inst, SAA, obs, 0.1) == 0.0
        assert stein_baseline(inst, SAA, obs, 0.1) == 1.0
        with pytest.raises(ConfigError):
            stein_correction(inst, SAA, obs, 0.0)


def test_in_sample_and_oracle_of_zero():
    sol = solve(Selection(3), [-1.0, -2.0, -0.5])
    assert in_sample(sol, [-1.0, -2.0, -0.5]) == 0.0
    assert oracle(sol, [1.0, 1.0, 1.0]) == 0.0


def test_toy_analytic_means():
    m, s = TOY_MU * np.sqrt(TOY_NU), np.sqrt(TOY_NU)
    ins = np.sum(TOY_MU * norm.cdf(m) + norm.pdf(m) / s)
    orc = np.sum(TOY_MU * norm.cdf(m))
    assert ins == pytest.approx(18.36, abs=0.01)
    assert orc == pytest.approx(2.97, abs=0.01)


def _quad_increment(path, sigma):
    v0 = path.value(0.0)
    pts = list(path.breakpoints)

    def f(t):
        return (path.value(t) - v0) * norm.pdf(t, scale=sigma)

    edges = [-np.inf, *pts, np.inf]
    return sum(integrate.quad(f, lo, hi, epsabs=1e-12, epsrel=1e-12, limit=200)[0] for lo, hi in zip(edges[:-1], edges[1:]))


def test_closed_form_matches_quadrature():
    rng = np.random.default_rng(8)
    for _ in range(50):
        inst = random_path_instance(rng)
        p = coordinate_path(inst, rng.normal(size=inst.n), int(rng.integers(inst.n)), random_slope(rng))
        sigma = rng.uniform(0.1, 2.0)
        assert gaussian_path_increments([p], sigma)[0] == pytest.approx(_quad_increment(p, sigma), abs=1e-6)


def test_closed_form_matches_mc():
    rng = np.random.default_rng(2)
    for i in range(30):
        inst = random_path_instance(rng)
        obs = Observation(rng.normal(size=inst.n), rng.uniform(0.3, 3.0, inst.n))
        pert = PerturbationSpec(rng.uniform(0.05, 0.5), int(rng.integers(1, 3)), 20_000)
        cf = vgc_closed_form(inst, SAA, obs, pert)
        mc = vgc_mc(inst, SAA, obs, pert, seed=i)
        assert abs(cf.total - mc.total) <= 4 * mc.total_std_err + 1e-12


def test_closed_form_mixed_effects_minimize():
    rng = np.random.default_rng(4)
    n = 12
    lp = CoupledLP(rng.uniform(0.5, 1.5, (1, n)), [0.4], MINIMIZE)
    obs = Observation(rng.normal(size=n), rng.uniform(0.5, 2, n))
    pol = AffinePolicyClass(MIXED_EFFECTS, (0.7, 0.2))
    w = np.ones((n, 1))
    pert = PerturbationSpec(0.2, 2, 20_000)
    cf = vgc_closed_form(lp, pol, obs, pert, covariates=w)
    mc = vgc_mc(lp, pol, obs, pert, seed=1, covariates=w)
    # minimization: in-sample is pessimistic about costs, the correction is negative
    assert cf.total < 0
    assert abs(cf.total - mc.total) <= 4 * mc.total_std_err


def test_fully_randomized_matches_mc():
    rng = np.random.default_rng(6)
    for i in range(10):
        inst = random_path_instance(rng, n_max=4)
        obs = Observation(rng.normal(size=inst.n), rng.uniform(0.3, 3.0, inst.n))
        pert = PerturbationSpec(0.2, 1, 40_000)
        fr = vgc_fully_randomized(inst, SAA, obs, pert, seed=i)
        mc = vgc_mc(inst, SAA, obs, pert, seed=1000 + i)
        joint = np.hypot(fr.total_std_err, mc.total_std_err)
        assert abs(fr.total - mc.total) <= 4 * joint


def test_fully_randomized_without_paths():
    lp = CoupledLP([[1.0, -0.5, 1.0]], [0.2])
    obs = Observation([0.3, -0.2, 0.1], [1.0, 2.0, 0.5])
    pert = PerturbationSpec(0.2, 1, 2000)
    fr = vgc_fully_randomized(lp, SAA, obs, pert, seed=1)
    mc = vgc_mc(lp, SAA, obs, pert, seed=2)
    assert abs(fr.total - mc.total) <= 4 * np.hypot(fr.total_std_err, mc.total_std_err)


def test_bound_holds_on_random_instances():
    rng = np.random.default_rng(12)
    for _ in range(200):
        inst = random_path_instance(rng)
        nu = rng.uniform(0.1, 0.99, inst.n)
        h = rng.uniform(0.01, 1 / np.e)
        d = vgc_closed_form(inst, SAA, Observation(rng.normal(size=inst.n), nu), PerturbationSpec(h, 1))
        assert np.all(np.abs(d.components) <= vgc_bound(nu.min(), h))


class TestLinearModel:
    pol = AffinePolicyClass(LINEAR_MODEL, (1.0, -0.5))

    def setup_method(self):
        rng = np.random.default_rng(0)
        self.w = rng.normal(size=(6, 2))
        self.spec = DataSpec(rng.normal(size=6), rng.uniform(0.5, 2, 6), self.w)
        self.obs = generate_observation(self.spec, 4, seed=1)

    def test_zero_correction_without_draws(self):
        d = vgc_mc(Selection(6), self.pol, self.obs, PerturbationSpec(0.1, 2, 10**9), covariates=self.w)
        assert np.all(d.components == 0) and np.all(d.mc_std_err == 0)

    def test_debiased_equals_in_sample(self):
        rep = evaluate(Selection(6), self.pol, self.obs, 0.3, ("in_sample", "vgc_cf2", "vgc_mc1", "stein", "cv"), folds=(2, 4), covariates=self.w)
        assert rep.debiased["vgc_cf2"] == rep.in_sample == rep.debiased["vgc_mc1"] == rep.stein

    def test_cv_equals_in_sample(self):
        for k in (2, 3, 4):
            cv = cross_validation(Selection(6), self.pol, self.obs, k, self.w)
            assert cv == pytest.approx(in_sample(solve(Selection(6), self.w @ [1.0, -0.5]), self.obs.z), abs=1e-12)


class TestCrossValidation:
    def test_fold_assignment(self):
        y = np.arange(15.0).reshape(5, 3)
        obs = Observation(y.mean(axis=0), np.ones(3), y)
        parts = cv_folds(Selection(3), SAA, obs, 2)
        assert [w for w, _, _ in parts] == [0.6, 0.4]
        assert np.allclose(parts[0][2], y[[0, 2, 4]].mean(axis=0))

    def test_leave_one_out(self):
        y = np.array([[1.0, -2.0], [-3.0, 0.5], [0.5, 0.5]])
        obs = Observation(y.mean(axis=0), np.ones(2), y)
        expect = np.mean([y[i] @ (np.delete(y, i, axis=0).mean(axis=0) > 0) for i in range(3)])
        assert cross_validation(Selection(2), SAA, obs, 3) == pytest.approx(expect)

    def test_errors(self):
        with pytest.raises(ConfigError):
            cross_validation(Selection(2), SAA, Observation([0.0, 1.0], [1.0, 1.0]), 2)
        y = np.ones((3, 2))
        obs = Observation([1.0, 1.0], [1.0, 1.0], y)
        with pytest.raises(ConfigError):
            cross_validation(Selection(2), SAA, obs, 4)
        with pytest.raises(ConfigError):
            cross_validation(Selection(2), SAA, obs, 1)


def test_evaluate_requires_truth_for_oracle():
    with pytest.raises(ConfigError):
        evaluate(Selection(1), SAA, Observation([0.0], [1.0]), 0.1, ("oracle",))
    with pytest.raises(ConfigError):
        evaluate(Selection(1), SAA, Observation([0.0], [1.0]), 0.1, ("bogus",))


def test_debias_identity():
    obs = generate_observation(DataSpec(TOY_MU, TOY_NU), 3, seed=5)
    rep = evaluate(Selection(100), SAA, obs, 0.3, ("in_sample", "vgc_cf1", "vgc_cf2", "vgc_mc2"), draws=64, seed=1)
    for name, d in rep.corrections.items():
        assert rep.debiased[name] == rep.in_sample - d.total


@pytest.mark.parametrize("sense", ["maximize", MINIMIZE])
@pytest.mark.parametrize("pol", [SAA, AffinePolicyClass(MIXED_EFFECTS, (0.8, 0.3, -0.2)), AffinePolicyClass(LINEAR_MODEL, (0.1, 0.2))])
def test_batched_selection_matches_generic(sense, pol):
    rng = np.random.default_rng(1)
    n = 20
    w = rng.normal(size=(n, 2))
    spec = DataSpec(rng.normal(size=n), rng.uniform(0.3, 2.0, n), w)
    inst = Selection(n, sense)
    names = ("in_sample", "oracle", "vgc_cf1", "vgc_cf2", "cv", "cv_oracle", "stein")
    obs = [generate_observation(spec, 4, seed=i) for i in range(8)]
    batch = selection_batch(
        inst, pol, np.stack([o.z for o in obs]), spec.nu, 0.2, names,
        samples=np.stack([o.raw_samples for o in obs]), folds=(2, 4), covariates=w, mu=spec.mu,
    )
    for i, o in enumerate(obs):
        rep = evaluate(inst, pol, o, 0.2, names, folds=(2, 4), covariates=w, mu=spec.mu)
        assert batch["in_sample"][i] == pytest.approx(rep.in_sample, abs=1e-12)
        assert batch["oracle"][i] == pytest.approx(rep.oracle, abs=1e-12)
        assert batch["stein"][i] == pytest.approx(rep.stein, abs=1e-10)
        for name in ("vgc_cf1", "vgc_cf2"):
            assert batch[name][i] == pytest.approx(rep.debiased[name], abs=1e-10)
        for k in (2, 4):
            assert batch[("cv", k)][i] == pytest.approx(rep.cv[k], abs=1e-12)
            assert batch[("cv_oracle", k)][i] == pytest.approx(rep.cv_oracle[k], abs=1e-12)


def test_batched_rejects_mc():
    with pytest.raises(ConfigError):
        selection_batch(Selection(1), SAA, [[0.0]], [1.0], 0.1, ("vgc_mc1",))


def _expected_toy_debiased(h):
    """Expected order-2 debiased value on the toy, by nested quadrature."""
    nu = 1.5
    s1 = np.sqrt(h * h + 2 * h / np.sqrt(nu))
    s2 = np.sqrt(4 * h * h + 4 * h / np.sqrt(nu))

    def inc(z, s):
        f = lambda d: (max(z + d, 0.0) - max(z, 0.0)) * norm.pdf(d, scale=s)
        return integrate.quad(f, -np.inf, -z)[0] + integrate.quad(f, -z, np.inf)[0]

    total = 0.0
    for mu, count in ((1.0, 14), (-1.0, 86)):
        dens = lambda z: norm.pdf(z, mu, 1 / np.sqrt(nu))
        corr = integrate.quad(lambda z: (4 * inc(z, s1) - inc(z, s2)) / (2 * h * np.sqrt(nu)) * dens(z), -12, 12, limit=200)[0]
        gain = integrate.quad(lambda z: max(z, 0.0) * dens(z), 0, 12)[0]
        total += count * (gain - corr)
    return total


@pytest.mark.slow
@pytest.mark.parametrize("h,expected", [(100 ** (-1 / 6), 0.863), (0.03, 2.951)])
def test_toy_debiased_mean_matches_quadrature(h, expected):
    # the simulated mean of the order-2 estimate agrees with its exact expectation
    exact = _expected_toy_debiased(h)
    assert exact == pytest.approx(expected, abs=2e-3)
    spec = DataSpec(TOY_MU, TOY_NU)
    R = 20_000
    z = np.stack([generate_observation(spec, seed=r).z for r in range(R)])
    vals = selection_batch(Selection(100), SAA, z, TOY_NU, h, ("vgc_cf2",))["vgc_cf2"]
    assert abs(vals.mean() - exact) <= 4 * vals.std(ddof=1) / np.sqrt(R)


@pytest.mark.slow
def test_estimated_precision_bias_trend():
    spec = DataSpec(TOY_MU, TOY_NU)
    R = 10_000
    z = np.stack([generate_observation(spec, seed=r).z for r in range(R)])
    truth = selection_batch(Selection(100), SAA, z, TOY_NU, 0.05, ("oracle",), mu=TOY_MU)["oracle"]
    biases = []
    for scale in (1.0, 1.5, 3.0):
        est = selection_batch(Selection(100), SAA, z, TOY_NU * scale, 0.05, ("vgc_cf2",))["vgc_cf2"]
        biases.append(abs(np.mean(est - truth)))
    assert biases[0] < biases[1] < biases[2]
