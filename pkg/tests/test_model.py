import numpy as np
import pytest

from vgc_lab.errors import ConfigError
from vgc_lab.model import (
    MINIMIZE,
    CoupledLP,
    DataSpec,
    Observation,
    PerturbationSpec,
    Selection,
    WeaklyCoupledVars,
    compute_snr,
    default_h,
    generate_observation,
)

TOY_MU = np.r_[np.ones(14), -np.ones(86)]


def toy_spec():
    # per-sample variance 2 averaged over 3 samples
    return DataSpec(TOY_MU, np.full(100, 3 / 2))


class TestDataSpec:
    def test_rejects_nonpositive_precision(self):
        with pytest.raises(ConfigError):
            DataSpec([0.0, 1.0], [1.0, 0.0])

    def test_rejects_length_mismatch(self):
        with pytest.raises(ConfigError):
            DataSpec([0.0, 1.0], [1.0])

    def test_rejects_covariate_rows(self):
        with pytest.raises(ConfigError):
            DataSpec([0.0, 1.0], [1.0, 1.0], np.ones((3, 1)))

    def test_is_read_only(self):
        spec = DataSpec([0.0, 1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            spec.mu[0] = 5.0


class TestGenerateObservation:
    def test_toy_sample_mode(self):
        obs = generate_observation(toy_spec(), s_samples=3, seed=1)
        assert obs.raw_samples.shape == (3, 100)
        assert np.allclose(obs.effective_nu, 1.5)
        assert np.max(np.abs(obs.raw_samples.mean(axis=0) - obs.z)) <= 1e-12

    def test_vanishing_noise(self):
        spec = DataSpec(np.linspace(-1, 1, 7), np.full(7, 1e12))
        obs = generate_observation(spec, seed=3)
        assert np.max(np.abs(obs.z - spec.mu)) < 1e-5

    @pytest.mark.parametrize("s", [None, 4])
    def test_deterministic(self, s):
        spec = DataSpec(np.arange(5.0), np.ones(5))
        a = generate_observation(spec, s, seed=42)
        b = generate_observation(spec, s, seed=42)
        assert np.array_equal(a.z, b.z)
        if s:
            assert np.array_equal(a.raw_samples, b.raw_samples)

    def test_rejects_zero_samples(self):
        with pytest.raises(ConfigError):
            generate_observation(toy_spec(), s_samples=0, seed=1)

    def test_observation_checks_means(self):
        with pytest.raises(ConfigError):
            Observation([0.0, 0.0], [1.0, 1.0], [[1.0, 0.0], [0.0, 0.0]])

    @pytest.mark.slow
    def test_sampling_distribution(self):
        # variance and cross-correlation over 1e5 replications, sample mode
        spec = DataSpec([0.5, -1.0, 2.0], [0.5, 2.0, 8.0])
        R = 100_000
        z = np.array([generate_observation(spec, 2, seed=r).z for r in range(R)])
        var = z.var(axis=0, ddof=1)
        # SE of a Gaussian sample variance is sigma^2 sqrt(2 / (R - 1))
        target = 1 / spec.nu
        assert np.all(np.abs(var - target) <= 3 * target * np.sqrt(2 / (R - 1)))
        corr = np.corrcoef(z.T)[np.triu_indices(3, 1)]
        assert np.all(np.abs(corr) <= 3 / np.sqrt(R))


class TestSnr:
    def test_zero_signal(self):
        assert compute_snr(DataSpec([2.0, 2.0, 2.0], [1.0, 3.0, 0.2])) == 0.0

    def test_two_points(self):
        assert compute_snr(DataSpec([0.0, 2.0], [1.0, 1.0])) == pytest.approx(1.0)

    def test_toy(self):
        # signal 0.4816 over noise 2/3
        assert compute_snr(toy_spec()) == pytest.approx(0.7224, abs=1e-12)

    def test_needs_two_coordinates(self):
        with pytest.raises(ConfigError):
            compute_snr(DataSpec([1.0], [1.0]))


class TestPerturbation:
    def test_sigma_identity(self):
        nu = np.array([0.3, 1.0, 7.0])
        h = 0.2
        pert = PerturbationSpec(h)
        assert np.allclose((1 + h * np.sqrt(nu)) ** 2 / nu, 1 / nu + pert.sigma(nu) ** 2, rtol=1e-14)
        assert np.allclose(pert.sigma_double(nu) ** 2, 4 * h * h + 4 * h / np.sqrt(nu))

    @pytest.mark.parametrize("bad", [dict(h=0.0), dict(h=1.0), dict(h=0.1, order=3), dict(h=0.1, draws=0)])
    def test_validation(self, bad):
        with pytest.raises(ConfigError):
            PerturbationSpec(**bad)

    def test_default_h(self):
        assert default_h(100) == pytest.approx(100 ** (-1 / 6))
        assert default_h(64, "n^-1/3") == pytest.approx(0.25)
        assert default_h(16, "n^-1/4") == pytest.approx(0.5)
        with pytest.raises(ConfigError):
            default_h(10, "n^-1/2")


class TestInstances:
    def test_sense_validated(self):
        with pytest.raises(ConfigError):
            Selection(3, "best")

    def test_coupled_infeasible(self):
        with pytest.raises(ConfigError):
            CoupledLP([[1.0, 1.0]], [-0.5])
        with pytest.raises(ConfigError):
            CoupledLP([[1.0, 0.0], [-1.0, 0.0]], [0.1, -0.6])

    def test_coupled_shapes(self):
        lp = CoupledLP([1.0, 2.0, 3.0], 0.5, MINIMIZE)
        assert (lp.m, lp.n, lp.orientation) == (1, 3, -1.0)

    def test_wcv_partition(self):
        with pytest.raises(ConfigError):
            WeaklyCoupledVars(3, [0], [[1]], ([1],), (np.eye(1),), (np.ones((1, 1), bool),))

    def test_wcv_empty_candidates(self):
        with pytest.raises(ConfigError):
            WeaklyCoupledVars(2, [0], [[0], [1]], ([1],), ([[1.0]],), ([[True], [False]],))

    def test_wcv_candidates_in_box(self):
        with pytest.raises(ConfigError):
            WeaklyCoupledVars(1, [], np.zeros((1, 0)), ([0],), ([[1.5]],), ([[True]],))

    def test_from_candidate_lists(self):
        inst = WeaklyCoupledVars.from_candidate_lists(
            3, [0], [[0], [1]], [[1, 2]], [[[(0, 0)], [(0, 0), (1, 0)]]]
        )
        assert inst.pools[0].shape == (2, 2)
        assert inst.allowed[0].tolist() == [[True, False], [True, True]]

    def test_from_candidate_lists_order(self):
        with pytest.raises(ConfigError):
            WeaklyCoupledVars.from_candidate_lists(1, [], [[], []], [[0]], [[[(0,), (1,)], [(1,), (0,)]]])
