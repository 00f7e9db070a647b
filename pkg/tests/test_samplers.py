import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anflow.errors import InvalidProposalError, TrajectoryDivergenceError, TuningError
from anflow.flow import FlowBatch, FlowSampleRecord, MixerConfig, init_weights
from anflow.lattice import GaussianAction, Phi4Action
from anflow.samplers import (HmcParams, acceptance_probability, flow_mh_chain, hamiltonian,
                             hmc_chain, leapfrog, mh_accept_sequence, propose_and_sample)


class ConstantAction:
    kind = "constant"

    def __call__(self, phi):
        return np.zeros(np.shape(phi)[:-2])

    def grad(self, phi):
        return np.zeros_like(phi)


class ExplodingAction(ConstantAction):
    def grad(self, phi):
        return -np.exp(np.abs(phi) * 1e3)


def zero_flow(lattice):
    w = init_weights(MixerConfig(lattice=lattice, channels=4, token_hidden=2, channel_hidden=4,
                                 patch_size=1 if 1 in lattice else 2))
    for t in w.tensors.values():
        t.data = np.zeros_like(t.data)
    return w


class TestLeapfrog:
    def test_ballistic(self):
        rng = np.random.default_rng(0)
        phi, pi = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        p1, q1 = leapfrog(phi, pi, 0.3, 7, ConstantAction())
        assert np.allclose(p1, phi + 7 * 0.3 * pi, atol=1e-14) and np.array_equal(q1, pi)

    def test_reversible(self):
        rng = np.random.default_rng(1)
        A = Phi4Action(-4, 5)
        phi, pi = rng.normal(size=(4, 4)) * 0.5, rng.normal(size=(4, 4))
        p1, q1 = leapfrog(phi, pi, 0.05, 20, A)
        p0, q0 = leapfrog(p1, -q1, 0.05, 20, A)
        assert max(np.abs(p0 - phi).max(), np.abs(-q0 - pi).max()) < 1e-10

    def test_energy_error_second_order(self):
        rng = np.random.default_rng(2)
        A = Phi4Action(-4, 5)
        phi, pi = rng.normal(size=(4, 4)) * 0.4, rng.normal(size=(4, 4))
        H0 = hamiltonian(phi, pi, A)
        dH = []
        for eps in (0.02, 0.01, 0.005):
            p, q = leapfrog(phi, pi, eps, int(round(0.5 / eps)), A)
            dH.append(abs(hamiltonian(p, q, A) - H0))
        ratios = [dH[0] / dH[1], dH[1] / dH[2]]
        assert all(3.0 < r < 5.0 for r in ratios), ratios

    def test_divergence(self):
        with pytest.raises(TrajectoryDivergenceError):
            leapfrog(np.ones((2, 2)), np.ones((2, 2)), 1.0, 5, ExplodingAction())


class TestHmc:
    def test_tiny_step_always_accepts(self):
        p = HmcParams(step_size=1e-5, n_leapfrog=1, n_samples=1000, burn_in=0, thin=1, tune=False)
        ens = hmc_chain((2, 2), Phi4Action(-4, 5), p)
        assert ens.accepted.mean() >= 0.999

    def test_thinning_count(self):
        p = HmcParams(n_samples=2000, burn_in=0, thin=20, tune=False, step_size=0.1, n_leapfrog=5)
        assert len(hmc_chain((1, 1), Phi4Action(-4, 5), p)) == 100

    def test_tuning_lands_in_band(self):
        p = HmcParams(step_size=0.01, n_samples=400, burn_in=1000, thin=1)
        ens = hmc_chain((4, 4), Phi4Action(-4, 5), p)
        assert 0.6 <= ens.accepted.mean() <= 0.95

    def test_low_acceptance_raises(self):
        p = HmcParams(step_size=1.5, n_leapfrog=3, n_samples=500, burn_in=0, thin=1, tune=False)
        with pytest.raises(TuningError):
            hmc_chain((4, 4), Phi4Action(-4, 5), p)

    def test_actions_match_recomputation(self):
        A = Phi4Action(-4, 5)
        ens = hmc_chain((4, 4), A, HmcParams(n_samples=200, burn_in=50, thin=5))
        assert np.allclose(ens.actions, A(ens.configs), atol=1e-9, rtol=0)

    def test_seed_deterministic(self):
        p = HmcParams(n_samples=100, burn_in=50, thin=2, seed=4)
        a, b = hmc_chain((3, 3), Phi4Action(), p), hmc_chain((3, 3), Phi4Action(), p)
        assert np.array_equal(a.configs, b.configs)


class TestIndependenceMetropolis:
    def test_matched_density_accepts_all(self):
        rng = np.random.default_rng(0)
        S = rng.normal(size=50) * 3
        acc, state = mh_accept_sequence(-S, S, 1)
        assert acc.all() and np.array_equal(state, np.arange(50))

    def test_half_probability(self):
        assert acceptance_probability(0.0, 0.0, 0.0, math.log(2)) == pytest.approx(0.5, abs=1e-15)

    def test_first_always_accepted(self):
        acc, _ = mh_accept_sequence([0.0, 0.0], [1e6, 0.0], 0)
        assert acc[0]

    def test_clamped_positive_ratio_accepts(self):
        acc, _ = mh_accept_sequence([0.0, -5000.0], [0.0, 0.0], 0)
        assert acc[1]

    def test_empirical_rate(self):
        # from a state with S = 0, a proposal with S = ln 2 has acceptance 1/2
        hits = [mh_accept_sequence([0.0, 0.0], [0.0, math.log(2)], seed)[0][1]
                for seed in range(4000)]
        assert abs(np.mean(hits) - 0.5) < 3 * math.sqrt(0.25 / 4000)

    def test_missing_log_q(self):
        rec = FlowSampleRecord(np.zeros((2, 2)), np.zeros((2, 2)), 0.0, None, [])
        with pytest.raises(InvalidProposalError):
            flow_mh_chain([rec], GaussianAction())

    @given(st.integers(0, 1000))
    @settings(max_examples=20, deadline=None)
    def test_placeholder_invariance(self, seed):
        rng = np.random.default_rng(seed)
        phi = rng.normal(size=(30, 2, 2))
        lq = rng.normal(size=30)
        S = GaussianAction()(phi)
        mk = lambda p: FlowBatch(p, p, lq, lq, np.zeros((30, 1)))
        a = flow_mh_chain(mk(phi), GaussianAction(), seed, actions=S)
        b = flow_mh_chain(mk(np.zeros_like(phi)), GaussianAction(), seed, actions=S)
        assert np.array_equal(a.accepted, b.accepted)

    def test_identity_flow_on_gaussian(self):
        ens = propose_and_sample(zero_flow((4, 4)), GaussianAction(), 500, 0)
        assert len(ens) == 500 and ens.accepted[1:].mean() > 0.999

    def test_length_regardless_of_rejections(self):
        ens = propose_and_sample(zero_flow((4, 4)), Phi4Action(-4, 5), 300, 1)
        assert len(ens) == 300 and ens.accepted.mean() < 1
        rejected = np.flatnonzero(~ens.accepted)
        assert np.array_equal(ens.configs[rejected], ens.configs[rejected - 1])


def _quadrature_moments():
    from scipy.integrate import quad
    w = lambda x: math.exp(-(-4 * x * x + 5 * x**4))
    Z = quad(w, -4, 4)[0]
    return (quad(lambda x: x * x * w(x), -4, 4)[0] / Z,
            quad(lambda x: x**4 * w(x), -4, 4)[0] / Z)


def test_disjoint_seed_chains_agree():
    from anflow.observables import tau_int
    A = Phi4Action(-4, 5)
    means, errs = [], []
    for seed in (11, 12):
        ens = hmc_chain((1, 1), A, HmcParams(n_samples=20_000, burn_in=500, thin=1, seed=seed))
        v = ens.configs.ravel() ** 2
        means.append(v.mean())
        errs.append(v.std() * math.sqrt(2 * tau_int(v) / len(v)))
    assert abs(means[0] - means[1]) < 3 * math.hypot(*errs)
    exact = _quadrature_moments()[0]
    assert abs(means[0] - exact) < 3 * errs[0] + 1e-12
