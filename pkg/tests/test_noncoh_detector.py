"""Tests for the non-coherent multi-device data detector."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_pair
from oracles import per_edge_data
from gfnoma import messages as msg
from gfnoma.channel_sim import ActivityPattern, ChannelRealization, crandn, synthesize_pair
from gfnoma.errors import ParameterError
from gfnoma.noncoh_detector import (
    CURR,
    PREV,
    DataConfig,
    DataState,
    backward_z_pair,
    component_moments,
    differential_log_factors,
    extrinsic_alpha,
    forward_xbar,
    gaussian_project,
    hard_decide,
    mixture_rho,
    run_data_detection,
    symbol_belief_beta,
    update_lambda_pair,
)
from gfnoma.tx_waveform import DpskAlphabet, build_spreading_matrix

QPSK = DpskAlphabet(4)


def _state(L, K, N, lam=10.0):
    return DataState.initial(L, K, N, QPSK.Q, lam)


def _slots(m_prev, m_curr, v_prev, v_curr):
    fm = np.array([[[m_prev]], [[m_curr]]], dtype=complex)
    fv = np.array([[[v_prev]], [[v_curr]]], dtype=float)
    return fm, fv


class TestForward:
    def test_initial_iteration(self):
        rng = np.random.default_rng(0)
        Pbar = build_spreading_matrix(13, 30).restrict([2, 9, 17])
        Y = crandn(rng, (2, 13, 4))
        stt = _state(13, 3, 4)
        fm, fv = forward_xbar(stt, Y, Pbar)
        np.testing.assert_allclose(fv, 1.1, rtol=1e-12)
        np.testing.assert_allclose(fm, np.matmul(Pbar.conj().T, Y), atol=1e-12)

    def test_scalar(self):
        stt = _state(1, 1, 1, lam=4.0)
        fm, fv = forward_xbar(stt, np.full((2, 1, 1), 2.0 + 1j), np.array([[0.6 - 0.8j]]))
        np.testing.assert_allclose(fv, 1.25)
        np.testing.assert_allclose(fm, 1.25 * (0.6 + 0.8j) * (2.0 + 1j) / 1.25)

    def test_zero_observation(self):
        stt = _state(13, 2, 3)
        fm, _ = forward_xbar(stt, np.zeros((2, 13, 3)), build_spreading_matrix(13, 2).entries)
        assert not np.any(fm)


class TestSymbolBelief:
    def test_worked_example(self):
        stt = _state(13, 1, 1)
        stt.fm, stt.fv = _slots(1.0, 1j, 0.5, 0.5)
        beta = symbol_belief_beta(stt, QPSK)[0]
        # points are (1, j, -1, -j)
        z = 1 + 2 * np.exp(-2) + np.exp(-4)
        np.testing.assert_allclose(beta, [np.exp(-2) / z, 1 / z, np.exp(-2) / z, np.exp(-4) / z],
                                   rtol=1e-12)
        # frozen from the closed form above
        assert beta[1] == pytest.approx(0.775803, abs=1e-6)
        assert beta[0] == pytest.approx(0.104994, abs=1e-6)
        assert beta[3] == pytest.approx(0.014210, abs=1e-6)
        assert beta[1] / beta[0] == pytest.approx(np.e**2)

    def test_sharp_limit(self):
        stt = _state(13, 1, 1)
        stt.fm, stt.fv = _slots(0.3 + 0.4j, -1j * (0.3 + 0.4j), 1e-8, 1e-8)
        beta = symbol_belief_beta(stt, QPSK)[0]
        np.testing.assert_allclose(beta, [0, 0, 0, 1], atol=1e-12)

    def test_uninformative_previous_slot(self):
        stt = _state(13, 1, 1)
        stt.fm, stt.fv = _slots(0.0, 0.7 - 0.1j, 0.4, 0.9)
        np.testing.assert_allclose(symbol_belief_beta(stt, QPSK)[0], 0.25, atol=1e-15)

    def test_log_factors_match_density(self):
        fm, fv = _slots(0.2 - 0.5j, 1.1 + 0.3j, 0.3, 0.7)
        lf = differential_log_factors(fm, fv, QPSK.points)[0, 0]
        for i, q in enumerate(QPSK.points):
            var = 0.7 + 0.3
            dens = np.exp(-abs(1.1 + 0.3j - q * (0.2 - 0.5j)) ** 2 / var) / (np.pi * var)
            assert np.exp(lf[i]) == pytest.approx(dens, rel=1e-12)


class TestExtrinsic:
    def _run(self, fm, fv):
        stt = _state(13, fm.shape[1], fm.shape[2])
        stt.fm, stt.fv = fm, fv
        symbol_belief_beta(stt, QPSK)
        extrinsic_alpha(stt)
        return stt

    def test_single_antenna_is_uniform(self):
        stt = self._run(*_slots(1.0, 1j, 0.5, 0.5))
        np.testing.assert_allclose(stt.alpha, 0.25)

    def test_two_antennas(self):
        rng = np.random.default_rng(1)
        fm = crandn(rng, (2, 1, 2))
        fv = rng.uniform(0.2, 1.0, (2, 1, 2))
        stt = self._run(fm, fv)
        f1 = np.exp(stt.log_factors[0, 1])
        np.testing.assert_allclose(stt.alpha[0, 0], f1 / f1.sum(), rtol=1e-12)
        assert extrinsic_alpha(stt, n=0).shape == (1, 4)

    def test_alpha_times_own_factor_is_beta(self):
        rng = np.random.default_rng(2)
        fm = crandn(rng, (2, 3, 5))
        fv = rng.uniform(0.2, 1.0, (2, 3, 5))
        stt = self._run(fm, fv)
        for n in range(5):
            prod = stt.alpha[:, n] * np.exp(stt.log_factors[:, n])
            np.testing.assert_allclose(prod / prod.sum(axis=1, keepdims=True), stt.beta, rtol=1e-9)


class TestMixture:
    def test_components(self):
        fm, fv = _slots(0.4 + 0.2j, -0.3 + 1j, 1.0, 1.0)
        m_t, v_t, m_p, v_p = component_moments(fm, fv, QPSK.points)
        np.testing.assert_allclose(v_t, 0.5)
        np.testing.assert_allclose(m_t[0, 0], (-0.3 + 1j + QPSK.points * (0.4 + 0.2j)) / 2)
        np.testing.assert_allclose(m_p[0, 0], (np.conj(QPSK.points) * (-0.3 + 1j) + 0.4 + 0.2j) / 2)
        np.testing.assert_allclose(v_p, 0.5)

    def test_components_uninformative_slot(self):
        fm, fv = _slots(5.0, 0.2 + 0.1j, 1e12, 0.3)
        m_t, v_t, _, _ = component_moments(fm, fv, QPSK.points)
        np.testing.assert_allclose(m_t, 0.2 + 0.1j, atol=1e-9)
        np.testing.assert_allclose(v_t, 0.3, rtol=1e-9)

    def test_components_identity_ratio(self):
        fm, fv = _slots(1.0, 1.0, 0.7, 0.2)
        m_t, _, _, _ = component_moments(fm, fv, QPSK.points)
        assert m_t[0, 0, 0] == pytest.approx(1.0)

    def test_rho_equals_beta_for_single_antenna(self):
        stt = _state(13, 1, 1)
        stt.fm, stt.fv = _slots(1.0, 1j, 0.5, 0.5)
        symbol_belief_beta(stt, QPSK)
        extrinsic_alpha(stt)
        rho = mixture_rho(stt, QPSK)
        np.testing.assert_allclose(rho[0, 0], stt.beta[0], rtol=1e-12)

    def test_rho_uniform_and_peaked(self):
        stt = _state(13, 1, 1)
        stt.fm, stt.fv = _slots(0.0, 0.5, 1.0, 1.0)
        symbol_belief_beta(stt, QPSK)
        extrinsic_alpha(stt)
        np.testing.assert_allclose(mixture_rho(stt, QPSK), 0.25)
        stt.fm, stt.fv = _slots(1.0, -1.0, 1e-6, 1e-6)
        symbol_belief_beta(stt, QPSK)
        extrinsic_alpha(stt)
        np.testing.assert_allclose(mixture_rho(stt, QPSK)[0, 0], [0, 0, 1, 0], atol=1e-12)


class TestProjection:
    def test_symmetric_pair(self):
        m, v = gaussian_project(np.array([0.5, 0.5]), np.array([1.0, -1.0]), np.array([1.0, 1.0]))
        assert m == pytest.approx(0.0)
        assert v == pytest.approx(2.0)
        _, raw = gaussian_project(np.array([0.5, 0.5]), np.array([1.0, -1.0]),
                                  np.array([1.0, 1.0]), central=False)
        assert raw == pytest.approx(2.0)

    def test_single_component(self):
        for central in (True, False):
            m, v = gaussian_project(np.array([1.0]), np.array([0.0 + 0.0j]), np.array([0.3]),
                                    central=central)
            assert m == 0 and v == pytest.approx(0.3)
        m, v = gaussian_project(np.array([1.0]), np.array([0.4 - 0.2j]), np.array([0.3]))
        assert m == 0.4 - 0.2j and v == pytest.approx(0.3, abs=1e-15)

    def test_raw_exceeds_central_by_mean_power(self):
        w = np.array([0.2, 0.8])
        mu = np.array([1 + 1j, 0.5j])
        m, vc = gaussian_project(w, mu, np.array([0.1, 0.2]))
        _, vr = gaussian_project(w, mu, np.array([0.1, 0.2]), central=False)
        assert vr - vc == pytest.approx(abs(m) ** 2)

    @given(seed=st.integers(0, 2**32 - 1), Q=st.integers(1, 16))
    @settings(max_examples=80, deadline=None)
    def test_mean_exactness(self, seed, Q):
        rng = np.random.default_rng(seed)
        w = rng.dirichlet(np.ones(Q))
        mu = crandn(rng, Q, 4.0)
        var = rng.uniform(0.01, 2.0, Q)
        m, v = gaussian_project(w, mu, var)
        assert abs(m - np.sum(w * mu)) <= 1e-12
        # law of total variance
        assert v == pytest.approx(np.sum(w * var) + np.sum(w * np.abs(mu - m) ** 2), rel=1e-10)


class TestBackwardAndNoise:
    def test_zero_variance(self):
        rng = np.random.default_rng(3)
        Pbar = build_spreading_matrix(13, 3).entries
        stt = _state(13, 3, 2)
        stt.m_x = crandn(rng, (2, 3, 2))
        stt.v_x = np.zeros((2, 3, 2))
        mz, vz = backward_z_pair(stt, crandn(rng, (2, 13, 2)), Pbar, floor=0.0)
        np.testing.assert_allclose(mz, np.matmul(Pbar, stt.m_x), atol=1e-14)
        assert not np.any(vz)

    def test_scalar(self):
        stt = _state(1, 1, 1, lam=2.0)
        stt.m_x = np.full((2, 1, 1), 0.5 + 0j)
        stt.v_x = np.full((2, 1, 1), 0.2)
        mz, vz = backward_z_pair(stt, np.full((2, 1, 1), 1.0 + 0j), np.array([[1.0 + 0j]]))
        np.testing.assert_allclose(vz, 0.2)
        np.testing.assert_allclose(mz, 0.5 - 0.2 * 1.0 / (0.5 + 1.0))

    def test_lambda_both_slots(self):
        L = 4
        Y = np.zeros((2, L, 1), dtype=complex)
        lam = msg.noise_precision(Y, np.ones((2, L, 1)), np.zeros((2, L, 1)))
        assert lam[0] == pytest.approx(1.0)
        m = np.zeros((2, L, 1))
        m[PREV] = np.sqrt(2.0)
        lam = msg.noise_precision(Y, m, np.zeros((2, L, 1)))
        assert lam[0] == pytest.approx(1.0)

    def test_lambda_concentration(self):
        rng = np.random.default_rng(4)
        L, N = 13, 100
        z = crandn(rng, (2, L, N))
        Y = z + crandn(rng, (2, L, N))
        lam = msg.noise_precision(Y, z, np.zeros((2, L, N)))
        assert 0.89 <= np.median(lam) <= 1.12

    def test_update_modes(self):
        rng = np.random.default_rng(5)
        Y = crandn(rng, (2, 13, 3))
        for mode in ("pair", "single", "fixed"):
            stt = _state(13, 2, 3, lam=7.0)
            lam = update_lambda_pair(stt, Y, mode)
            assert lam.shape == (3,)
            if mode == "fixed":
                np.testing.assert_array_equal(lam, 7.0)
        with pytest.raises(ParameterError):
            DataConfig(lambda_update="median")


class TestHardDecision:
    def test_argmax(self):
        d = hard_decide([[0.1, 0.7, 0.1, 0.1]], QPSK)
        assert d.symbols[0] == 1j
        np.testing.assert_array_equal(d.bits[0], [0, 1])

    def test_tie_goes_to_lowest_index(self):
        assert hard_decide([[0.5, 0.5, 0, 0]], QPSK).indices[0] == 0

    def test_indicator(self):
        d = hard_decide(np.eye(4), QPSK)
        np.testing.assert_array_equal(d.symbols, QPSK.points)


class TestRunDataDetection:
    def test_noiseless_two_devices(self):
        for seed in range(20):
            P, pr = make_pair(np.random.default_rng(seed), 13, 20, 2, 4, 0.0)
            act = pr.activity.active
            r = run_data_detection(pr.Y_prev, pr.Y_curr, P.restrict(act), QPSK)
            np.testing.assert_allclose(r.decision.symbols, pr.data[act], atol=1e-12)

    def test_noiseless_single_antenna(self):
        for seed in range(20):
            P, pr = make_pair(np.random.default_rng(seed), 13, 5, 1, 1, 0.0)
            act = pr.activity.active
            r = run_data_detection(pr.Y_prev, pr.Y_curr, P.restrict(act), QPSK)
            np.testing.assert_allclose(r.decision.symbols, pr.data[act], atol=1e-12)

    def test_channel_phase_invariance(self):
        rng = np.random.default_rng(6)
        P = build_spreading_matrix(13, 10)
        act = ActivityPattern.from_indices(10, [1, 6])
        H = crandn(rng, (10, 4))
        s_prev = np.ones(10, dtype=complex)
        s_curr = np.full(10, -1j)
        out = []
        for theta in (0.0, 1.234):
            Hr = H.copy()
            Hr[6] *= np.exp(1j * theta)
            pr = synthesize_pair(P, ChannelRealization(Hr), act, s_prev, s_curr, 0.0,
                                 np.random.default_rng(0))
            r = run_data_detection(pr.Y_prev, pr.Y_curr, P.restrict(act.active), QPSK)
            out.append(r.decision)
        np.testing.assert_array_equal(out[0].indices, out[1].indices)
        np.testing.assert_allclose(out[0].beta, out[1].beta, atol=1e-9)

    def test_no_devices(self):
        r = run_data_detection(np.zeros((13, 4)), np.zeros((13, 4)), np.zeros((13, 0)), QPSK)
        assert r.decision.indices.size == 0 and r.state is None

    def test_normalisation_every_iteration(self):
        checked = []

        def check(stt):
            for w in (stt.beta, stt.rho, stt.alpha):
                assert np.all(w >= 0)
                np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)
            assert np.all(stt.v_x >= 1e-12) and np.all(stt.vz_back >= 1e-12)
            checked.append(stt.iteration)

        for seed, nv in [(7, 0.0), (8, 0.1), (9, 1.0), (10, 3.0)]:
            P, pr = make_pair(np.random.default_rng(seed), 13, 30, 6, 8, nv)
            act = pr.activity.active
            for literal in (False, True):
                run_data_detection(pr.Y_prev, pr.Y_curr, P.restrict(act), QPSK,
                                   DataConfig(paper_literal_variance=literal), callback=check)
        assert len(checked) == 80

    @pytest.mark.parametrize("M", [2, 8])
    def test_other_orders(self, M):
        a = DpskAlphabet(M)
        P, pr = make_pair(np.random.default_rng(11), 13, 20, 3, 16, 1e-4, M=M)
        act = pr.activity.active
        r = run_data_detection(pr.Y_prev, pr.Y_curr, P.restrict(act), a)
        np.testing.assert_allclose(r.decision.symbols, pr.data[act], atol=1e-12)

    def test_tolerance_stop(self):
        P, pr = make_pair(np.random.default_rng(12), 13, 20, 2, 8, 0.01)
        act = pr.activity.active
        r = run_data_detection(pr.Y_prev, pr.Y_curr, P.restrict(act), QPSK,
                               DataConfig(max_iter=50, tol=1e-9))
        assert r.iterations < 50

    def test_dimension_errors(self):
        with pytest.raises(ParameterError):
            run_data_detection(np.zeros((13, 2)), np.zeros((13, 3)), np.zeros((13, 1)))
        with pytest.raises(ParameterError):
            run_data_detection(np.zeros((13, 2)), np.zeros((13, 2)), np.zeros((11, 1)))


class TestPerEdgeAgreement:
    @pytest.mark.xfail(strict=True, reason="aggregated forward variance keeps each edge's own "
                       "contribution; gap is of order 1/(L+K), see decisions ledger")
    def test_beliefs_within_one_percent(self):
        worst_m, worst_v = 0.0, 0.0
        for seed in range(6):
            P, pr = make_pair(np.random.default_rng(seed), 13, 4, 4, 4, 0.1)
            _, m_ref, v_ref, _ = per_edge_data(pr.Y, P.entries, QPSK.points, max_iter=30)
            r = run_data_detection(pr.Y_prev, pr.Y_curr, P.entries, QPSK, DataConfig(max_iter=30))
            worst_m = max(worst_m, np.linalg.norm(r.state.m_x - m_ref) / np.linalg.norm(m_ref))
            worst_v = max(worst_v, np.max(np.abs(r.state.v_x - v_ref) / v_ref))
        assert worst_m < 0.01 and worst_v < 0.01

    def test_decisions_agree(self):
        for seed in range(6):
            P, pr = make_pair(np.random.default_rng(seed), 13, 4, 4, 4, 0.1)
            beta_ref, _, _, _ = per_edge_data(pr.Y, P.entries, QPSK.points, max_iter=30)
            r = run_data_detection(pr.Y_prev, pr.Y_curr, P.entries, QPSK, DataConfig(max_iter=30))
            np.testing.assert_array_equal(r.decision.indices, np.argmax(beta_ref, axis=1))
