import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import random_symmetric_graph
from mpstan.errors import GraphError, InputError
from mpstan.epi_dynamics import (
    CompartmentState,
    EpiParams,
    StateDelta,
    apply_step,
    fit_sir_baseline,
    mpsir_step,
    rollout,
    sir_step,
    step_channels,
)
from mpstan.geo_graph import PatchGraph


def state(S, I, R, N=None):
    S, I, R = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (S, I, R))
    N = S + I + R if N is None else np.atleast_1d(np.asarray(N, dtype=float))
    return CompartmentState(S=S, I=I, R=R, population=N)


def random_params(rng, n):
    return EpiParams(*(rng.uniform(0, 1, n) for _ in range(5)))


def pair_graph():
    return PatchGraph.from_adjacency([[0, 1], [1, 0]])


class TestCompartmentState:
    def test_zero_population_rejected(self):
        with pytest.raises(InputError):
            state(0, 0, 0, N=0)

    def test_channel_round_trip(self):
        x = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        s = CompartmentState.from_channels(x, np.array([10.0, 20.0]))
        assert s.I.tolist() == [1, 4] and s.R.tolist() == [2, 5] and s.S.tolist() == [3, 6]
        np.testing.assert_array_equal(s.to_channels(), x)

    def test_params_range(self):
        with pytest.raises(InputError):
            EpiParams.constant(2, beta=1.5)
        with pytest.raises(InputError):
            EpiParams.constant(2, d_i=-0.1)


class TestSirStep:
    def test_zero_rates(self):
        d = sir_step(state(900, 100, 0), 0.0, 0.0)
        assert (d.dS, d.dI, d.dR) == (0, 0, 0)

    def test_hand_arithmetic(self):
        d = sir_step(state(900, 100, 0), 0.3, 0.1)
        assert d.dS[0] == pytest.approx(-27.0, abs=1e-12)
        assert d.dI[0] == pytest.approx(17.0, abs=1e-12)
        assert d.dR[0] == pytest.approx(10.0, abs=1e-12)

    def test_no_infected(self):
        d = sir_step(state(900, 0, 100), 0.9, 0.9)
        assert (d.dS[0], d.dI[0], d.dR[0]) == (0, 0, 0)

    def test_per_patch_balance(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            x = state(*rng.uniform(0, 1e5, (3, 7)))
            d = sir_step(x, rng.uniform(0, 1, 7), rng.uniform(0, 1, 7))
            np.testing.assert_allclose(d.dS + d.dI + d.dR, 0.0, atol=1e-9)


class TestMpsirStep:
    def test_zero_mobility_equals_sir(self):
        rng = np.random.default_rng(1)
        g = PatchGraph.from_adjacency(random_symmetric_graph(rng, 6))
        x = state(*rng.uniform(0, 1e4, (3, 6)))
        b, c = rng.uniform(0, 1, 6), rng.uniform(0, 1, 6)
        d = mpsir_step(x, g, EpiParams(b, c, np.zeros(6), np.zeros(6), np.zeros(6)))
        base = sir_step(x, b, c)
        for k in ("dS", "dI", "dR"):
            np.testing.assert_array_equal(getattr(d, k), getattr(base, k))

    def test_symmetric_pair_cancels(self):
        x = state([800, 800], [150, 150], [50, 50])
        p = EpiParams.constant(2, 0.2, 0.1, 0.05, 0.03, 0.02)
        d = mpsir_step(x, pair_graph(), p)
        base = sir_step(x, p.beta, p.gamma)
        for k in ("dS", "dI", "dR"):
            np.testing.assert_allclose(getattr(d, k), getattr(base, k), atol=1e-12)

    def test_hand_evaluation(self):
        x = state([0, 0], [100, 0], [0, 0], N=[1000, 1000])
        p = EpiParams(np.zeros(2), np.zeros(2), np.zeros(2), np.array([0.1, 0.5]), np.zeros(2))
        d = mpsir_step(x, pair_graph(), p)
        np.testing.assert_allclose(d.dI, [-10.0, 10.0], atol=1e-12)

    def test_inflow_uses_source_degree(self):
        # star: hub 0 with leaves 1, 2, 3; hub emigrants split three ways
        a = np.zeros((4, 4))
        a[0, 1:] = a[1:, 0] = 1
        x = state([0] * 4, [90, 0, 0, 0], [0] * 4, N=[1000] * 4)
        p = EpiParams(np.zeros(4), np.zeros(4), np.zeros(4), np.full(4, 0.1), np.zeros(4))
        d = mpsir_step(x, PatchGraph.from_adjacency(a), p)
        np.testing.assert_allclose(d.dI, [-9.0, 3.0, 3.0, 3.0], atol=1e-12)

    def test_isolated_patch_rejected(self):
        with pytest.raises(GraphError):
            mpsir_step(state([1, 1], [1, 1], [1, 1]), _isolated_graph(), EpiParams.constant(2))

    def test_total_balance_on_symmetric_graph(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(2, 20))
            g = PatchGraph.from_adjacency(random_symmetric_graph(rng, n))
            x = state(*rng.uniform(0, 1e5, (3, n)))
            d = mpsir_step(x, g, random_params(rng, n))
            total = np.sum(d.dS + d.dI + d.dR)
            assert abs(total) <= 1e-9 * np.sum(x.total)


def _isolated_graph():
    # bypasses validation, which would reject the graph up front
    g = object.__new__(PatchGraph)
    object.__setattr__(g, "adjacency", np.zeros((2, 2)))
    object.__setattr__(g, "weights", np.zeros((2, 2)))
    object.__setattr__(g, "patch_ids", ("a", "b"))
    object.__setattr__(g, "gravity", None)
    return g


class TestApplyStep:
    def test_zero_delta(self):
        x = state(5, 6, 7)
        z = np.zeros(1)
        y, clamps = apply_step(x, StateDelta(z, z, z))
        assert (y.S[0], y.I[0], y.R[0], clamps) == (5, 6, 7, 0)

    def test_clamp_counted(self):
        x = state(5, 6, 7)
        y, clamps = apply_step(x, StateDelta(np.array([-7.0]), np.zeros(1), np.zeros(1)))
        assert y.S[0] == 0 and clamps == 1

    def test_sir_example(self):
        x = state(900, 100, 0)
        y, _ = apply_step(x, sir_step(x, 0.3, 0.1))
        assert (y.S[0], y.I[0], y.R[0]) == pytest.approx((873, 117, 10), abs=1e-12)

    def test_population_is_fixed(self):
        x = state(900, 100, 0)
        y, _ = apply_step(x, sir_step(x, 0.3, 0.1))
        assert y.population is x.population


class TestStepChannels:
    def test_matches_compartment_path(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = int(rng.integers(2, 10))
            g = PatchGraph.from_adjacency(random_symmetric_graph(rng, n))
            pop = rng.uniform(1e3, 1e5, n)
            x = np.stack([rng.uniform(0, 1, n) * pop * 0.3, rng.uniform(0, 1, n) * pop * 0.3, pop * 0.4], axis=1)
            p = random_params(rng, n)
            ref, ref_clamps = apply_step(CompartmentState.from_channels(x, pop), mpsir_step(CompartmentState.from_channels(x, pop), g, p))
            nxt, clamps = step_channels(x, pop, p, g.mobility_matrix, count=True)
            np.testing.assert_allclose(nxt, ref.to_channels(), rtol=1e-13, atol=1e-9)
            assert clamps == ref_clamps

    def test_torch_matches_numpy(self):
        rng = np.random.default_rng(4)
        g = PatchGraph.from_adjacency(random_symmetric_graph(rng, 5))
        pop = rng.uniform(1e3, 1e5, 5)
        x = np.stack([pop * 0.1, pop * 0.2, pop * 0.7], axis=1)
        p = random_params(rng, 5)
        pt = EpiParams(*(torch.as_tensor(getattr(p, k)) for k in ("beta", "gamma", "d_s", "d_i", "d_r")))
        ref, _ = step_channels(x, pop, p, g.mobility_matrix)
        out, _ = step_channels(torch.as_tensor(x), torch.as_tensor(pop), pt, torch.as_tensor(np.array(g.mobility_matrix)))
        np.testing.assert_allclose(out.numpy(), ref, rtol=1e-14)


def independent_rollout(S, I, R, N, adj, beta, gamma, ds, di, dr, horizon):
    """Loop-by-loop MP-SIR reimplementation used as an oracle."""
    n = len(S)
    deg = [sum(adj[j]) for j in range(n)]
    traj = []
    S, I, R = list(S), list(I), list(R)
    for _ in range(horizon):
        nS, nI, nR = [], [], []
        for i in range(n):
            inf = beta[i] * I[i] * S[i] / N[i]
            rec = gamma[i] * I[i]
            in_s = sum(ds[j] * S[j] / deg[j] for j in range(n) if adj[i][j])
            in_i = sum(di[j] * I[j] / deg[j] for j in range(n) if adj[i][j])
            in_r = sum(dr[j] * R[j] / deg[j] for j in range(n) if adj[i][j])
            nS.append(max(0.0, S[i] - inf - ds[i] * S[i] + in_s))
            nI.append(max(0.0, I[i] + inf - rec - di[i] * I[i] + in_i))
            nR.append(max(0.0, R[i] + rec - dr[i] * R[i] + in_r))
        S, I, R = nS, nI, nR
        traj.append(list(I))
    return np.array(traj)


class TestRollout:
    def test_horizon_one_is_single_step(self):
        rng = np.random.default_rng(5)
        g = PatchGraph.from_adjacency(random_symmetric_graph(rng, 4))
        x = state(*rng.uniform(0, 1e4, (3, 4)))
        p = random_params(rng, 4)
        one, _ = apply_step(x, mpsir_step(x, g, p))
        tr = rollout(x, g, p, 1)
        np.testing.assert_array_equal(tr.infected[0], one.I)
        assert len(tr.states) == 2

    def test_zero_rates_fixed_point(self):
        x = state([10.0, 20.0], [3.0, 4.0], [1.0, 2.0])
        tr = rollout(x, pair_graph(), EpiParams.constant(2), 20)
        for s in tr.states:
            np.testing.assert_array_equal(s.to_channels(), x.to_channels())

    def test_ring_against_independent_loop(self):
        rng = np.random.default_rng(6)
        adj = [[0, 1, 1], [1, 0, 1], [1, 1, 0]]
        N = rng.uniform(1e4, 1e5, 3)
        I = N * 0.01
        R = N * 0.05
        S = N - I - R
        p = EpiParams(rng.uniform(0.1, 0.5, 3), rng.uniform(0.05, 0.2, 3), *(rng.uniform(0, 0.1, 3) for _ in range(3)))
        tr = rollout(state(S, I, R, N), PatchGraph.from_adjacency(adj), p, 10)
        ref = independent_rollout(S, I, R, N, adj, p.beta, p.gamma, p.d_s, p.d_i, p.d_r, 10)
        np.testing.assert_allclose(tr.infected, ref, rtol=1e-12)

    def test_sir_only_ignores_graph(self):
        x = state([900.0, 500.0], [100.0, 10.0], [0.0, 0.0])
        p = EpiParams.constant(2, 0.3, 0.1, 0.5, 0.5, 0.5)
        tr = rollout(x, None, p, 3, use_mobility=False)
        ref = rollout(x, pair_graph(), EpiParams.constant(2, 0.3, 0.1), 3)
        np.testing.assert_allclose(tr.infected, ref.infected, rtol=1e-15)

    def test_monotone_without_recovery(self):
        rng = np.random.default_rng(7)
        g = PatchGraph.from_adjacency(random_symmetric_graph(rng, 5))
        x = state(*rng.uniform(0, 1e4, (3, 5)))
        p = EpiParams(rng.uniform(0, 1, 5), np.zeros(5), np.zeros(5), np.zeros(5), np.zeros(5))
        tr = rollout(x, g, p, 30)
        assert np.all(np.diff(tr.infected, axis=0) >= 0)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(8)
        n = 6
        g = PatchGraph.from_adjacency(random_symmetric_graph(rng, n))
        pop = rng.uniform(1e4, 1e5, n)
        x = state(pop * 0.9, pop * 0.05, pop * 0.05, pop)
        p = EpiParams(*(rng.uniform(0, 0.3, n) for _ in range(5)))
        perm = rng.permutation(n)
        xp = state(x.S[perm], x.I[perm], x.R[perm], pop[perm])
        pp = EpiParams(*(getattr(p, k)[perm] for k in ("beta", "gamma", "d_s", "d_i", "d_r")))
        a = rollout(x, g, p, 15).infected
        b = rollout(xp, g.permuted(perm), pp, 15).infected
        np.testing.assert_allclose(b, a[:, perm], rtol=1e-12)

    def test_bad_horizon(self):
        with pytest.raises(InputError):
            rollout(state(1, 1, 1), None, EpiParams.constant(1), 0, use_mobility=False)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 15), st.integers(0, 2**32 - 1))
    def test_conservation_property(self, n, seed):
        rng = np.random.default_rng(seed)
        g = PatchGraph.from_adjacency(random_symmetric_graph(rng, n))
        pop = rng.uniform(1e3, 1e6, n)
        x = state(pop * 0.98, pop * 0.01, pop * 0.01, pop)
        p = EpiParams(rng.uniform(0, 1, n), rng.uniform(0, 1, n), *(rng.uniform(0, 0.2, n) for _ in range(3)))
        tr = rollout(x, g, p, 50)
        if tr.clamps == 0:
            totals = [float(np.sum(s.total)) for s in tr.states]
            assert max(abs(t - totals[0]) for t in totals) / totals[0] < 1e-9


def exact_sir_series(S0, I0, R0, N, beta, gamma, T):
    S, I, R = [S0], [I0], [R0]
    for _ in range(T - 1):
        inf = beta * I[-1] * S[-1] / N
        rec = gamma * I[-1]
        S.append(S[-1] - inf)
        I.append(I[-1] + inf - rec)
        R.append(R[-1] + rec)
    return np.array(S), np.array(I), np.array(R)


class TestFitSirBaseline:
    def test_recovers_generating_params(self):
        S, I, R = exact_sir_series(9900.0, 100.0, 0.0, 10000.0, 0.3, 0.1, 30)
        fit = fit_sir_baseline(S, I, R, 10000.0)
        assert fit.beta[0] == pytest.approx(0.3, abs=1e-9)
        assert fit.gamma[0] == pytest.approx(0.1, abs=1e-9)
        assert not fit.degenerate[0]

    def test_zero_infection_is_degenerate(self):
        z = np.zeros(10)
        fit = fit_sir_baseline(np.full(10, 100.0), z, z, 100.0)
        assert (fit.beta[0], fit.gamma[0], fit.degenerate[0]) == (0.0, 0.0, True)

    def test_small_noise_converges(self):
        rng = np.random.default_rng(9)
        S, I, R = exact_sir_series(9900.0, 100.0, 0.0, 10000.0, 0.25, 0.07, 40)
        errs = []
        for sigma in (1e-2, 1e-3, 1e-5):
            noisy = [v * (1 + sigma * rng.standard_normal(v.shape)) for v in (S, I, R)]
            fit = fit_sir_baseline(*noisy, 10000.0)
            errs.append(abs(fit.beta[0] - 0.25) + abs(fit.gamma[0] - 0.07))
        assert errs[-1] <= 2e-3
        assert errs[-1] <= errs[0]

    def test_matches_brute_force_objective(self):
        # coarse grid so the literal objective can be evaluated everywhere
        rng = np.random.default_rng(10)
        S, I, R = (rng.uniform(10, 1000, 6) for _ in range(3))
        fit = fit_sir_baseline(S, I, R, 3000.0, resolution=0.05)
        grid = np.arange(21) * 0.05
        best, arg = np.inf, None
        for b in grid:
            for g in grid:
                err = 0.0
                for t in range(5):
                    inf = b * I[t] * S[t] / 3000.0
                    rec = g * I[t]
                    err += (S[t] - inf - S[t + 1]) ** 2 + (I[t] + inf - rec - I[t + 1]) ** 2 + (R[t] + rec - R[t + 1]) ** 2
                if err < best * (1 - 1e-12):
                    best, arg = err, (b, g)
        assert (fit.beta[0], fit.gamma[0]) == pytest.approx(arg, abs=1e-12)

    def test_multi_patch(self):
        s1 = exact_sir_series(9900.0, 100.0, 0.0, 1e4, 0.3, 0.1, 20)
        s2 = exact_sir_series(4950.0, 50.0, 0.0, 5e3, 0.2, 0.05, 20)
        S, I, R = (np.stack([a, b], axis=1) for a, b in zip(s1, s2))
        fit = fit_sir_baseline(S, I, R, np.array([1e4, 5e3]))
        np.testing.assert_allclose(fit.beta, [0.3, 0.2], atol=1e-9)
        np.testing.assert_allclose(fit.gamma, [0.1, 0.05], atol=1e-9)

    def test_too_short(self):
        with pytest.raises(InputError):
            fit_sir_baseline([1, 2], [1, 2], [1, 2], 10.0)
