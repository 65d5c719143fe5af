import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tardos_dnn import (
    ChannelSpec,
    ScoreDistributions,
    SprtConfig,
    SprtState,
    TardosParams,
    baseline_independent_fpr,
    baseline_min_queries,
    estimate_score_distributions,
    generate_codebook,
    make_oracle,
    position_score,
    score_functions,
    sequential_accuse,
    sprt_step,
    z_threshold,
)
from tardos_dnn.accusation import (
    DuplicatePositionError,
    InsufficientUsersError,
    OracleError,
    Status,
    accuse_answers,
    position_scores,
    score_bin_edges,
    score_matrix,
)


class TestScoreFunctions:
    def test_reference(self):
        assert score_functions(0.2) == pytest.approx((2.0, -0.5))
        assert score_functions(0.5) == pytest.approx((1.0, -1.0))

    @given(st.floats(1e-6, 1 - 1e-6))
    def test_innocent_moments_exact(self, p):
        # an innocent holds the observed symbol with probability p
        u1, u0 = score_functions(p)
        assert p * u1 + (1 - p) * u0 == pytest.approx(0.0, abs=1e-9)
        assert p * u1**2 + (1 - p) * u0**2 == pytest.approx(1.0, rel=1e-9)

    def test_array_input(self):
        u1, u0 = score_functions(np.array([0.1, 0.9]))
        assert u1 == pytest.approx([3.0, 1 / 3])
        assert u0 == pytest.approx([-1 / 3, -3.0])

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, float("nan")])
    def test_domain(self, p):
        with pytest.raises(ValueError):
            score_functions(p)


class TestPositionScores:
    def test_uses_bias_of_observed_symbol(self, small_codebook):
        cb = small_codebook
        for pos in (0, 17, 199):
            for sym in range(cb.q):
                p = cb.bias[pos, sym]
                for user in (0, 5):
                    want = math.sqrt((1 - p) / p) if cb.fingerprints[user, pos] == sym else -math.sqrt(p / (1 - p))
                    assert position_score(cb, user, pos, sym) == pytest.approx(want, rel=1e-14)

    def test_matrix_agrees_with_scalar(self, small_codebook):
        cb = small_codebook
        out = np.random.default_rng(0).integers(0, cb.q, cb.m)
        sm = score_matrix(cb, out)
        for pos in (3, 50, 120):
            assert np.array_equal(sm[:, pos], position_scores(cb, pos, int(out[pos])))
            assert sm[7, pos] == position_score(cb, 7, pos, int(out[pos]))

    def test_bounds(self, small_codebook):
        cb = small_codebook
        edges = score_bin_edges(cb.params.tau)
        sm = score_matrix(cb, cb.fingerprints[0])
        assert sm.min() > edges[0] and sm.max() < edges[-1]

    @pytest.mark.parametrize("args", [(99, 0, 0), (0, 200, 0), (0, 0, 10)])
    def test_index_errors(self, small_codebook, args):
        with pytest.raises(IndexError):
            position_score(small_codebook, *args)


class TestDistributions:
    def test_edges(self):
        e = score_bin_edges(0.04, 256)
        half = math.sqrt(0.96 / 0.04)
        assert e.size == 257
        assert e[0] == pytest.approx(-half - 2 * half / 256)
        assert np.allclose(np.diff(e), np.diff(e)[0])

    def test_from_counts_smoothing(self):
        d = ScoreDistributions.from_counts([0, 1, 2, 3], [2, 0, 0], [0, 0, 2], smoothing=1)
        assert d.p_col == pytest.approx([0.6, 0.2, 0.2])
        assert d.p_inn == pytest.approx([0.2, 0.2, 0.6])
        assert d.log_ratio(np.array([0.5, 2.5]), base=10) == pytest.approx([math.log10(3), -math.log10(3)])
        # scores outside the edges fall into the end bins
        assert d.bin_index(np.array([-5.0, 9.0])).tolist() == [0, 2]

    def test_rejects_zero_mass(self):
        with pytest.raises(ValueError):
            ScoreDistributions([0, 1, 2], [1.0, 0.0], [0.5, 0.5], 0.0, {})

    def test_round_trip(self, small_dists):
        back = ScoreDistributions.from_dict(small_dists.to_dict())
        assert np.array_equal(back.p_col, small_dists.p_col)
        assert back.channel_descriptor == small_dists.channel_descriptor

    def test_from_dict_missing(self, small_dists):
        doc = small_dists.to_dict()
        del doc["p_inn"]
        with pytest.raises(ValueError, match="p_inn"):
            ScoreDistributions.from_dict(doc)

    def test_estimate_worker_independent(self, small_codebook):
        ch = ChannelSpec((0,), ma_violation_rate=0.1)
        a = estimate_score_distributions(small_codebook, ch, 4, 13, seed=2, workers=1)
        b = estimate_score_distributions(small_codebook, ch, 4, 13, seed=2, workers=5)
        assert np.array_equal(a.p_col, b.p_col) and np.array_equal(a.p_inn, b.p_inn)
        assert a.score_mean == b.score_mean
        assert a.channel_descriptor == {"strategy": "majority", "ma_violation_rate": 0.1, "skew_rate": 0.0, "c0": 4, "trials": 13, "seed": 2}

    def test_estimate_counts_and_means(self, small_dists):
        assert small_dists.n_samples == {"colluder": 6 * 60 * 200, "innocent": 24 * 60 * 200}
        assert small_dists.score_mean["colluder"] > 0.2
        assert abs(small_dists.score_mean["innocent"]) < 0.05

    def test_estimate_needs_innocents(self, small_codebook):
        with pytest.raises(InsufficientUsersError):
            estimate_score_distributions(small_codebook, ChannelSpec((0,)), 30, 2, seed=0)


class TestSprtConfig:
    def test_reference_thresholds(self):
        cfg = SprtConfig(1e-6, 1e-3)
        # mpmath: log10(1e-3 / (1 - 1e-6)), log10((1 - 1e-3) / 1e-6)
        assert cfg.a == pytest.approx(-2.999999565705301, abs=1e-12)
        assert cfg.b == pytest.approx(5.999565488225982, abs=1e-12)

    def test_natural_log(self):
        cfg = SprtConfig(1e-6, 1e-3, log_base=math.e)
        assert cfg.b == pytest.approx(math.log(0.999e6))

    def test_family(self):
        cfg = SprtConfig(1e-2, 1e-3).for_family(100)
        assert cfg.per_user_eps1 == pytest.approx(1e-4)
        assert cfg.b == pytest.approx(math.log10(0.999 / 1e-4))
        assert cfg.a == pytest.approx(SprtConfig(1e-2, 1e-3).a)

    @pytest.mark.parametrize("kw", [dict(eps1=0), dict(eps2=1), dict(log_base=1), dict(a=1.0), dict(family_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SprtConfig(**kw)


class TestZThreshold:
    @pytest.mark.parametrize("t, expected", [(1, 47.53669592007438), (10, 52.24425453026719), (100, 81.04772423824280)])
    def test_reference(self, t, expected):
        assert z_threshold(t, 1e-6, 0.03847508117277996) == pytest.approx(expected, rel=1e-12)

    @given(st.integers(1, 5000), st.floats(1e-12, 0.5), st.floats(1e-3, 0.49))
    def test_solves_bernstein_bound(self, t, eps1, tau):
        z = z_threshold(t, eps1, tau)
        bound = math.exp(-(z * z / (2 * t)) / (1 + z / (3 * t * math.sqrt(tau))))
        assert bound == pytest.approx(eps1, rel=1e-8)
        assert z_threshold(t + 1, eps1, tau) > z

    def test_invalid(self):
        with pytest.raises(ValueError):
            z_threshold(0, 1e-6, 0.04)


def _identity_answers(cb, user):
    return np.asarray(cb.fingerprints[user], dtype=np.int64)


class TestSprtStep:
    def test_functional_and_duplicates(self, small_codebook, small_dists):
        cfg = SprtConfig()
        s0 = SprtState.initial(small_codebook.n_users)
        s1 = sprt_step(s0, small_codebook, small_dists, cfg, 4, int(small_codebook.fingerprints[2, 4]))
        assert s0.t == 0 and not s0.W.any()
        assert s1.t == 1 and s1.consumed == (4,)
        with pytest.raises(DuplicatePositionError):
            sprt_step(s1, small_codebook, small_dists, cfg, 4, 0)

    def test_increment_is_llr(self, small_codebook, small_dists):
        cb = small_codebook
        sym = int(cb.fingerprints[1, 9])
        s1 = sprt_step(SprtState.initial(cb.n_users), cb, small_dists, SprtConfig(), 9, sym)
        sc = position_scores(cb, 9, sym)
        want = np.log10(small_dists.p_col[small_dists.bin_index(sc)] / small_dists.p_inn[small_dists.bin_index(sc)])
        assert s1.W == pytest.approx(want)
        assert s1.S == pytest.approx(sc)

    def test_accuse_on_b(self, small_codebook, small_dists):
        cfg = SprtConfig(a=-1e9, b=1e-9, use_z_threshold=False)
        cb = small_codebook
        s = sprt_step(SprtState.initial(cb.n_users), cb, small_dists, cfg, 0, int(cb.fingerprints[0, 0]))
        assert 0 in s.accused and s.decision == "accused" and s.t_star == 1

    def test_exonerate_needs_everyone_below_a(self, small_codebook, small_dists):
        cb = small_codebook
        cfg = SprtConfig(a=-1e-9, b=1e9, use_z_threshold=False)
        s = sprt_step(SprtState.initial(cb.n_users), cb, small_dists, cfg, 0, int(cb.fingerprints[0, 0]))
        # holders of the answered symbol gain evidence, so nobody is exonerated yet
        assert s.decision == "undecided"
        assert not (s.status == Status.EXONERATED).any()

    def test_bad_symbol(self, small_codebook, small_dists):
        with pytest.raises(IndexError):
            sprt_step(SprtState.initial(30), small_codebook, small_dists, SprtConfig(), 0, 10)


class TestSequentialAccuse:
    def test_identity_channel_catches_leaker(self, small_codebook, small_dists):
        ans = _identity_answers(small_codebook, 3)
        res = sequential_accuse(small_codebook, small_dists, SprtConfig(), lambda p: ans[p], seed=1)
        assert res.decision == "accused"
        assert res.accused == (3,)
        assert res.t_star == res.state.t < 100

    def test_oracle_error(self, small_codebook, small_dists):
        calls = []

        def flaky(pos):
            calls.append(pos)
            if len(calls) == 4:
                raise ConnectionError("timeout")
            return 0

        with pytest.raises(OracleError) as info:
            sequential_accuse(small_codebook, small_dists, SprtConfig(), flaky, seed=0)
        assert info.value.positions_consumed == 3

    def test_undecided_when_positions_run_out(self, small_dists):
        cb = generate_codebook(TardosParams(q=10, m=3, kappa=0.1, c0=6, seed=1), 30)
        res = sequential_accuse(cb, small_dists, SprtConfig(), lambda p: 0, seed=0)
        assert res.decision == "undecided" and res.t_star is None and res.state.t == 3

    @settings(max_examples=25, deadline=None)
    @given(
        seed=st.integers(0, 2**32),
        rho=st.sampled_from([0.0, 0.1, 0.3]),
        c=st.integers(1, 6),
        strategy=st.sampled_from(["majority", "minority", "interleaving"]),
        block=st.sampled_from([1, 7, 64]),
    )
    def test_block_path_matches_stepwise(self, small_codebook, small_dists, seed, rho, c, strategy, block):
        cb = small_codebook
        colluders = np.random.default_rng(seed).choice(cb.n_users, c, replace=False)
        spec = ChannelSpec(tuple(colluders), strategy=strategy, ma_violation_rate=rho, seed=seed)
        oracle = make_oracle(spec, cb)
        cfg = SprtConfig(1e-3, 1e-3).for_family(cb.n_users)
        a = sequential_accuse(cb, small_dists, cfg, oracle, seed=seed)
        b = accuse_answers(cb, small_dists, cfg, oracle.answers, seed=seed, block=block)
        assert (a.decision, a.accused, a.t_star) == (b.decision, b.accused, b.t_star)
        assert np.array_equal(a.state.W, b.state.W) and np.array_equal(a.state.S, b.state.S)
        assert np.array_equal(a.state.status, b.state.status)

    def test_fast_path_rejects_repeats(self, small_codebook, small_dists):
        with pytest.raises(DuplicatePositionError):
            accuse_answers(small_codebook, small_dists, SprtConfig(), np.zeros(200, int), query_order=[1, 1])


class TestBaseline:
    def test_fpr_is_binomial_pmf(self):
        assert baseline_independent_fpr(6, 6, 0.1) == pytest.approx(1e-6)
        assert baseline_independent_fpr(5, 3, 0.1) == pytest.approx(10 * 1e-3 * 0.81)

    @pytest.mark.parametrize("eps1, p, t", [(1e-6, 0.1, 6), (1e-2, 0.1, 2), (1e-6, 0.5, 20), (0.5, 0.1, 1)])
    def test_min_queries(self, eps1, p, t):
        assert baseline_min_queries(eps1, p) == t

    def test_invalid(self):
        with pytest.raises(ValueError):
            baseline_independent_fpr(3, 4, 0.1)
        with pytest.raises(ValueError):
            baseline_min_queries(1e-6, 1.0)
