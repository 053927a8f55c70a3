import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moca import tensor as T
from moca.calibration import (
    CalibConfig,
    Candidate,
    RankedCandidateSet,
    TrainState,
    batch_sequence_costs,
    ema_update,
    generate_candidates,
    kendall_agreement,
    moca_loss,
    moca_train_step,
    positional_weights,
    rank_candidates,
    ranking_loss,
    sequence_cost,
)
from moca.decoding import DecodeConfig, TableModel, beam_search, greedy_decode
from moca.errors import ConfigError, ContractError
from moca.model import EOS, Example, ModelConfig, TransformerParams, forward_logprobs, init_params, mle_loss
from moca.selftest import gradient_errors, random_point
from moca.tensor import AdamState

SMALL = ModelConfig(vocab_size=12, d_model=16, n_heads=2, n_layers=1, d_ff=32, max_positions=16)
DECODE = DecodeConfig(beam_size=6, num_groups=6, diversity_strength=1.0, length_penalty=1.0, max_length=6)


def weights_oracle(n):
    z = sum(Fraction(1, i * i) for i in range(1, n + 1))
    return [Fraction(n, (n + 1 - t) ** 2) / z for t in range(1, n + 1)]


def pairwise_oracle(costs, margin):
    return sum(max(0.0, costs[j] - costs[i] + (j - i) * margin) for i in range(len(costs)) for j in range(i + 1, len(costs)))


@pytest.fixture(scope="module")
def model64():
    return random_point(SMALL, 4)


@pytest.fixture(scope="module")
def sharp32():
    p = init_params(SMALL, 11)
    return p.replace({k: v * 3 if v.ndim == 2 else v for k, v in p.tensors.items()})


@pytest.fixture
def ranked(model64):
    cands = [Candidate((4, 5, EOS), -1.0), Candidate((6, EOS), -2.0), Candidate((4, 6, 7, EOS), -0.5), Candidate((7, 8, 9), -3.0)]
    return rank_candidates(cands, (4, 5, 6), source=(9, 8, 7))


def calib(**kw):
    base = dict(K=6, decode=DECODE, cost_alpha=1.0)
    base.update(kw)
    return CalibConfig(**base)


class TestPositionalWeights:
    def test_single_position(self):
        assert positional_weights(1).tolist() == [1.0]

    def test_three_positions(self):
        np.testing.assert_allclose(positional_weights(3), [12 / 49, 27 / 49, 108 / 49], rtol=0, atol=1e-15)
        assert weights_oracle(3) == [Fraction(12, 49), Fraction(27, 49), Fraction(108, 49)]

    def test_mean_one_and_increasing(self):
        for n in range(1, 513):
            w = positional_weights(n)
            assert abs(w.mean() - 1) <= 1e-12
            assert np.all(np.diff(w) > 0)

    def test_matches_rational_oracle(self):
        for n in (2, 5, 17, 64):
            np.testing.assert_allclose(positional_weights(n), [float(x) for x in weights_oracle(n)], rtol=1e-14)

    def test_constant_and_errors(self):
        assert positional_weights(4, "constant").tolist() == [1.0] * 4
        with pytest.raises(ContractError):
            positional_weights(0)
        with pytest.raises(ContractError):
            positional_weights(3, "cubic")


class TestSequenceCost:
    def test_uniform_model(self):
        cfg = ModelConfig(vocab_size=50, d_model=8, n_heads=2, n_layers=1, d_ff=16)
        p = init_params(cfg, 0, np.float64)
        p = p.replace({**p.tensors, "out.w": np.zeros_like(p.tensors["out.w"])})
        assert sequence_cost(p, (4, 5), (6, 7, 8, EOS), 1.0).item() == pytest.approx(math.log(50), abs=1e-12)

    def test_certain_model_costs_nothing(self, model64):
        b = np.full(12, -1e3)
        b[EOS] = 0.0
        p = model64.replace({**model64.tensors, "out.w": np.zeros_like(model64.tensors["out.w"]), "out.b": b})
        assert sequence_cost(p, (4,), (EOS,), 2.0).item() == pytest.approx(0.0, abs=1e-12)

    def test_sign_bridge_with_decoder(self, sharp32):
        cfg = DecodeConfig(beam_size=4, length_penalty=1.0, max_length=8)
        for src in [(4, 5, 6), (10, 9)]:
            for h in beam_search(sharp32, src, cfg):
                cost = sequence_cost(sharp32, src, h.tokens, 1.0).item()
                assert cost == pytest.approx(-h.normalized_score, abs=1e-4)

    def test_positional_cost_by_hand(self, model64):
        toks = (4, 5, EOS)
        lp = forward_logprobs(model64, (7,), (4, 5)).data
        w = positional_weights(3)
        ref = -sum(w[t] * lp[t, tok] for t, tok in enumerate(toks)) / 3**2.0
        assert sequence_cost(model64, (7,), toks, 2.0, "positional").item() == pytest.approx(ref, abs=1e-12)

    def test_corruption_that_lowers_likelihood_raises_cost(self, model64):
        src = (4, 5, 6)
        g = greedy_decode(model64, src, DecodeConfig(beam_size=1, max_length=6))
        base = sequence_cost(model64, src, g.tokens, 2.0).item()
        for t in range(len(g.tokens) - 1):
            for tok in range(4, 12):
                if tok == g.tokens[t]:
                    continue
                bad = g.tokens[:t] + (tok,) + g.tokens[t + 1 :]
                lp = forward_logprobs(model64, src, bad[:-1]).data
                if sum(lp[i, x] for i, x in enumerate(bad)) < g.sum_logprob:
                    assert sequence_cost(model64, src, bad, 2.0).item() > base

    def test_batch_matches_single(self, model64):
        srcs, toks = [(4,), (5, 6)], [(7, 8, EOS), (9, 9, 9)]
        batch = batch_sequence_costs(model64, srcs, toks, 0.6, "positional").data
        for b in range(2):
            assert batch[b] == pytest.approx(sequence_cost(model64, srcs[b], toks[b], 0.6, "positional").item(), abs=1e-12)


class TestRankingLoss:
    def test_worked_examples(self):
        assert ranking_loss([1.5, 1.0], 0.001).item() == 0.0
        assert ranking_loss([1.0, 1.5], 0.001).item() == pytest.approx(0.501, abs=1e-12)
        assert ranking_loss([3.0, 2.0, 1.0], 0.5).item() == 0.0
        assert ranking_loss([3.0, 2.0, 1.0], 1.5).item() == pytest.approx(2.0, abs=1e-12)
        assert pairwise_oracle([3.0, 2.0, 1.0], 1.5) == pytest.approx(2.0)

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=8), st.floats(0, 1))
    @settings(max_examples=200, deadline=None)
    def test_matches_pair_sum_and_zero_condition(self, costs, margin):
        got = ranking_loss(costs, margin).item()
        assert got == pytest.approx(pairwise_oracle(costs, margin), abs=1e-9)
        satisfied = all(costs[j] <= costs[i] - (j - i) * margin for i in range(len(costs)) for j in range(i + 1, len(costs)))
        assert (got == 0.0) == satisfied or abs(got) < 1e-12

    @given(st.lists(st.integers(-100, 100), min_size=2, max_size=8), st.integers(-100, 100))
    def test_shift_invariant_without_margin(self, costs, c):
        costs = [x / 8 for x in costs]  # dyadic values keep the shift exact
        shifted = [x + c / 4 for x in costs]
        assert ranking_loss(costs, 0.0).item() == ranking_loss(shifted, 0.0).item()

    def test_needs_two(self):
        with pytest.raises(ContractError):
            ranking_loss([1.0], 0.1)


class TestRankCandidates:
    def test_ascending_metric(self):
        gold = (4, 5, 6, 7)
        cands = [Candidate((4, 5, EOS), 0.0), Candidate((4, 5, 6, 7, EOS), 0.0), Candidate((9, EOS), 0.0)]
        rs = rank_candidates(cands, gold)
        scores = [c.metric_score for c in rs.candidates]
        assert scores == sorted(scores) and scores[-1] == 1.0
        assert rs.candidates[-1].content == gold

    def test_ties_keep_generator_order(self):
        cands = [Candidate((9, EOS), -3.0), Candidate((10, EOS), -1.0), Candidate((11, EOS), -2.0)]
        rs = rank_candidates(cands, (4,))
        assert [c.generator_score for c in rs.candidates] == [-1.0, -2.0, -3.0]

    def test_needs_two(self):
        with pytest.raises(ContractError):
            rank_candidates([Candidate((4, EOS), 0.0)], (4,))


class TestMocaLoss:
    def test_components_recompose(self, model64, ranked):
        cfg = calib(mle_weight=0.3, margin=0.05, cost_alpha=2.0, weighting="positional")
        ex = Example(ranked.source, ranked.gold)
        costs = [sequence_cost(model64, ex.source, c.tokens, 2.0, "positional").item() for c in ranked.candidates]
        want = pairwise_oracle(costs, 0.05) + 0.3 * mle_loss(model64, ex).item()
        assert moca_loss(model64, ranked, ex, cfg).item() == pytest.approx(want, abs=1e-6)
        no_mle = calib(mle_weight=0.0, margin=0.05, cost_alpha=2.0, weighting="positional")
        assert moca_loss(model64, ranked, ex, no_mle).item() == pytest.approx(ranking_loss(costs, 0.05).item(), abs=1e-9)

    def test_ordered_set_has_zero_loss_and_gradient(self, model64, ranked):
        ex = Example(ranked.source, ranked.gold)
        by_cost = sorted(ranked.candidates, key=lambda c: -sequence_cost(model64, ex.source, c.tokens, 1.0).item())
        ordered = RankedCandidateSet(by_cost, ranked.source, ranked.gold)
        cfg = calib(mle_weight=0.0, margin=0.0)
        with T.Tape() as tape:
            loss = moca_loss(model64, ordered, ex, cfg)
        grads = T.grad_by_name(tape, T.backward(tape, loss), model64.leaves())
        assert loss.item() == 0.0
        assert all(np.all(g == 0) for g in grads.values())

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradient_matches_finite_differences(self, seed):
        assert max(gradient_errors(seed, "moca").values()) < 1e-5

    def test_fit_on_frozen_set_puts_best_candidate_cheapest(self):
        p = init_params(SMALL, 2, np.float64)
        gold = (4, 5, 6)
        cands = [Candidate((4, 5, 6, EOS), 0.0), Candidate((4, 5, EOS), 0.0), Candidate((7, 8, EOS), 0.0), Candidate((4, 9, 6, EOS), 0.0)]
        rs = rank_candidates(cands, gold, source=(6, 5, 4))
        ex = Example(rs.source, gold)
        cfg = calib(mle_weight=0.0, margin=0.01)
        adam = AdamState(lr=1e-2)
        for _ in range(300):
            with T.Tape() as tape:
                loss = moca_loss(p, rs, ex, cfg)
            if loss.item() == 0.0:
                break
            p, adam = T.adam_step(p, T.grad_by_name(tape, T.backward(tape, loss), p.leaves()), adam)
        assert loss.item() == 0.0
        costs = [sequence_cost(p, ex.source, c.tokens, 1.0).item() for c in rs.candidates]
        assert int(np.argmin(costs)) == int(np.argmax([c.metric_score for c in rs.candidates]))


class TestEma:
    def test_fixed_point_copy_and_arithmetic(self, model64):
        theta = init_params(SMALL, 9, np.float64)
        assert ema_update(model64, theta, 1.0).bitwise_equal(model64)
        assert ema_update(model64, theta, 0.0).bitwise_equal(theta)
        xi = {"w": np.array([1.0])}
        out = ema_update(TransformerParams(SMALL, xi), TransformerParams(SMALL, {"w": np.array([0.0])}), 0.99)
        assert out.tensors["w"][0] == 0.99

    def test_equal_models_stay_equal(self, model64):
        # m*x + (1-m)*x is x up to one rounding per update, not bitwise
        xi = model64
        for m in (0.3, 0.99, 0.5) * 20:
            xi = ema_update(xi, model64, m)
        for k, v in model64.tensors.items():
            np.testing.assert_allclose(xi.tensors[k], v, rtol=1e-14, atol=1e-15)

    def test_layout_mismatch(self, model64):
        with pytest.raises(ContractError):
            ema_update(model64, init_params(ModelConfig(vocab_size=13, d_model=16, n_heads=2, n_layers=1, d_ff=32, max_positions=16), 0), 0.5)


class TestCandidates:
    def test_one_hot_model_signals_skip(self):
        m = TableModel(8, {(): {4: 1.0}}, default={EOS: 1.0})
        assert len(generate_candidates(m, (4,), calib(decode=DecodeConfig(beam_size=4, num_groups=4, max_length=4)))) == 1

    def test_empty_candidates_dropped_and_bounded(self):
        m = TableModel(8, {(): {EOS: 0.5, 4: 0.3, 5: 0.2}}, default={EOS: 1.0})
        cands = generate_candidates(m, (4,), calib(K=2, decode=DecodeConfig(beam_size=4, num_groups=4, diversity_strength=1.0, max_length=4)))
        assert [c.tokens for c in cands] == [(4, EOS), (5, EOS)]

    def test_deterministic_unique_and_within_k(self, sharp32):
        cfg = calib()
        a = generate_candidates(sharp32, (4, 5, 6), cfg)
        assert 2 <= len(a) <= cfg.K
        assert len({c.tokens for c in a}) == len(a)
        assert a == generate_candidates(sharp32, (4, 5, 6), cfg)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            calib(K=1).validate()
        with pytest.raises(ConfigError):
            calib(momentum=1.5).validate()
        with pytest.raises(ConfigError):
            calib(weighting="sometimes").validate()


class TestKendall:
    def test_agreement(self):
        assert kendall_agreement([3.0, 2.0, 1.0], [0.1, 0.5, 0.9]) == pytest.approx(1.0)
        assert kendall_agreement([1.0, 2.0, 3.0], [0.1, 0.5, 0.9]) == pytest.approx(-1.0)
        assert math.isnan(kendall_agreement([1.0, 1.0], [0.1, 0.5]))


def start_state(theta, lr=1e-3):
    return TrainState(theta, theta, AdamState(lr=lr), 0, {}, np.random.default_rng(0))


BATCH = [Example((4, 5, 6), (6, 5, 4)), Example((7, 8), (8, 7)), Example((9, 10, 11, 4), (4, 11, 10, 9))]


class TestTrainStep:
    def test_frozen_step_changes_only_counters(self, sharp32):
        s0 = start_state(sharp32, lr=0.0)
        s1, rep = moca_train_step(s0, BATCH, calib(momentum=1.0))
        assert s1.theta.bitwise_equal(sharp32) and s1.xi.bitwise_equal(sharp32)
        assert s1.step == 1 and s1.adam.step == 1 and rep.generator_calls == 3

    def test_generator_moves_only_by_momentum(self, sharp32):
        s, m = start_state(sharp32), 0.9
        for _ in range(3):
            prev = s.xi
            s, rep = moca_train_step(s, BATCH, calib(momentum=m))
            want = ema_update(prev, s.theta, m)
            assert s.xi.bitwise_equal(want)
            assert rep.skipped == 0 and rep.ranking_loss >= 0

    def test_deterministic_ten_steps(self, sharp32):
        runs = []
        for _ in range(2):
            s = start_state(sharp32)
            for _ in range(10):
                s, _ = moca_train_step(s, BATCH[:2], calib(K=4, decode=DecodeConfig(beam_size=4, num_groups=4, diversity_strength=1.0, max_length=5)))
            runs.append(s)
        assert runs[0].theta.bitwise_equal(runs[1].theta) and runs[0].xi.bitwise_equal(runs[1].xi)

    def test_supplied_candidates_skip_generation(self, sharp32):
        fixed = [Candidate((4, EOS), -1.0), Candidate((5, 4, EOS), -2.0)]
        _, rep = moca_train_step(start_state(sharp32), BATCH, calib(), candidates_for=lambda ex: fixed)
        assert rep.generator_calls == 0 and rep.skipped == 0

    def test_fully_skipped_batch_is_a_no_op(self, sharp32):
        s0 = start_state(sharp32)
        s1, rep = moca_train_step(s0, BATCH, calib(), candidates_for=lambda ex: [])
        assert s1.theta is s0.theta and s1.step == 1 and rep.skip_rate == 1.0 and math.isnan(rep.loss)
