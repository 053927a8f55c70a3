import math

import numpy as np
import pytest

from moca import tensor as T
from moca.errors import ConfigError, ContractError
from moca.model import (
    BOS,
    EOS,
    Example,
    ModelConfig,
    Vocab,
    batch_mle_loss,
    decode,
    decode_step,
    encode,
    forward_logprobs,
    init_params,
    mle_loss,
    param_shapes,
    positional_accuracy,
    teacher_forced,
)

TINY = ModelConfig(vocab_size=12, d_model=8, n_heads=2, n_layers=2, d_ff=16, max_positions=10)


@pytest.fixture(scope="module")
def tiny64():
    return init_params(TINY, 3, np.float64)


def closed_form_count(V, d, L, ff, P):
    attn = 4 * (d * d + d)
    ffn = d * ff + ff + ff * d + d
    ln = 2 * d
    enc = L * (ln + attn + ln + ffn) + ln
    dec = L * (ln + attn + ln + attn + ln + ffn) + ln
    return 2 * V * d + 2 * P * d + enc + dec + d * V + V


class TestVocab:
    def test_round_trip(self):
        v = Vocab.synthetic(10)
        assert v.encode("t0 t5") == (4, 9)
        assert v.decode((BOS, 4, 9, EOS)) == "t0 t5"
        assert all(v.stoi[v.itos[i]] == i for i in range(len(v)))

    def test_unknown_maps_to_unk(self):
        assert Vocab.synthetic(6).encode("t0 zzz") == (4, 3)

    def test_reserved_names_rejected(self):
        with pytest.raises(ConfigError):
            Vocab(["<eos>"])


class TestInit:
    def test_deterministic(self):
        assert init_params(TINY, 1).bitwise_equal(init_params(TINY, 1))
        assert not init_params(TINY, 1).bitwise_equal(init_params(TINY, 2))

    def test_desk_parameter_count(self):
        cfg = ModelConfig(vocab_size=50)
        assert init_params(cfg, 0).count() == closed_form_count(50, 64, 2, 256, 32) == 247474

    def test_shapes_and_init_values(self):
        p = init_params(TINY, 0)
        assert {k: v.shape for k, v in p.tensors.items()} == param_shapes(TINY)
        assert np.all(p.tensors["dec.ln.g"] == 1) and np.all(p.tensors["out.b"] == 0)
        bound = math.sqrt(6 / (8 + 12))
        assert np.abs(p.tensors["out.w"]).max() <= bound

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            init_params(ModelConfig(vocab_size=10, d_model=10, n_heads=4), 0)


class TestForward:
    def test_rows_normalized(self, tiny64):
        lp = forward_logprobs(tiny64, (4, 5, 6), (7, 8)).data
        assert lp.shape == (3, 12)
        np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-5)

    def test_zero_output_projection_is_uniform(self, tiny64):
        p = tiny64.replace({**tiny64.tensors, "out.w": np.zeros((8, 12)), "out.b": np.zeros(12)})
        lp = forward_logprobs(p, (4, 5), (6, 7, 8)).data
        np.testing.assert_allclose(lp, -math.log(12), atol=1e-12)

    def test_causality_bitwise(self, tiny64):
        a = forward_logprobs(tiny64, (4, 5, 6), (7, 8, 9, 10)).data
        b = forward_logprobs(tiny64, (4, 5, 6), (7, 8, 11, 4)).data
        # rows 0..2 see only bos, 7, 8
        assert a[:3].tobytes() == b[:3].tobytes()

    def test_over_length_rejected(self, tiny64):
        with pytest.raises(ContractError):
            forward_logprobs(tiny64, tuple([4] * 11), (5,))
        with pytest.raises(ContractError):
            forward_logprobs(tiny64, (4,), tuple([5] * 10))

    def test_batch_matches_single(self, tiny64):
        sources = [(4, 5), (6, 7, 8, 9), (10,)]
        targets = [(11, 4, 5), (6,), (7, 8)]
        logp, _, lengths = teacher_forced(tiny64, sources, targets)
        for b, (s, t) in enumerate(zip(sources, targets)):
            single = forward_logprobs(tiny64, s, t).data
            np.testing.assert_allclose(logp.data[b, : lengths[b]], single, atol=1e-6)

    def test_incremental_decoder_matches_full_pass(self, tiny64):
        src = [(4, 5, 6), (7, 8)]
        tgt = np.array([[BOS, 9, 10, 11], [BOS, 4, 4, 5]])
        with T.no_tape():
            mem = encode(tiny64, src)
            full = decode(tiny64, mem, tgt).data
            cache = None
            for pos in range(tgt.shape[1]):
                lp, cache = decode_step(tiny64, mem, cache, tgt[:, pos], pos)
                np.testing.assert_allclose(lp.data, full[:, pos], atol=1e-10)


class TestMle:
    def test_uniform_model_loss_is_log_vocab(self):
        cfg = ModelConfig(vocab_size=50, d_model=8, n_heads=2, n_layers=1, d_ff=16)
        p = init_params(cfg, 0, np.float64)
        p = p.replace({**p.tensors, "out.w": np.zeros_like(p.tensors["out.w"])})
        assert mle_loss(p, Example((4, 5, 6), (7, 8))).item() == pytest.approx(math.log(50), abs=1e-4)

    def test_matches_scalar_reference(self, tiny64):
        ex = Example((4, 5, 6), (7, 8, 9))
        lp = forward_logprobs(tiny64, ex.source, ex.target).data
        gold = list(ex.target) + [EOS]
        ref = -sum(lp[t][g] for t, g in enumerate(gold)) / len(gold)
        assert mle_loss(tiny64, ex).item() == pytest.approx(ref, abs=1e-12)

    def test_confident_model_has_near_zero_loss(self, tiny64):
        # zero every block's output so the decoder state is layer-norm(token embedding),
        # then point the output projection at the gold successor of each input token
        t = {k: np.zeros_like(v) if k.endswith((".wo", ".bo", ".w2", ".b2")) or k == "tgt_pos" else v for k, v in tiny64.tensors.items()}
        emb = np.zeros((12, 8))
        emb[BOS, :2] = [1.0, -1.0]
        emb[4, 2:4] = [1.0, -1.0]
        t["tgt_embed"] = emb
        t["dec.ln.g"], t["dec.ln.b"] = np.ones(8), np.zeros(8)
        u_bos = (emb[BOS] - emb[BOS].mean()) / emb[BOS].std()
        u_4 = (emb[4] - emb[4].mean()) / emb[4].std()
        w = np.zeros((8, 12))
        w[:, 4] = 10 * u_bos
        w[:, EOS] = 10 * u_4
        t["out.w"], t["out.b"] = w, np.zeros(12)
        assert mle_loss(tiny64.replace(t), Example((5, 6), (4,))).item() < 1e-6

    def test_batch_loss_is_mean_of_examples(self, tiny64):
        exs = [Example((4, 5), (6, 7, 8)), Example((9,), (10,))]
        singles = [mle_loss(tiny64, e).item() for e in exs]
        assert batch_mle_loss(tiny64, exs).item() == pytest.approx(np.mean(singles), abs=1e-12)

    def test_gradient_matches_finite_differences(self, tiny64):
        ex = Example((4, 5, 6), (7, 8))

        def fn(leaves):
            from moca.model import TransformerParams

            return mle_loss(TransformerParams.from_leaves(TINY, leaves), ex)

        rng = np.random.default_rng(0)
        point = {k: v + 0.2 * rng.standard_normal(v.shape) for k, v in tiny64.tensors.items()}
        assert T.finite_difference_check(fn, point, max_coords=16) < 1e-5

    def test_relabeling_invariance(self):
        cfg = ModelConfig(vocab_size=8, d_model=8, n_heads=2, n_layers=1, d_ff=16)
        p = init_params(cfg, 5, np.float64)
        perm = np.arange(8)
        perm[4:] = [6, 4, 7, 5]  # permute content ids only
        t = dict(p.tensors)
        inv = np.argsort(perm)
        for name in ("src_embed", "tgt_embed"):
            t[name] = p.tensors[name][inv]
        t["out.w"] = p.tensors["out.w"][:, inv]
        t["out.b"] = p.tensors["out.b"][inv]
        q = p.replace(t)
        ex = Example((4, 5, 6), (7, 4))
        relabeled = Example(tuple(int(perm[i]) for i in ex.source), tuple(int(perm[i]) for i in ex.target))
        assert mle_loss(p, ex).item() == pytest.approx(mle_loss(q, relabeled).item(), abs=1e-6)

    def test_empty_target_rejected(self):
        with pytest.raises(ContractError):
            Example((4,), ())


class TestPositionalAccuracy:
    def test_perfect_and_chance_levels(self):
        cfg = ModelConfig(vocab_size=50, d_model=8, n_heads=2, n_layers=1, d_ff=16)
        p = init_params(cfg, 0, np.float64)
        uniform = p.replace({**p.tensors, "out.w": np.zeros_like(p.tensors["out.w"])})
        rng = np.random.default_rng(0)
        data = [Example(tuple(rng.integers(4, 50, 6)), tuple(rng.integers(4, 50, 9))) for _ in range(20)]
        # uniform rows tie everywhere, argmax picks id 0 (pad) which is never gold
        for _, acc, _ in positional_accuracy(uniform, data, 5):
            assert acc == 0.0
        eos_only = [Example(e.source, (4,)) for e in data]
        forced = p.replace({**p.tensors, "out.w": np.zeros_like(p.tensors["out.w"]), "out.b": np.where(np.arange(50) == 4, 5.0, 0.0)})
        buckets = positional_accuracy(forced, eos_only, 1)
        assert buckets[0][1] == 1.0 and buckets[1][1] == 0.0  # always predicts t0, gold eos at position 1

    def test_buckets_and_counts(self, tiny64):
        data = [Example((4, 5), tuple([6] * n)) for n in (1, 3, 6)]
        buckets = positional_accuracy(tiny64, data, 5)
        assert [b for b, _, _ in buckets] == [(0, 5), (5, 10)]
        assert [c for _, _, c in buckets] == [2 + 4 + 5, 2]
