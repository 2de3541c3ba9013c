import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import tiny_batch, tiny_model
from triad.autodiff import Tensor
from triad.corpus import BOS, EOS, PAD
from triad.errors import ContractError
from triad.generator import (
    Generator,
    decode_hidden,
    generate,
    generation_loss,
    generator_mask,
    greedy_decode,
    weighted_words,
    word_distribution,
)
from triad.optim import Adam


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def _gen(seed=0, v=12, e=8, max_len=8):
    return Generator(np.random.default_rng(seed), v, e, 2, 2, max_len).astype(np.float64)


class TestMask:
    def test_structure(self):
        m = generator_mask(2, 3)
        expected = np.array([
            [1, 1, 0, 0, 0],
            [1, 1, 0, 0, 0],
            [1, 1, 1, 0, 0],
            [1, 1, 1, 1, 0],
            [1, 1, 1, 1, 1],
        ], dtype=bool)
        np.testing.assert_array_equal(m, expected)


class TestDecodeHidden:
    def test_shape(self):
        gen = _gen()
        d = T(np.random.default_rng(1).normal(size=(3, 8)))
        assert decode_hidden([BOS, 5, 6], d, gen).shape == (3, 8)

    def test_bos_only_depends_on_slots(self):
        gen = _gen()
        rng = np.random.default_rng(2)
        d = T(rng.normal(size=(3, 8)))
        h1 = decode_hidden([BOS], d, gen).data
        h2 = decode_hidden([BOS, 7, 4, 9], d, gen).data
        np.testing.assert_allclose(h2[0], h1[0], atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 7))
    def test_causality_exact(self, seed, length):
        rng = np.random.default_rng(seed)
        gen = _gen(seed)
        d = T(rng.normal(size=(3, 8)))
        prefix = rng.integers(3, 12, size=length)
        prefix[0] = BOS
        i = int(rng.integers(length - 1))
        other = prefix.copy()
        other[i + 1:] = rng.integers(3, 12, size=length - i - 1)
        a = decode_hidden(prefix, d, gen).data
        b = decode_hidden(other, d, gen).data
        np.testing.assert_array_equal(a[:i + 1], b[:i + 1])

    def test_disease_slots_are_a_set(self):
        gen = _gen()
        rng = np.random.default_rng(3)
        d = rng.normal(size=(4, 8))
        a = decode_hidden([BOS, 5, 6], T(d), gen).data
        b = decode_hidden([BOS, 5, 6], T(d[[2, 0, 3, 1]]), gen).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_too_long(self):
        gen = _gen(max_len=4)
        d = T(np.zeros((2, 8)))
        with pytest.raises(ContractError):
            decode_hidden([BOS, 4, 4, 4, 4], d, gen)
        with pytest.raises(ContractError):
            decode_hidden(np.zeros((1, 0), dtype=int), T(np.zeros((1, 2, 8))), gen)

    def test_conditioning_after_training(self):
        model = tiny_model(0)
        batch = tiny_batch(0, dtype=np.float32)
        opt = Adam(model.parameters(), lr=3e-3)
        for _ in range(30):
            model.train_step(batch, opt)
        d = model.embed(batch, "train").emb.d_enriched
        h = decode_hidden(batch.prefix, d, model.generator).data
        h0 = decode_hidden(batch.prefix, Tensor(np.zeros_like(d.data)), model.generator).data
        assert np.linalg.norm(h - h0) / np.linalg.norm(h) > 1e-3


class TestWordDistribution:
    def test_zero_hidden_uniform(self):
        W = T(np.random.default_rng(0).normal(size=(5, 3)))
        np.testing.assert_allclose(word_distribution(T(np.zeros((2, 3))), W).data, 0.2)

    def test_two_words_closed_form(self):
        p = word_distribution(T([[1.0, 0.0]]), T([[2.0, 0.0], [0.0, 1.0]])).data
        expected = 1.0 / (1.0 + math.exp(-2.0))
        np.testing.assert_allclose(p, [[expected, 1 - expected]], atol=1e-12)

    @given(st.integers(0, 10_000), st.integers(1, 6), st.integers(2, 40), st.integers(1, 16))
    def test_rows_normalised(self, seed, l, v, e):
        rng = np.random.default_rng(seed)
        h = Tensor(rng.normal(size=(l, e)).astype(np.float32) * 3)
        W = Tensor(rng.normal(size=(v, e)).astype(np.float32))
        np.testing.assert_allclose(word_distribution(h, W).data.sum(-1), 1.0, atol=1e-6)

    def test_weight_tying_shares_storage(self):
        model = tiny_model(0)
        gen = model.generator
        names = [n for n, _ in gen.named_parameters()]
        assert names.count("embedding") == 1
        # both roles read the same Tensor object, so an update to one moves the other
        before = decode_hidden([BOS, 5], model.embed(tiny_batch(0), "infer").emb.d_enriched[0], gen).data
        gen.embedding.data[5] += 1.0
        after = decode_hidden([BOS, 5], model.embed(tiny_batch(0), "infer").emb.d_enriched[0], gen).data
        assert not np.array_equal(before, after)
        tokens, p_word = greedy_decode(model.embed(tiny_batch(0), "infer").emb.d_enriched, gen, 1)
        assert p_word.shape[-1] == gen.embedding.shape[0]


class TestGenerationLoss:
    def test_perfect(self):
        targets = np.array([2, 0, 1])
        p = T(np.eye(3)[targets])
        assert generation_loss(p, targets, pad_id=-1).item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_is_log_v(self):
        p = T(np.full((4, 8), 1 / 8))
        assert generation_loss(p, np.array([3, 4, 5, 6])).item() == pytest.approx(math.log(8), abs=1e-12)

    def test_two_positions(self):
        p = T([[0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.25, 0.25]])
        loss = generation_loss(p, np.array([3, 1])).item()
        assert loss == pytest.approx(-(math.log(0.4) + math.log(0.25)) / 2, abs=1e-12)

    def test_padding_excluded(self):
        p = T([[0.1, 0.2, 0.3, 0.4], [0.9, 0.05, 0.03, 0.02]])
        loss = generation_loss(p, np.array([3, PAD])).item()
        assert loss == pytest.approx(-math.log(0.4), abs=1e-12)

    def test_all_padding(self):
        with pytest.raises(ContractError):
            generation_loss(T(np.full((2, 4), 0.25)), np.array([PAD, PAD]))


class TestWeightedWords:
    def test_one_hot_selects_row(self):
        W = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(weighted_words(T(np.eye(5)[[4, 1]]), T(W)).data, W[[4, 1]])

    def test_uniform_is_mean(self):
        W = np.random.default_rng(1).normal(size=(5, 3))
        np.testing.assert_allclose(weighted_words(T(np.full((1, 5), 0.2)), T(W)).data, [W.mean(0)], atol=1e-12)

    def test_hand_convex(self):
        out = weighted_words(T([[0.25, 0.75]]), T([[4.0, 0.0], [0.0, 8.0]])).data
        np.testing.assert_array_equal(out, [[1.0, 6.0]])


class TestGreedy:
    def test_one_step(self):
        gen = _gen()
        d = T(np.random.default_rng(0).normal(size=(3, 8)))
        tokens, p_word = greedy_decode(d, gen, 1)
        assert tokens.shape == (1, 2) and tokens[0, 0] == BOS
        assert tokens[0, 1] not in (BOS, PAD)
        assert p_word.shape == (1, 1, 12)

    def test_deterministic(self):
        d = T(np.random.default_rng(1).normal(size=(2, 3, 8)))
        a = greedy_decode(d, _gen(5), 7)
        b = greedy_decode(d, _gen(5), 7)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_stops_at_eos_and_pads(self):
        gen = _gen()
        gen.embedding.data[EOS] *= 0.0
        gen.embedding.data[EOS] += 50.0 * np.sign(gen.stack.norm.bias.data + 1e-3)
        gen.stack.norm.gain.data[:] = 0.0
        gen.stack.norm.bias.data[:] = np.sign(gen.stack.norm.bias.data + 1e-3)
        tokens, p_word = greedy_decode(T(np.zeros((2, 3, 8))), gen, 5)
        np.testing.assert_array_equal(tokens, [[BOS, EOS], [BOS, EOS]])
        assert p_word.shape == (2, 1, 12)

    def test_budget(self):
        with pytest.raises(ContractError):
            greedy_decode(T(np.zeros((3, 8))), _gen(max_len=4), 4)

    def test_generate_state(self):
        gen = _gen()
        d = T(np.random.default_rng(2).normal(size=(3, 8)))
        seq, state = generate(d, gen, 6)
        assert seq[0] == BOS and len(seq) <= 7
        assert state.p_word.shape == (len(seq) - 1, 12)
        np.testing.assert_allclose(state.p_word.sum(-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(state.w_hat, state.p_word @ gen.embedding.data, atol=1e-12)
        np.testing.assert_array_equal(state.p_word.argmax(-1), seq[1:])
