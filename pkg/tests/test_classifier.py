import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from triad.autodiff import Tape, Tensor
from triad.checklist import Checklist, Mode, is_one_hot
from triad.classifier import (
    Phase,
    classification_loss,
    classify_states,
    enrich,
    fuse,
    project_visual,
    state_embedding,
)
from triad.corpus import STATES
from triad.errors import ContractError
from triad.nn import LayerNorm


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


class TestProjectVisual:
    def test_zero_input_gives_biases(self):
        rng = np.random.default_rng(0)
        A, b = T(rng.normal(size=(3, 4, 2))), T(rng.normal(size=(3, 2)))
        np.testing.assert_array_equal(project_visual(T(np.zeros(4)), A, b).data, b.data)

    def test_zero_weights_give_biases(self):
        b = T(np.arange(6.0).reshape(3, 2))
        out = project_visual(T([1.0, -2.0, 3.0, 0.5]), T(np.zeros((3, 4, 2))), b)
        np.testing.assert_array_equal(out.data, b.data)

    def test_hand_oracle(self):
        A = T([[[1.0, 2.0], [3.0, 4.0]]])  # n=1, c=2, e=2
        b = T([[10.0, 20.0]])
        out = project_visual(T([1.0, -1.0]), A, b)
        # A^T x = [1 - 3, 2 - 4]
        np.testing.assert_array_equal(out.data, [[8.0, 18.0]])

    def test_batched_rows(self):
        rng = np.random.default_rng(1)
        A, b, x = T(rng.normal(size=(3, 4, 2))), T(rng.normal(size=(3, 2))), rng.normal(size=(5, 4))
        out = project_visual(T(x), A, b).data
        for j in range(3):
            np.testing.assert_allclose(out[:, j], x @ A.data[j] + b.data[j], atol=1e-12)


class TestFuse:
    def test_no_history_is_layer_norm_of_image(self):
        norm = LayerNorm(4)
        d_img = T(np.random.default_rng(2).normal(size=(3, 4)))
        np.testing.assert_array_equal(fuse(d_img, None, norm).data, norm(d_img).data)
        np.testing.assert_array_equal(fuse(d_img, T(np.zeros((3, 4))), norm).data, norm(d_img).data)

    def test_cancelling_inputs_give_zero_rows(self):
        d = T(np.random.default_rng(3).normal(size=(2, 4)))
        np.testing.assert_allclose(fuse(d, T(-d.data), LayerNorm(4)).data, 0.0)

    def test_rows_standardised(self):
        rng = np.random.default_rng(4)
        out = fuse(T(rng.normal(size=(2, 4))), T(rng.normal(size=(2, 4))), LayerNorm(4)).data
        np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(-1), 1.0, atol=1e-3)


class TestClassifyStates:
    def test_zero_input_uniform(self):
        p = classify_states(T(np.zeros((3, 5))), T(np.random.default_rng(0).normal(size=(4, 5))))
        np.testing.assert_allclose(p.data, 0.25)

    def test_four_states(self):
        assert STATES == ("positive", "negative", "uncertain", "unmentioned")

    def test_closed_form(self):
        p = classify_states(T([[1.0]]), T([[0.0], [math.log(3.0)]]))
        np.testing.assert_allclose(p.data, [[0.25, 0.75]], atol=1e-12)

    @given(st.integers(0, 10_000), st.integers(1, 14), st.integers(2, 6), st.integers(2, 16))
    def test_rows_normalised(self, seed, n, k, e):
        rng = np.random.default_rng(seed)
        p = classify_states(Tensor(rng.normal(size=(n, e)).astype(np.float32) * 4),
                            Tensor(rng.normal(size=(k, e)).astype(np.float32)))
        np.testing.assert_allclose(p.data.sum(-1), 1.0, atol=1e-6)


class TestClassificationLoss:
    def test_perfect_prediction(self):
        y = np.eye(4)[[0, 2]]
        assert classification_loss(T(y), y).item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_is_log_k(self):
        y = np.eye(4)[[1, 3, 0]]
        assert classification_loss(T(np.full((3, 4), 0.25)), y).item() == pytest.approx(math.log(4), abs=1e-12)

    def test_hand_mean(self):
        p = T([[0.5, 0.5], [0.2, 0.8]])
        y = np.array([[1.0, 0.0], [0.0, 1.0]])
        expected = -(math.log(0.5) + math.log(0.8)) / 2
        assert classification_loss(p, y).item() == pytest.approx(expected, abs=1e-12)

    def test_zero_probability_is_clamped(self):
        loss = classification_loss(T([[0.0, 1.0]]), np.array([[1.0, 0.0]])).item()
        assert loss == pytest.approx(-math.log(1e-12))

    def test_rejects_soft_targets(self):
        with pytest.raises(ContractError):
            classification_loss(T([[0.5, 0.5]]), np.array([[0.5, 0.5]]))

    def test_logit_gradient_is_p_minus_y_over_n(self):
        rng = np.random.default_rng(5)
        d, S = T(rng.normal(size=(3, 4))), T(rng.normal(size=(4, 4)))
        y = np.eye(4)[[0, 3, 1]]
        p = classify_states(d, S).data
        # dL/dlogits = (p - y) / n; logits = d S^T, so dL/dd = (p - y) S / n
        grad_logits = (p - y) / 3
        d.requires_grad = True
        with Tape() as tape:
            loss = classification_loss(classify_states(d, S), y)
            tape.backward(loss)
        np.testing.assert_allclose(d.grad, grad_logits @ S.data, atol=1e-12)


class TestStateEmbedding:
    def test_training_selects_rows(self):
        S = T(np.random.default_rng(6).normal(size=(4, 3)))
        y = Checklist.from_indices([2, 0, 3], 4)
        out = state_embedding(y, S, Phase.TRAIN).data
        np.testing.assert_array_equal(out, S.data[[2, 0, 3]])

    def test_training_rows_bitwise_in_float32(self):
        S = Tensor(np.random.default_rng(7).normal(size=(4, 8)).astype(np.float32))
        y = np.eye(4, dtype=np.float32)[[1, 1, 3, 0, 2]]
        out = state_embedding(y, S, Phase.TRAIN).data
        assert np.array_equal(out, S.data[[1, 1, 3, 0, 2]])

    def test_inference_uniform_is_column_mean(self):
        S = T(np.random.default_rng(8).normal(size=(4, 3)))
        p = Checklist(np.full((2, 4), 0.25), Mode.PREDICTED)
        np.testing.assert_allclose(state_embedding(p, S, Phase.INFER).data,
                                   np.broadcast_to(S.data.mean(0), (2, 3)), atol=1e-12)

    def test_inference_convex_combination(self):
        S = T([[1.0, 0.0], [0.0, 4.0]])
        out = state_embedding(T([[0.25, 0.75]]), S, Phase.INFER)
        np.testing.assert_allclose(out.data, [[0.25, 3.0]])

    def test_phase_mode_mismatch(self):
        S = T(np.eye(4))
        with pytest.raises(ContractError):
            state_embedding(Checklist(np.full((1, 4), 0.25), Mode.PREDICTED), S, Phase.TRAIN)
        with pytest.raises(ContractError):
            state_embedding(Checklist.from_indices([1], 4), S, Phase.INFER)
        with pytest.raises(ContractError):
            state_embedding(np.full((1, 4), 0.25), S, Phase.TRAIN)

    def test_inference_passes_gradient_to_probabilities(self):
        p = T([[0.1, 0.2, 0.3, 0.4]], grad=True)
        S = T(np.arange(8.0).reshape(4, 2))
        with Tape() as tape:
            out = state_embedding(p, S, Phase.INFER)
            tape.backward(out[0, 0] + out[0, 1])
        np.testing.assert_allclose(p.grad, [S.data.sum(1)])


class TestEnrich:
    def test_only_fused(self):
        f = T(np.ones((2, 3)))
        np.testing.assert_array_equal(enrich(T(np.zeros((2, 3))), T(np.zeros((2, 3))), f).data, f.data)
        np.testing.assert_array_equal(enrich(None, None, f).data, f.data)

    def test_without_states(self):
        t, f = T([[1.0, 2.0]]), T([[3.0, 5.0]])
        np.testing.assert_array_equal(enrich(None, t, f).data, [[4.0, 7.0]])

    def test_hand_sum(self):
        np.testing.assert_array_equal(enrich(T([[1.0, 2.0]]), T([[3.0, 4.0]]), T([[5.0, 6.0]])).data, [[9.0, 12.0]])

    def test_nothing_left(self):
        with pytest.raises(ContractError):
            enrich(None, None, None)

    @given(st.integers(0, 10_000))
    def test_exactly_additive(self, seed):
        rng = np.random.default_rng(seed)
        # dyadic values keep float sums exact whatever the association order
        a, b, c = (T(rng.integers(-64, 64, size=(3, 4)) / 8.0) for _ in range(3))
        z = T(np.zeros((3, 4)))
        whole = enrich(a, b, c).data
        parts = enrich(a, z, z).data + enrich(z, b, z).data + enrich(z, z, c).data
        np.testing.assert_array_equal(whole, parts)


class TestChecklist:
    def test_rows_must_sum_to_one(self):
        with pytest.raises(ContractError):
            Checklist(np.array([[0.5, 0.4]]))

    def test_truth_must_be_one_hot(self):
        with pytest.raises(ContractError):
            Checklist(np.array([[0.5, 0.5]]), Mode.ONE_HOT_TRUTH)

    def test_json_round_trip(self):
        topics = ["a", "b", "c"]
        y = Checklist.from_indices([3, 0, 1], 4)
        obj = y.to_json(topics, STATES)
        assert obj["states"] == {"a": "unmentioned", "b": "positive", "c": "negative"}
        back = Checklist.from_json({"states": obj["states"]}, topics, STATES, Mode.ONE_HOT_TRUTH)
        np.testing.assert_array_equal(back.states, y.states)
        soft = Checklist(np.full((3, 4), 0.25))
        np.testing.assert_array_equal(Checklist.from_json(soft.to_json(topics, STATES), topics, STATES).states,
                                      soft.states)

    def test_is_one_hot(self):
        assert is_one_hot(np.eye(3))
        assert not is_one_hot(np.full((1, 2), 0.5))
