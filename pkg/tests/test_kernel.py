"""Tensor kernel: op gradients, composites, Adam, checkpoints."""

import numpy as np
import pytest

from capground.errors import (
    CheckpointError,
    ContractError,
    EmptyKeysError,
    NumericalError,
    ShapeError,
)
from capground.kernel import (
    AdamState,
    AttentionParams,
    LSTMParams,
    Tensor,
    adam_step,
    add,
    additive_attention,
    backward,
    clip_global_norm,
    concat,
    cross_entropy_with_logits,
    dropout,
    embedding,
    finite_diff_check,
    load_checkpoint,
    lstm_cell,
    matmul,
    mean,
    mul,
    no_grad,
    parameter,
    relu,
    save_checkpoint,
    sigmoid,
    softmax,
    tensor_sum,
    tanh,
    weighted_sum,
)
from capground.kernel.layers import init_uniform
from capground.kernel.tensor import inner_last, reshape
from capground.util import rng_stream


class TestBasicAutodiff:
    def test_square_gradient(self):
        x = parameter(3.0)
        y = mul(x, x)
        backward(y)
        assert x.grad == pytest.approx(6.0)

    def test_product_gradients(self):
        x, y = parameter(2.0), parameter(5.0)
        z = mul(x, y)
        backward(z)
        assert x.grad == pytest.approx(5.0)
        assert y.grad == pytest.approx(2.0)

    def test_shared_subexpression_accumulates(self):
        x = parameter(2.0)
        y = add(mul(x, x), x)  # x^2 + x -> grad 2x + 1
        backward(y)
        assert x.grad == pytest.approx(5.0)

    def test_non_scalar_loss_rejected(self):
        x = parameter(np.ones(3))
        with pytest.raises(ContractError):
            backward(add(x, x))

    def test_grads_reset_between_backward_calls(self):
        x = parameter(4.0)
        backward(mul(x, x))
        first = x.grad.item()
        backward(mul(x, x))
        assert x.grad.item() == pytest.approx(first)

    def test_no_grad_builds_constants(self):
        x = parameter(2.0)
        with no_grad():
            y = mul(x, x)
        assert y._parents == ()
        assert not y.requires_grad

    def test_nan_raises_numerical_error(self):
        with pytest.raises(NumericalError):
            Tensor(np.array([1.0, np.nan]))

    def test_inf_raises_numerical_error(self):
        with pytest.raises(NumericalError):
            Tensor(np.array([np.inf, 1.0]))


def _finite_diff_scalar(fn, x, step=1e-6):
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = fn()
        flat[i] = orig - step
        minus = fn()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * step)
    return grad


def _op_cases():
    """(name, param, loss_fn) triples; the loss mixes each op's output
    with fixed random weights so every input coordinate gets a dense
    gradient."""
    rng = rng_stream(17, 0)
    cases = []

    def case(name, param, loss_fn):
        cases.append(pytest.param(param, loss_fn, id=name))

    p = parameter(rng.standard_normal((3, 4)))
    other_vec = rng.standard_normal(4)
    mix = rng.standard_normal((3, 4))
    case("add_broadcast", p, lambda p=p: tensor_sum(mul(add(p, other_vec), mix)))

    p = parameter(rng.standard_normal((3, 4)))
    other = rng.standard_normal((3, 4))
    case("mul", p, lambda p=p: tensor_sum(mul(mul(p, other), mix)))

    p = parameter(rng.standard_normal((3, 4)))
    rhs = rng.standard_normal((4, 5))
    mix_m2 = rng.standard_normal((3, 5))
    case("matmul_2d", p, lambda p=p: tensor_sum(mul(matmul(p, rhs), mix_m2)))

    p = parameter(rng.standard_normal((4, 5)))
    x3 = rng.standard_normal((2, 3, 4))
    mix_m3 = rng.standard_normal((2, 3, 5))
    case("matmul_3d", p, lambda p=p: tensor_sum(mul(matmul(Tensor(x3), p), mix_m3)))

    p = parameter(rng.standard_normal((3, 4)))
    tail = rng.standard_normal((3, 2))
    mix_cat = rng.standard_normal((3, 6))
    case("concat", p, lambda p=p: tensor_sum(mul(concat([p, Tensor(tail)], axis=-1), mix_cat)))

    for name, op in (("tanh", tanh), ("sigmoid", sigmoid), ("relu", relu), ("softmax", softmax)):
        p = parameter(rng.standard_normal((3, 4)))
        case(name, p, lambda p=p, op=op: tensor_sum(mul(op(p), mix)))

    p = parameter(rng.standard_normal((3, 4)))
    mask = np.array([[True, True, False, True]] * 3)
    case("masked_softmax", p, lambda p=p: tensor_sum(mul(softmax(p, mask=mask), mix)))

    p = parameter(rng.standard_normal((3, 4)))
    targets = np.array([0, 2, 1])
    case("cross_entropy", p, lambda p=p: mean(cross_entropy_with_logits(p, targets)))

    p = parameter(rng.standard_normal((3, 4)))
    v = rng.standard_normal(4)
    mix_v = rng.standard_normal(3)
    case("inner_last", p, lambda p=p: tensor_sum(mul(inner_last(p, Tensor(v)), mix_v)))

    p = parameter(rng.standard_normal((3, 4)))
    vals = rng.standard_normal((3, 4, 5))
    mix_ws = rng.standard_normal((3, 5))
    case("weighted_sum", p, lambda p=p: tensor_sum(mul(weighted_sum(p, Tensor(vals)), mix_ws)))

    p = parameter(rng.standard_normal((3, 4)))
    mix_rs = rng.standard_normal((4, 3))
    case("reshape", p, lambda p=p: tensor_sum(mul(reshape(p, (4, 3)), mix_rs)))

    p = parameter(rng.standard_normal((6, 4)))
    ids = np.array([0, 3, 3, 5])
    mix_emb = rng.standard_normal((4, 4))
    case("embedding", p, lambda p=p: tensor_sum(mul(embedding(p, ids), mix_emb)))

    p = parameter(rng.standard_normal((3, 4)))
    case(
        "dropout",
        p,
        lambda p=p: tensor_sum(mul(dropout(p, 0.5, rng_stream(3, 3), True), mix)),
    )
    return cases


class TestOpGradients:
    """Each primitive against brute-force central differences."""

    @pytest.mark.parametrize("param,loss_fn", _op_cases())
    def test_primitive(self, param, loss_fn):
        loss = loss_fn()
        backward(loss)
        analytic = param.grad.copy()
        numeric = _finite_diff_scalar(lambda: float(loss_fn().data), param.data)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-7)


class TestOpSemantics:
    def test_softmax_rows_sum_to_one_and_positive(self):
        rng = rng_stream(5, 0)
        probs = softmax(Tensor(rng.standard_normal((10, 7)) * 5)).data
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-9)
        assert (probs > 0).all()

    def test_masked_softmax_zeroes_masked_entries(self):
        mask = np.array([[True, False, True]])
        probs = softmax(Tensor(np.array([[1.0, 100.0, 2.0]])), mask=mask).data
        assert probs[0, 1] == 0.0
        np.testing.assert_allclose(probs.sum(), 1.0, atol=1e-12)

    def test_cross_entropy_nonnegative_and_uniform_value(self):
        logits = Tensor(np.zeros((2, 11)))
        losses = cross_entropy_with_logits(logits, np.array([0, 5])).data
        np.testing.assert_allclose(losses, np.log(11), atol=1e-12)
        rng = rng_stream(6, 0)
        random_losses = cross_entropy_with_logits(
            Tensor(rng.standard_normal((20, 6))), rng.integers(0, 6, 20)
        ).data
        assert (random_losses >= 0).all()

    def test_dropout_rate_zero_identity(self):
        x = parameter(np.ones((3, 3)))
        out = dropout(x, 0.0, rng_stream(0, 0), train=True)
        assert out is x

    def test_dropout_eval_mode_identity(self):
        x = parameter(np.ones((3, 3)))
        assert dropout(x, 0.9, rng_stream(0, 0), train=False) is x

    def test_dropout_preserves_expectation(self):
        # inverted scaling: E[output] == input, checked over 1e5 samples
        rng = rng_stream(7, 0)
        x = Tensor(np.full(100_000, 2.0))
        out = dropout(x, 0.3, rng, train=True).data
        assert abs(out.mean() - 2.0) / 2.0 < 0.01

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_embedding_id_out_of_range(self):
        with pytest.raises(ShapeError):
            embedding(parameter(np.ones((3, 2))), np.array([3]))


class TestLSTMCell:
    def _zero_params(self, input_dim=3, hidden=2):
        zeros_w = lambda: parameter(np.zeros((input_dim + hidden, hidden)))
        zeros_b = lambda: parameter(np.zeros(hidden))
        return LSTMParams(
            w_i=zeros_w(), w_f=zeros_w(), w_o=zeros_w(), w_g=zeros_w(),
            b_i=zeros_b(), b_f=zeros_b(), b_o=zeros_b(), b_g=zeros_b(),
        )

    def test_zero_params_zero_cell(self):
        params = self._zero_params()
        h, c = Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2)))
        h2, c2 = lstm_cell(Tensor(np.ones((1, 3))), h, c, params)
        np.testing.assert_allclose(h2.data, 0.0)
        np.testing.assert_allclose(c2.data, 0.0)

    def test_zero_params_remembered_cell(self):
        # gates at sigma(0)=0.5: c' = 0.5*2 = 1, h' = 0.5*tanh(1)
        params = self._zero_params()
        c = Tensor(np.full((1, 2), 2.0))
        h2, c2 = lstm_cell(Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 2))), c, params)
        np.testing.assert_allclose(c2.data, 1.0, atol=1e-12)
        np.testing.assert_allclose(h2.data, 0.5 * np.tanh(1.0), atol=1e-12)

    def test_saturated_gates_preserve_memory(self):
        # forget bias -> +inf, input bias -> -inf: c' ~= c
        params = self._zero_params()
        params.b_f.data[:] = 50.0
        params.b_i.data[:] = -50.0
        c = Tensor(np.array([[0.7, -1.2]]))
        _, c2 = lstm_cell(Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 2))), c, params)
        np.testing.assert_allclose(c2.data, c.data, atol=1e-9)

    def test_shape_mismatch(self):
        params = self._zero_params()
        with pytest.raises(ShapeError):
            lstm_cell(Tensor(np.ones((1, 5))), Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))), params)


class TestAdditiveAttention:
    def test_identical_keys_uniform(self):
        rng = rng_stream(9, 0)
        params = AttentionParams.init(rng, 4, 3, 5)
        keys = Tensor(np.tile(rng.standard_normal(3), (1, 6, 1)))
        context, probs = additive_attention(Tensor(rng.standard_normal((1, 4))), keys, params)
        np.testing.assert_allclose(probs.data, 1.0 / 6, atol=1e-12)
        np.testing.assert_allclose(context.data[0], keys.data[0, 0], atol=1e-12)

    def test_single_key(self):
        rng = rng_stream(9, 1)
        params = AttentionParams.init(rng, 4, 3, 5)
        keys = Tensor(rng.standard_normal((1, 1, 3)))
        context, probs = additive_attention(Tensor(rng.standard_normal((1, 4))), keys, params)
        np.testing.assert_allclose(probs.data, [[1.0]], atol=1e-15)
        np.testing.assert_allclose(context.data, keys.data[:, 0], atol=1e-15)

    def test_known_scores_softmax(self):
        # scores [ln 2, 0] -> probs [2/3, 1/3]
        probs = softmax(Tensor(np.array([[np.log(2.0), 0.0]]))).data
        np.testing.assert_allclose(probs, [[2 / 3, 1 / 3]], atol=1e-12)

    def test_empty_keys(self):
        rng = rng_stream(9, 2)
        params = AttentionParams.init(rng, 4, 3, 5)
        with pytest.raises(EmptyKeysError):
            additive_attention(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 0, 3))), params)

    def test_probs_sum_and_convex_hull(self):
        rng = rng_stream(9, 3)
        params = AttentionParams.init(rng, 4, 3, 5)
        keys = Tensor(rng.standard_normal((8, 5, 3)))
        context, probs = additive_attention(Tensor(rng.standard_normal((8, 4))), keys, params)
        np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-9)
        low = keys.data.min(axis=1) - 1e-12
        high = keys.data.max(axis=1) + 1e-12
        assert ((context.data >= low) & (context.data <= high)).all()


class TestAdam:
    def test_zero_gradients_no_change(self):
        p = parameter(np.array([1.0, -2.0]))
        state = AdamState.init({"p": p})
        adam_step({"p": p}, {"p": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_allclose(p.data, [1.0, -2.0])

    def test_first_step_bias_corrected_unit_update(self):
        # g=1, t=1: m_hat=1, v_hat=1 -> update = -lr / (1 + eps)
        p = parameter(np.array([0.0]))
        state = AdamState.init({"p": p})
        adam_step({"p": p}, {"p": np.array([1.0])}, state, lr=0.1)
        assert p.data[0] == pytest.approx(-0.1, rel=1e-6)
        assert state.t == 1

    def test_lr_zero_no_change(self):
        p = parameter(np.array([3.0]))
        state = AdamState.init({"p": p})
        adam_step({"p": p}, {"p": np.array([5.0])}, state, lr=0.0)
        assert p.data[0] == 3.0

    def test_two_steps_match_reference_formula(self):
        p = parameter(np.array([0.5]))
        state = AdamState.init({"p": p})
        m = v = 0.0
        ref = 0.5
        for t in (1, 2):
            g = 1.0 if t == 1 else -2.0
            adam_step({"p": p}, {"p": np.array([g])}, state, lr=0.05)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert p.data[0] == pytest.approx(ref, rel=1e-12)

    def test_clip_global_norm(self):
        grads = {"a": np.array([3.0, 4.0]), "b": np.array([12.0])}
        norm = clip_global_norm(grads, max_norm=5.0)
        assert norm == pytest.approx(13.0)
        total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        assert total == pytest.approx(5.0)

    def test_clip_below_threshold_untouched(self):
        grads = {"a": np.array([0.3, 0.4])}
        clip_global_norm(grads, max_norm=5.0)
        np.testing.assert_allclose(grads["a"], [0.3, 0.4])


class TestFiniteDiffCheck:
    def test_linear_layer_tight(self):
        rng = rng_stream(11, 0)
        x = rng.standard_normal((4, 3))
        y = rng.integers(0, 2, 4)
        params = {"w": parameter(init_uniform(rng, 3, (3, 2)))}

        def loss_fn():
            return mean(cross_entropy_with_logits(matmul(Tensor(x), params["w"]), y))

        report = finite_diff_check(loss_fn, params)
        assert report.max_rel_error < 1e-7

    def test_corrupted_gradient_detected(self):
        rng = rng_stream(11, 1)
        x = rng.standard_normal((4, 3))
        y = rng.integers(0, 2, 4)
        w = parameter(init_uniform(rng, 3, (3, 2)))

        class Doubled:
            """Pretends to be the weight but doubles its reported gradient."""

            def __init__(self, inner):
                self.inner = inner

            @property
            def data(self):
                return self.inner.data

            @property
            def grad(self):
                return None if self.inner.grad is None else 2.0 * self.inner.grad

        def loss_fn():
            return mean(cross_entropy_with_logits(matmul(Tensor(x), w), y))

        report = finite_diff_check(loss_fn, {"w": Doubled(w)})
        assert report.max_rel_error > 0.4  # x2 corruption -> rel error ~0.5

    def test_mlp_within_tolerance(self):
        rng = rng_stream(11, 2)
        x = rng.standard_normal((5, 4))
        y = rng.integers(0, 3, 5)
        params = {
            "w1": parameter(init_uniform(rng, 4, (4, 6))),
            "b1": parameter(rng.standard_normal(6) * 0.1),
            "w2": parameter(init_uniform(rng, 6, (6, 3))),
        }

        def loss_fn():
            h = relu(add(matmul(Tensor(x), params["w1"]), params["b1"]))
            return mean(cross_entropy_with_logits(matmul(h, params["w2"]), y))

        report = finite_diff_check(loss_fn, params)
        assert report.max_rel_error < 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = rng_stream(13, 0)
        tensors = {
            "scalar": np.asarray(3.5),
            "matrix": rng.standard_normal((3, 4)),
            "deep/nested.name": rng.standard_normal(7),
        }
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, tensors)
        loaded = load_checkpoint(path)
        assert set(loaded) == set(tensors)
        for name in tensors:
            np.testing.assert_array_equal(loaded[name], np.asarray(tensors[name]))

    def test_byte_deterministic(self, tmp_path):
        rng = rng_stream(13, 1)
        tensors = {"b": rng.standard_normal(5), "a": rng.standard_normal((2, 2))}
        p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
        save_checkpoint(p1, tensors)
        save_checkpoint(p2, dict(reversed(list(tensors.items()))))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"w": np.ones((4, 4))})
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_trailing_garbage(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"w": np.ones(3)})
        path.write_bytes(path.read_bytes() + b"\x01")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
