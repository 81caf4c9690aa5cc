import math
import zlib

import numpy as np
import pytest

from semivfl import autodiff as ad


def numeric_grad(build, params, delta=1e-6):
    """Central finite differences of build() w.r.t. every param coordinate."""
    grads = []
    for p in params:
        flat = p.value.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + delta
            up = float(build().value)
            flat[i] = orig - delta
            down = float(build().value)
            flat[i] = orig
            g[i] = (up - down) / (2 * delta)
        grads.append(g.reshape(p.value.shape))
    return grads


def backward_grad(build, params):
    for p in params:
        p.grad = None
    ad.backward(build())
    return [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]


class TestPrimitiveExamples:
    def test_matmul_hand_case(self):
        out = ad.matmul(ad.constant([[1.0, 2.0]]), ad.constant([[3.0], [4.0]]))
        assert out.value.tolist() == [[11.0]]

    def test_concat_cols_layout(self):
        out = ad.concat_cols(ad.constant([[1.0]]), ad.constant([[2.0]]))
        assert out.value.tolist() == [[1.0, 2.0]]

    def test_frobenius_sq_matches_entry_sum(self):
        x = np.array([[0.0, 2.0], [-2.0, 0.0]])
        expected = float((x**2).sum())  # independent oracle: sum of squared entries
        assert float(ad.frobenius_sq(ad.constant(x)).value) == pytest.approx(expected)
        assert expected == 8.0

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(ad.ShapeMismatch, match=r"\(1, 2\).*\(1, 2\)"):
            ad.matmul(ad.constant([[1.0, 2.0]]), ad.constant([[1.0, 2.0]]))

    def test_nonfinite_rejected_with_primitive_name(self):
        with pytest.raises(ad.NonFiniteValue, match="log"):
            ad.log(ad.constant([[0.0]]))

    def test_apply_primitive_dispatch(self):
        out = ad.apply_primitive("add", ad.constant([1.0]), ad.constant([2.0]))
        assert out.value.tolist() == [3.0]
        with pytest.raises(KeyError):
            ad.apply_primitive("frobnicate", ad.constant([1.0]))


class TestSigmoid:
    def test_symmetry_point(self):
        assert float(ad.sigmoid(ad.constant(0.0)).value) == 0.5

    def test_value_at_one(self):
        oracle = 1.0 / (1.0 + math.exp(-1.0))
        assert float(ad.sigmoid(ad.constant(1.0)).value) == pytest.approx(oracle, abs=1e-15)

    def test_logistic_symmetry(self):
        rng = np.random.default_rng(0)
        x = rng.normal(scale=5.0, size=64)
        s = ad.sigmoid(ad.constant(x)).value + ad.sigmoid(ad.constant(-x)).value
        assert np.max(np.abs(s - 1.0)) < 1e-12

    def test_stable_at_large_magnitude(self):
        out = ad.sigmoid(ad.constant([700.0, -700.0])).value
        assert out[0] == pytest.approx(1.0)
        assert out[1] == pytest.approx(0.0, abs=1e-300)
        assert np.all(np.isfinite(out))


class TestSoftmaxRows:
    def test_equal_inputs_uniform(self):
        out = ad.softmax_rows(ad.constant([[3.3, 3.3, 3.3]]), tau=0.7).value
        assert np.allclose(out, 1.0 / 3.0, atol=1e-15)

    def test_closed_form_ratio(self):
        out = ad.softmax_rows(ad.constant([[0.0, math.log(3.0)]]), tau=1.0).value
        assert out[0, 0] == pytest.approx(0.25, abs=1e-14)
        assert out[0, 1] == pytest.approx(0.75, abs=1e-14)

    def test_high_temperature_limit(self):
        out = ad.softmax_rows(ad.constant([[0.0, math.log(3.0)]]), tau=1e6).value
        assert np.allclose(out, 0.5, atol=1e-5)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        x = rng.normal(scale=30.0, size=(20, 7))
        out = ad.softmax_rows(ad.constant(x), tau=0.2).value
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) < 1e-12

    def test_rejects_bad_temperature(self):
        with pytest.raises(ValueError):
            ad.softmax_rows(ad.constant([[1.0, 2.0]]), tau=0.0)


class TestL2NormalizeRows:
    def test_three_four_five(self):
        out = ad.l2_normalize_rows(ad.constant([[3.0, 4.0]])).value
        assert np.allclose(out, [[0.6, 0.8]], atol=1e-15)

    def test_idempotent_on_unit_rows(self):
        row = np.array([[1.0 / math.sqrt(2), -1.0 / math.sqrt(2)]])
        out = ad.l2_normalize_rows(ad.constant(row)).value
        assert np.allclose(out, row, atol=1e-15)

    def test_zero_row_stays_zero(self):
        out = ad.l2_normalize_rows(ad.constant([[0.0, 0.0, 0.0]]), eps=1e-12).value
        assert np.all(out == 0.0)

    def test_unit_norm_property(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(32, 5))
        out = ad.l2_normalize_rows(ad.constant(x)).value
        assert np.max(np.abs(np.linalg.norm(out, axis=1) - 1.0)) < 1e-10


class TestBackward:
    def test_mean_gradient(self):
        x = ad.leaf(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ad.backward(ad.mean(x))
        assert np.allclose(x.grad, 1.0 / 6.0)

    def test_frobenius_sq_gradient(self):
        x = ad.leaf([[1.0, -2.0], [0.5, 3.0]], requires_grad=True)
        ad.backward(ad.frobenius_sq(x))
        assert np.allclose(x.grad, 2.0 * x.value)

    def test_stop_gradient_blocks(self):
        x = ad.leaf([[1.0, 2.0]], requires_grad=True)
        root = ad.mean(ad.square(ad.stop_gradient(x)))
        ad.backward(root)
        assert x.grad is None  # never reached -> zero contribution

    def test_stop_gradient_forward_identity(self):
        x = ad.leaf([[1.5, -2.5]], requires_grad=True)
        assert np.array_equal(ad.stop_gradient(x).value, x.value)

    def test_rejects_nonscalar_root(self):
        x = ad.leaf([[1.0, 2.0]], requires_grad=True)
        with pytest.raises(ad.ShapeMismatch):
            ad.backward(ad.square(x))

    def test_grad_accumulates_over_shared_subgraph(self):
        x = ad.leaf([2.0], requires_grad=True)
        y = ad.add(ad.square(x), ad.square(x))
        ad.backward(ad.mean(y))
        assert np.allclose(x.grad, 8.0)


@pytest.mark.parametrize(
    "name,build_fn,shapes",
    [
        ("add_broadcast", lambda p: ad.mean(ad.square(ad.add(p[0], p[1]))), [(3, 4), (1, 4)]),
        ("sub", lambda p: ad.mean(ad.square(ad.sub(p[0], p[1]))), [(3, 4), (3, 4)]),
        ("mul", lambda p: ad.mean(ad.mul(p[0], p[1])), [(2, 5), (2, 5)]),
        ("matmul", lambda p: ad.mean(ad.matmul(p[0], p[1])), [(3, 4), (4, 2)]),
        ("transpose", lambda p: ad.mean(ad.square(ad.transpose(p[0]))), [(3, 4)]),
        ("concat_cols", lambda p: ad.frobenius_sq(ad.concat_cols(p[0], p[1])), [(3, 2), (3, 3)]),
        ("concat_rows", lambda p: ad.frobenius_sq(ad.concat_rows(p[0], p[1])), [(2, 3), (4, 3)]),
        ("relu", lambda p: ad.mean(ad.relu(p[0])), [(4, 4)]),
        ("square", lambda p: ad.mean(ad.square(p[0])), [(3, 3)]),
        ("sigmoid", lambda p: ad.mean(ad.sigmoid(p[0])), [(4, 3)]),
        ("softmax", lambda p: ad.frobenius_sq(ad.softmax_rows(p[0], 0.37)), [(4, 5)]),
        ("l2norm", lambda p: ad.frobenius_sq(ad.l2_normalize_rows(p[0])), [(4, 3)]),
        ("pairwise", lambda p: ad.frobenius_sq(ad.sigmoid(ad.pairwise_diff(p[0]))), [(5, 1)]),
        ("submat", lambda p: ad.frobenius_sq(ad.submatrix(p[0], [0, 2], [1, 3])), [(4, 4)]),
        ("sqrt", lambda p: ad.mean(ad.sqrt(ad.add(ad.square(p[0]), ad.constant(0.1)))), [(3, 3)]),
        ("fro_norm", lambda p: ad.frobenius_norm(p[0]), [(3, 4)]),
        ("log", lambda p: ad.mean(ad.log(ad.add(ad.square(p[0]), ad.constant(0.5)))), [(3, 3)]),
        ("clip", lambda p: ad.mean(ad.clip(p[0], -0.5, 0.5)), [(4, 4)]),
    ],
)
def test_primitive_gradients_match_finite_differences(name, build_fn, shapes):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    params = [ad.leaf(rng.normal(size=s), requires_grad=True) for s in shapes]
    build = lambda: build_fn(params)
    bp = backward_grad(build, params)
    fd = numeric_grad(build, params)
    for b, f in zip(bp, fd):
        assert np.max(np.abs(b - f) / np.maximum.reduce([np.abs(b), np.abs(f), np.ones_like(b)])) < 1e-4


def test_gather_rows_scatters_only_into_looked_up_rows():
    table = ad.leaf(np.arange(12.0).reshape(4, 3), requires_grad=True)
    out = ad.gather_rows(table, [1, 1, 3])
    ad.backward(ad.mean(out))
    assert np.allclose(table.grad[0], 0.0)
    assert np.allclose(table.grad[2], 0.0)
    assert np.allclose(table.grad[1], 2.0 / 9.0)
    assert np.allclose(table.grad[3], 1.0 / 9.0)
    with pytest.raises(IndexError):
        ad.gather_rows(table, [4])


class TestAdam:
    def test_first_step_hand_value(self):
        # one-step hand evaluation: m_hat = g, v_hat = g^2 -> delta ~ -lr
        p = ad.leaf([0.0], requires_grad=True)
        p.grad = np.array([1.0])
        opt = ad.Adam([p], lr=1e-3)
        opt.step()
        assert p.value[0] == pytest.approx(-1e-3, rel=1e-6)
        assert opt.state.t == 1

    def test_zero_gradient_fixed_point(self):
        p = ad.leaf([1.0, 2.0], requires_grad=True)
        p.grad = np.zeros(2)
        ad.Adam([p], lr=1e-2).step()
        assert np.array_equal(p.value, [1.0, 2.0])

    def test_deterministic(self):
        def run():
            p = ad.leaf([[0.3, -0.4]], requires_grad=True)
            opt = ad.Adam([p], lr=5e-3)
            for step in range(5):
                p.grad = np.array([[0.1 * (step + 1), -0.2]])
                opt.step()
            return p.value.copy()

        assert np.array_equal(run(), run())

    def test_shape_mismatch_rejected(self):
        state = ad.AdamState([(2,)])
        with pytest.raises(ad.ShapeMismatch):
            ad.adam_step([np.zeros(2)], [np.zeros(3)], state, 1e-3)

    def test_rejects_nonpositive_lr(self):
        state = ad.AdamState([(2,)])
        with pytest.raises(ValueError):
            ad.adam_step([np.zeros(2)], [np.zeros(2)], state, 0.0)


class TestGradCheck:
    def test_quadratic_is_nearly_exact(self):
        p = ad.leaf([[1.0, -2.0], [0.5, 0.25]], requires_grad=True)
        err = ad.grad_check(lambda: ad.frobenius_sq(p), [p], delta=1e-5)
        assert err < 1e-8

    def test_detects_nondeterministic_builder(self):
        p = ad.leaf([1.0], requires_grad=True)
        state = {"k": 0.0}

        def noisy():
            state["k"] += 1.0
            return ad.mean(ad.mul(p, ad.constant(state["k"])))

        with pytest.raises(ad.NondeterministicLoss):
            ad.grad_check(noisy, [p])

    def test_detached_branch_has_zero_gradient(self):
        # Detachment means "hold this branch fixed": a builder freezes the
        # detached value as a constant, so finite differences of the frozen
        # branch are zero, matching backward's zero.
        p = ad.leaf([0.7, -0.3], requires_grad=True)
        q = ad.leaf([1.1, 0.4], requires_grad=True)
        detached = ad.constant(q.value.copy())

        def build():
            return ad.mean(ad.add(ad.square(p), ad.mul(p, detached)))

        err = ad.grad_check(build, [p, q])
        assert err < 1e-9

    def test_rejects_bad_delta(self):
        p = ad.leaf([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            ad.grad_check(lambda: ad.mean(p), [p], delta=1e-2)
