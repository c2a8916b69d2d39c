import numpy as np
import pytest

from qmpc import autodiff as ad


def finite_diff(f, arrays, wrt, step=1e-5):
    """Central finite differences of scalar f w.r.t. arrays[wrt]."""
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[wrt])
    flat = g.reshape(-1)
    xflat = base[wrt].reshape(-1)
    for i in range(xflat.size):
        orig = xflat[i]
        xflat[i] = orig + step
        fp = f(*base)
        xflat[i] = orig - step
        fm = f(*base)
        xflat[i] = orig
        flat[i] = (fp - fm) / (2.0 * step)
    return g


def check_grad(build, arrays, rtol=1e-4, atol=1e-7):
    """build(tape, leaves) -> scalar tensor; compares tape grads to FD."""
    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    root = build(tape, leaves)
    grads = tape.backward(root)
    for k in range(len(arrays)):
        def f(*arrs):
            t2 = ad.Tape()
            lf = [t2.leaf(a) for a in arrs]
            return build(t2, lf).item()

        num = finite_diff(f, arrays, k)
        got = grads.wrt(leaves[k])
        assert got.shape == arrays[k].shape
        np.testing.assert_allclose(got, num, rtol=rtol, atol=atol)


class TestForwardShapes:
    def test_matmul_shape(self):
        a = ad.Tensor(np.ones((2, 3)))
        b = ad.Tensor(np.ones((3, 1)))
        assert ad.matmul(a, b).shape == (2, 1)

    def test_matmul_mismatch_names_shapes(self):
        with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(2, 1\)"):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 1))))

    def test_relu_values(self):
        out = ad.relu(ad.Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sum_square(self):
        out = ad.tensor_sum(ad.square(ad.Tensor([3.0, 4.0])))
        assert out.item() == 25.0

    def test_constant_ops_stay_off_tape(self):
        out = ad.add(ad.Tensor([1.0]), ad.Tensor([2.0]))
        assert out.tape is None and out.node_id is None

    def test_gather_columns(self):
        t = ad.Tensor(np.arange(6.0).reshape(2, 3))
        out = ad.gather_columns(t, [2, 0])
        np.testing.assert_array_equal(out.data, [[2.0, 0.0], [5.0, 3.0]])

    def test_mixed_tapes_rejected(self):
        t1, t2 = ad.Tape(), ad.Tape()
        with pytest.raises(ValueError, match="different tapes"):
            ad.add(t1.leaf([1.0]), t2.leaf([1.0]))


class TestBackwardContract:
    def test_sum_square_gradient(self):
        tape = ad.Tape()
        x = tape.leaf([3.0, 4.0])
        root = ad.tensor_sum(ad.square(x))
        g = tape.backward(root).wrt(x)
        np.testing.assert_array_equal(g, [6.0, 8.0])

    def test_relu_subgradient(self):
        for x0, expect in [(-1.0, 0.0), (2.0, 1.0), (0.0, 0.0)]:
            tape = ad.Tape()
            x = tape.leaf([x0])
            root = ad.tensor_sum(ad.relu(x))
            assert tape.backward(root).wrt(x)[0] == expect

    def test_non_scalar_root_rejected(self):
        tape = ad.Tape()
        x = tape.leaf([1.0, 2.0])
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(ad.square(x))

    def test_root_not_on_tape_rejected(self):
        tape = ad.Tape()
        tape.leaf([1.0])
        other = ad.Tape()
        root = ad.tensor_sum(other.leaf([1.0]))
        with pytest.raises(ValueError, match="not on this tape"):
            tape.backward(root)

    def test_unreachable_leaf_gets_zeros(self):
        tape = ad.Tape()
        x = tape.leaf([1.0, 2.0])
        y = tape.leaf([5.0])
        root = ad.tensor_sum(ad.square(x))
        g = tape.backward(root).wrt(y)
        np.testing.assert_array_equal(g, [0.0])

    def test_backward_twice_bitwise_identical(self):
        rng = np.random.default_rng(7)
        tape = ad.Tape()
        x = tape.leaf(rng.normal(size=(4, 3)))
        w = tape.leaf(rng.normal(size=(3, 2)))
        root = ad.tensor_sum(ad.square(ad.relu(ad.matmul(x, w))))
        g1 = tape.backward(root)
        g2 = tape.backward(root)
        assert np.array_equal(g1.wrt(x), g2.wrt(x))
        assert np.array_equal(g1.wrt(w), g2.wrt(w))

    def test_gradient_linearity(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(5,))
        tape = ad.Tape()
        x = tape.leaf(a)
        r1 = ad.tensor_sum(ad.square(x))
        r2 = ad.tensor_sum(ad.relu(x))
        g_sum = tape.backward(ad.add(r1, r2)).wrt(x)
        g1 = tape.backward(r1).wrt(x)
        g2 = tape.backward(r2).wrt(x)
        np.testing.assert_allclose(g_sum, g1 + g2, rtol=0, atol=0)


def _quantile_loss_graph(q, y, yhat_tensor):
    # q*relu(y - yhat) + (1-q)*relu(yhat - y)
    under = ad.relu(ad.sub(ad.Tensor(y), yhat_tensor))
    over = ad.relu(ad.sub(yhat_tensor, ad.Tensor(y)))
    return ad.tensor_sum(ad.add(ad.mul(q, under), ad.mul(1.0 - q, over)))


def test_quantile_loss_gradient_matches_finite_difference_oracle():
    # oracle value frozen from central differences on the pinball loss:
    # q=0.5, y=1, yhat=0 -> dL/dyhat = -0.5
    tape = ad.Tape()
    yhat = tape.leaf([0.0])
    root = _quantile_loss_graph(0.5, np.array([1.0]), yhat)
    g = tape.backward(root).wrt(yhat)
    np.testing.assert_allclose(g, [-0.5], rtol=0, atol=0)

    def f(v):
        t = ad.Tape()
        lf = t.leaf(v)
        return _quantile_loss_graph(0.5, np.array([1.0]), lf).item()

    num = finite_diff(lambda v: f(v), [np.array([0.0])], 0)
    np.testing.assert_allclose(num, [-0.5], rtol=1e-6, atol=1e-9)


# ---------------------------------------------------------------------------
# finite-difference sweep over every primitive, 100 seeds total
# ---------------------------------------------------------------------------

def _away_from_kinks(rng, shape, margin=1e-3):
    x = rng.normal(size=shape)
    x[np.abs(x) < margin] += 2 * margin
    return x


PRIMITIVE_CASES = {
    "add": lambda t, l: ad.tensor_sum(ad.square(ad.add(l[0], l[1]))),
    "add_broadcast": lambda t, l: ad.tensor_sum(ad.square(ad.add(l[0], l[2]))),
    "sub": lambda t, l: ad.tensor_sum(ad.square(ad.sub(l[0], l[1]))),
    "mul": lambda t, l: ad.tensor_sum(ad.mul(l[0], l[1])),
    "div": lambda t, l: ad.tensor_sum(ad.div(l[0], l[3])),
    "neg": lambda t, l: ad.tensor_sum(ad.square(ad.neg(l[0]))),
    "matmul": lambda t, l: ad.tensor_sum(ad.square(ad.matmul(l[0], l[4]))),
    "relu": lambda t, l: ad.tensor_sum(ad.relu(l[0])),
    "square": lambda t, l: ad.tensor_sum(ad.square(l[0])),
    "maximum": lambda t, l: ad.tensor_sum(ad.maximum(l[0], l[1])),
    "minimum": lambda t, l: ad.tensor_sum(ad.minimum(l[0], l[1])),
    "sum": lambda t, l: ad.tensor_sum(l[0]),
    "reshape": lambda t, l: ad.tensor_sum(ad.square(ad.reshape(l[0], (6, 1)))),
    "concat": lambda t, l: ad.tensor_sum(ad.square(ad.concat([l[0], l[1]], axis=1))),
    "gather": lambda t, l: ad.tensor_sum(ad.square(ad.gather_columns(l[0], [1, 0, 1]))),
    "layer_norm": lambda t, l: ad.tensor_sum(
        ad.square(ad.layer_norm(l[0], l[5], l[6]))
    ),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    build = PRIMITIVE_CASES[name]
    n_seeds = 100 // len(PRIMITIVE_CASES) + 1
    for seed in range(n_seeds):
        rng = np.random.default_rng(1000 + seed)
        arrays = [
            _away_from_kinks(rng, (2, 3)),            # 0: main operand
            _away_from_kinks(rng, (2, 3)),            # 1: second operand
            _away_from_kinks(rng, (3,)),              # 2: broadcast row
            rng.uniform(0.5, 2.0, size=(2, 3)),       # 3: safe denominator
            rng.normal(size=(3, 4)),                  # 4: matmul rhs
            rng.uniform(0.5, 1.5, size=(3,)),         # 5: layer norm gamma
            rng.normal(size=(3,)),                    # 6: layer norm beta
        ]
        check_grad(build, arrays)


def test_dropout_identity_at_inference_rate_zero():
    x = ad.Tensor(np.arange(4.0))
    out = ad.dropout(x, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out.data, x.data)


def test_dropout_masks_and_scales():
    rng = np.random.default_rng(3)
    tape = ad.Tape()
    x = tape.leaf(np.ones(1000))
    out = ad.dropout(x, 0.2, rng)
    vals = np.unique(out.data)
    assert set(np.round(vals, 12)) <= {0.0, 1.25}
    g = tape.backward(ad.tensor_sum(out)).wrt(x)
    np.testing.assert_array_equal(g, out.data)
