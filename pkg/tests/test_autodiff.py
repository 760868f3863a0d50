import numpy as np
import pytest

from pactune import autodiff as ad


def scalar_build(fn):
    """Wrap a Tensor->Tensor function as a finite_diff_check builder."""

    def build(z):
        tape = ad.Tape()
        x = tape.leaf(z)
        return fn(x), [x]

    return build


class TestForwardOps:
    def test_matmul_1x2_by_2x1(self):
        out = ad.matmul(ad.as_tensor([[1.0, 2.0]]), ad.as_tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_softmax_xent_uniform(self):
        out = ad.softmax_cross_entropy(ad.as_tensor([[0.0, 0.0]]), [0])
        assert out.item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_relu_values(self):
        out = ad.relu(ad.as_tensor([-1.5, 2.0]))
        assert out.data.tolist() == [0.0, 2.0]

    def test_forward_op_dispatch(self):
        out = ad.forward_op("add", ad.as_tensor([1.0]), ad.as_tensor([2.0]))
        assert out.data.tolist() == [3.0]
        with pytest.raises(ad.AutodiffError):
            ad.forward_op("div", ad.as_tensor([1.0]), ad.as_tensor([2.0]))

    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ad.ShapeError, match="matmul.*\\(1, 2\\).*\\(3, 1\\)"):
            ad.matmul(ad.as_tensor([[1.0, 2.0]]), ad.as_tensor([[1.0], [2.0], [3.0]]))
        with pytest.raises(ad.ShapeError, match="add"):
            ad.add(ad.as_tensor([1.0, 2.0]), ad.as_tensor([1.0, 2.0, 3.0]))

    def test_log_rejects_nonpositive(self):
        with pytest.raises(ad.NumericsError):
            ad.log(ad.as_tensor([1.0, 0.0]))

    def test_nonfinite_result_rejected(self):
        with pytest.raises(ad.NumericsError, match="exp"):
            ad.exp(ad.as_tensor([1e4]))

    def test_stabilized_xent_extreme_logits(self):
        out = ad.softmax_cross_entropy(ad.as_tensor([[1e3, -1e3]]), [0])
        assert np.isfinite(out.item())
        assert out.item() == pytest.approx(0.0, abs=1e-12)

    def test_gather_rows(self):
        x = ad.as_tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        out = ad.gather_rows(x, [2, 0, 2])
        assert out.data.tolist() == [[5.0, 6.0], [1.0, 2.0], [5.0, 6.0]]


class TestBackward:
    def test_square_at_three(self):
        tape = ad.Tape()
        x = tape.leaf(np.array(3.0))
        grads = tape.backward(ad.square(x))
        assert grads[x] == pytest.approx(6.0, abs=1e-12)

    def test_relu_subgradient_zero_on_negative(self):
        tape = ad.Tape()
        x = tape.leaf(np.array([-1.0, 2.0]))
        grads = tape.backward(ad.tensor_sum(ad.relu(x)))
        assert grads[x].tolist() == [0.0, 1.0]

    def test_non_scalar_root_rejected(self):
        tape = ad.Tape()
        x = tape.leaf(np.array([1.0, 2.0]))
        with pytest.raises(ad.AutodiffError, match="scalar"):
            tape.backward(ad.square(x))

    def test_shared_node_accumulates(self):
        tape = ad.Tape()
        x = tape.leaf(np.array(2.0))
        y = ad.add(ad.square(x), ad.mul(x, 3.0))  # x^2 + 3x -> 2x + 3 = 7
        grads = tape.backward(y)
        assert grads[x] == pytest.approx(7.0, abs=1e-12)

    def test_unreached_leaf_gets_zeros(self):
        tape = ad.Tape()
        x = tape.leaf(np.array([1.0, 2.0]))
        y = tape.leaf(np.array(5.0))
        grads = tape.backward(ad.square(y))
        assert grads[x].tolist() == [0.0, 0.0]

    def test_mlp_loss_matches_finite_differences(self):
        # random 3-layer MLP loss against the central-difference oracle
        rng = np.random.default_rng(42)
        shapes = [(3, 4), (4,), (4, 4), (4,), (4, 2), (2,)]
        sizes = [int(np.prod(s)) for s in shapes]
        x_in = rng.standard_normal((5, 3))
        labels = rng.integers(0, 2, size=5)

        def build(z):
            tape = ad.Tape()
            leaves, off = [], 0
            for s, n in zip(shapes, sizes):
                leaves.append(tape.leaf(z[off:off + n].reshape(s)))
                off += n
            h = ad.as_tensor(x_in)
            for i in range(0, 6, 2):
                h = ad.add_bias(ad.matmul(h, leaves[i]), leaves[i + 1])
                if i < 4:
                    h = ad.tanh(h)
            return ad.softmax_cross_entropy(h, labels), leaves

        x0 = rng.standard_normal(sum(sizes)) * 0.5
        assert ad.finite_diff_check(build, x0, h=1e-5) < 1e-4


class TestFiniteDiffCheck:
    def test_quadratic(self):
        build = scalar_build(lambda x: ad.tensor_sum(ad.square(x)))
        err = ad.finite_diff_check(build, np.array([3.0]), h=1e-5)
        assert err < 1e-8

    def test_rejects_bad_h(self):
        build = scalar_build(lambda x: ad.tensor_sum(ad.square(x)))
        with pytest.raises(ValueError):
            ad.finite_diff_check(build, np.array([3.0]), h=0.0)

    def test_nonfinite_reports_coordinate(self):
        def build(z):
            tape = ad.Tape()
            x = tape.leaf(z)
            return ad.tensor_sum(ad.log(x)), [x]

        with pytest.raises(ad.NumericsError, match="coordinate 0"):
            # x - h goes nonpositive for the first coordinate
            ad.finite_diff_check(build, np.array([5e-6, 1.0]), h=1e-5)


class TestProperties:
    @pytest.mark.parametrize("kind", sorted(ad.OPS))
    def test_gradcheck_all_ops(self, kind):
        worst = max(ad.gradcheck_op(kind, seed) for seed in range(20))
        assert worst < 1e-4, f"{kind}: max relative error {worst:.3e}"

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(11)
            tape = ad.Tape()
            a = tape.leaf(rng.standard_normal((4, 4)))
            b = tape.leaf(rng.standard_normal((4, 4)))
            loss = ad.tensor_mean(ad.square(ad.tanh(ad.matmul(a, b))))
            grads = tape.backward(loss)
            return loss.item(), grads[a].copy(), grads[b].copy()

        l1, ga1, gb1 = run()
        l2, ga2, gb2 = run()
        assert l1 == l2
        assert np.array_equal(ga1, ga2) and np.array_equal(gb1, gb2)

    def test_backward_linearity(self):
        rng = np.random.default_rng(3)
        x0 = rng.standard_normal((3, 3))
        a, b = 2.5, -1.25

        def grad_of(combine):
            tape = ad.Tape()
            x = tape.leaf(x0)
            f = ad.tensor_sum(ad.square(x))
            g = ad.tensor_mean(ad.tanh(x))
            return tape.backward(combine(f, g))[x]

        combined = grad_of(lambda f, g: ad.add(ad.mul(f, a), ad.mul(g, b)))
        separate = a * grad_of(lambda f, g: f) + b * grad_of(lambda f, g: g)
        assert np.max(np.abs(combined - separate)) < 1e-12

    def test_tapes_are_independent(self):
        t1, t2 = ad.Tape(), ad.Tape()
        x1 = t1.leaf(np.array(1.0))
        x2 = t2.leaf(np.array(2.0))
        with pytest.raises(ad.AutodiffError, match="different tapes"):
            ad.add(x1, x2)
