"""Core tensor ops: closed-form examples, oracles, and graph mechanics."""

import numpy as np
import pytest

from osda import autodiff as ad
from osda.autodiff import ParamStore, Tensor, backward, sgd_step, topo_order
from osda.errors import ContractError, DimensionError
from osda.gradcheck import FD_STEP, finite_difference, gradient_errors


class TestAffine:
    def test_identity_weights(self):
        x = ad.tensor([[1.0, 2.0]])
        w = ad.tensor([[1.0, 0.0], [0.0, 1.0]])
        b = ad.tensor([0.0, 0.0])
        np.testing.assert_array_equal(ad.affine(x, w, b).data, [[1.0, 2.0]])

    def test_zero_weights_pass_bias(self):
        x = ad.tensor([[1.0, 2.0]])
        w = ad.tensor([[0.0, 0.0], [0.0, 0.0]])
        b = ad.tensor([3.0, 4.0])
        np.testing.assert_array_equal(ad.affine(x, w, b).data, [[3.0, 4.0]])

    def test_matches_triple_loop_oracle(self):
        """Random 4x3 @ 3x2 case against a naive triple loop."""
        rng = np.random.default_rng(7)
        x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
        out = ad.affine(ad.tensor(x), ad.tensor(w), ad.tensor(b)).data
        expected = np.zeros((4, 2))
        for r in range(4):
            for c in range(2):
                acc = b[c]
                for i in range(3):
                    acc += x[r, i] * w[i, c]
                expected[r, c] = acc
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_shape_mismatch_names_operands(self):
        x = ad.tensor(np.zeros((2, 3)))
        w = ad.tensor(np.zeros((4, 2)))
        b = ad.tensor(np.zeros(2))
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            ad.affine(x, w, b)


class TestSoftmaxStable:
    def test_uniform_at_zero_logits(self):
        out = ad.softmax_stable(ad.tensor([[0.0, 0.0, 0.0]])).data
        np.testing.assert_allclose(out, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_shift_invariance(self):
        a = ad.softmax_stable(ad.tensor([[5.0, 5.0, 5.0]])).data
        b = ad.softmax_stable(ad.tensor([[0.0, 0.0, 0.0]])).data
        np.testing.assert_array_equal(a, b)

    def test_saturation_without_overflow(self):
        out = ad.softmax_stable(ad.tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        z = rng.normal(0, 20, size=(50, 7))
        out = ad.softmax_stable(ad.tensor(z)).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


class TestLeakySoftmax:
    def test_zero_logits_closed_form(self):
        out = ad.leaky_softmax(ad.tensor([[0.0] * 10])).data
        np.testing.assert_allclose(out, np.full((1, 10), 0.05), atol=1e-15)

    def test_two_class_closed_form(self):
        out = ad.leaky_softmax(ad.tensor([[np.log(2.0), 0.0]])).data
        np.testing.assert_allclose(out, [[0.4, 0.2]], atol=1e-15)

    def test_row_sum_strictly_below_one(self):
        out = ad.leaky_softmax(ad.tensor([[20.0, 20.0]])).data
        assert out.sum() < 1.0
        assert out.sum() > 0.999

    def test_strictly_inside_unit_interval_for_extreme_logits(self):
        rng = np.random.default_rng(11)
        l = rng.normal(0, 200, size=(40, 5))  # far beyond the clamp
        out = ad.leaky_softmax(ad.tensor(l)).data
        assert np.all(out > 0.0)
        assert np.all(out < 1.0)
        assert np.all(out.sum(axis=1) < 1.0)


class TestGradReverse:
    def test_forward_is_bitwise_identity(self):
        x = ad.tensor([[1.0, 2.0]])
        out = ad.grad_reverse(x, 1.0)
        assert np.array_equal(out.data, x.data)

    def test_backward_flips_sign(self):
        x = Tensor(np.array([0.0, 0.0]), requires_grad=True)
        out = ad.grad_reverse(x, 1.0)
        out._backward(np.array([0.3, -0.5]))
        np.testing.assert_allclose(x.grad, [-0.3, 0.5], atol=1e-15)

    def test_backward_scales(self):
        x = Tensor(np.array([0.0, 0.0]), requires_grad=True)
        out = ad.grad_reverse(x, 0.5)
        out._backward(np.array([0.3, -0.5]))
        np.testing.assert_allclose(x.grad, [-0.15, 0.25], atol=1e-15)

    def test_double_reversal_is_identity_on_gradients(self):
        rng = np.random.default_rng(5)
        data = rng.normal(size=(3, 4))
        plain = Tensor(data.copy(), requires_grad=True)
        backward(ad.mean_all(ad.mul(plain, plain)))
        twice = Tensor(data.copy(), requires_grad=True)
        doubled = ad.grad_reverse(ad.grad_reverse(twice, 1.0), 1.0)
        backward(ad.mean_all(ad.mul(doubled, doubled)))
        assert np.array_equal(plain.grad, twice.grad)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ContractError):
            ad.grad_reverse(ad.tensor([1.0]), -0.1)


class TestSafeLog:
    def test_interior_value(self):
        out = ad.safe_log(ad.tensor(np.array([0.5])), 1e-7)
        np.testing.assert_allclose(out.data, np.log(0.5), atol=1e-12)

    def test_clamp_floor(self):
        out = ad.safe_log(ad.tensor(np.array([0.0])), 1e-7)
        np.testing.assert_allclose(out.data, np.log(1e-7), atol=1e-12)

    def test_clamp_ceiling(self):
        out = ad.safe_log(ad.tensor(np.array([1.0])), 1e-7)
        np.testing.assert_allclose(out.data, np.log(1.0 - 1e-7), atol=1e-12)

    def test_eps_domain_enforced(self):
        for bad in (0.0, 0.5, -1e-3):
            with pytest.raises(ContractError):
                ad.safe_log(ad.tensor(np.array([0.5])), bad)


class TestBackward:
    def test_square_derivative(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        backward(ad.mul(x, x))
        np.testing.assert_allclose(x.grad, 6.0, atol=1e-12)

    def test_constant_has_zero_gradient(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        backward(ad.add(ad.mul(x, 0.0), 5.0))
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ContractError, match="scalar"):
            backward(ad.add(x, 1.0))

    def test_topological_order_parents_first(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        y = ad.mul(x, x)
        z = ad.add(y, x)
        order = topo_order(z)
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for parent in node._parents:
                assert pos[id(parent)] < pos[id(node)]

    def test_each_node_visited_exactly_once(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        y = ad.mul(x, x)
        z = ad.add(ad.add(y, y), y)  # diamond sharing
        order = topo_order(z)
        assert len({id(n) for n in order}) == len(order)

    def test_fanout_accumulates(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        y = ad.mul(x, x)
        backward(ad.add(y, y))  # d/dx (2x^2) = 4x
        np.testing.assert_allclose(x.grad, 8.0, atol=1e-12)

    def test_detach_blocks_gradient(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        y = ad.mul(x, x)
        backward(ad.add(ad.mul(y.detach(), x), 0.0))  # treated as c*x
        np.testing.assert_allclose(x.grad, 4.0, atol=1e-12)


class TestFiniteDifferenceProperties:
    """Analytic gradients match central differences on seeded random inputs."""

    @pytest.mark.parametrize("case_seed", range(25))
    def test_composite_graph_gradients(self, case_seed):
        rng = np.random.default_rng(case_seed)
        x0 = rng.normal(size=(3, 4))

        def build(x: Tensor) -> Tensor:
            h = ad.relu(x)
            p = ad.softmax_stable(h)
            q = ad.leaky_softmax(x)
            return ad.mean_all(ad.add(ad.mul(p, q), ad.safe_log(ad.one_minus(q))))

        leaf = Tensor(x0.copy(), requires_grad=True)
        backward(build(leaf))
        numeric = finite_difference(lambda a: build(Tensor(a)).item(), x0.copy(), FD_STEP)
        _, ok = gradient_errors(leaf.grad, numeric)
        assert ok

    def test_finite_outputs_through_random_chains(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            z = rng.normal(0, 50, size=(4, 5))
            out = ad.leaky_softmax(ad.tensor(z))
            out = ad.safe_log(out)
            assert np.all(np.isfinite(out.data))


class TestSgdStep:
    def _store_with(self, value: float) -> tuple[ParamStore, str]:
        store = ParamStore()
        store.register("w", np.array([value]), "g")
        return store, "w"

    def test_first_step(self):
        store, name = self._store_with(0.0)
        sgd_step(store, {name: np.array([1.0])}, lr=0.001, momentum=0.9, groups=["g"])
        np.testing.assert_allclose(store[name].momentum, [1.0], atol=1e-15)
        np.testing.assert_allclose(store[name].value.data, [-0.001], atol=1e-15)

    def test_momentum_accumulation(self):
        store, name = self._store_with(0.0)
        for _ in range(2):
            sgd_step(store, {name: np.array([1.0])}, lr=0.001, momentum=0.9, groups=["g"])
        np.testing.assert_allclose(store[name].momentum, [1.9], atol=1e-15)
        np.testing.assert_allclose(store[name].value.data, [-0.0029], atol=1e-15)

    def test_zero_lr_updates_velocity_only(self):
        store, name = self._store_with(1.5)
        sgd_step(store, {name: np.array([2.0])}, lr=0.0, momentum=0.9, groups=["g"])
        np.testing.assert_array_equal(store[name].value.data, [1.5])
        np.testing.assert_allclose(store[name].momentum, [2.0], atol=1e-15)

    def test_unselected_groups_untouched(self):
        store = ParamStore()
        store.register("a", np.array([1.0]), "g1")
        store.register("b", np.array([2.0]), "g2")
        sgd_step(store, {"a": np.array([1.0])}, lr=0.1, momentum=0.0, groups=["g1"])
        np.testing.assert_array_equal(store["b"].value.data, [2.0])

    def test_missing_gradient_is_contract_error(self):
        store, _ = self._store_with(0.0)
        with pytest.raises(ContractError, match="missing gradient"):
            sgd_step(store, {}, lr=0.1, momentum=0.9, groups=["g"])

    def test_duplicate_registration_rejected(self):
        store, name = self._store_with(0.0)
        with pytest.raises(ContractError):
            store.register(name, np.zeros(1), "g")


class TestTensorValidation:
    def test_non_finite_rejected(self):
        with pytest.raises(ContractError):
            ad.tensor([np.nan])
        with pytest.raises(ContractError):
            ad.tensor([np.inf])

    def test_elementwise_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.add(ad.tensor(np.zeros((2, 2))), ad.tensor(np.zeros((2, 3))))
        with pytest.raises(DimensionError):
            ad.mul(ad.tensor(np.zeros(2)), ad.tensor(np.zeros(3)))
