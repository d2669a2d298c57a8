# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

import unittest

import numpy as np

from fundusgan import (NumericalError, Parameter, ShapeError, TapeError, Tensor, backward, elementwise,
                       finite_diff_grad, no_grad, reduce)
from tests.fixtures import relative_error


class TestTensor(unittest.TestCase):

    def test_default_dtype(self):
        self.assertEqual(Tensor([1.0, 2.0]).dtype, np.float32)
        self.assertEqual(Tensor(np.zeros(3)).dtype, np.float64)
        self.assertEqual(Tensor(np.zeros(3), dtype=np.float32).dtype, np.float32)

    def test_unsupported_dtype(self):
        with self.assertRaises(ValueError):
            Tensor(np.zeros(3), dtype=np.int32)

    def test_item(self):
        self.assertEqual(Tensor(np.array([[2.5]])).item(), 2.5)
        with self.assertRaises(ShapeError):
            Tensor(np.zeros(2)).item()

    def test_parameter_assign(self):
        param = Parameter(np.zeros((2, 2)), 'p')
        param.assign(np.ones((2, 2)))
        self.assertTrue(np.all(param.data == 1))
        with self.assertRaises(ShapeError) as context:
            param.assign(np.ones(3))
        self.assertIn('parameter p', str(context.exception))


class TestBackward(unittest.TestCase):

    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True, name='x')
        grads = backward(reduce('sum', elementwise('square', x)))
        np.testing.assert_array_equal(grads['x'], [2.0, -4.0, 6.0])
        np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])

    def test_paths_are_summed(self):
        # x enters the loss twice: loss = Σ (x + x·x)
        x = Tensor(np.array([0.5, 2.0]), requires_grad=True)
        backward(reduce('sum', x + x * x))
        np.testing.assert_array_equal(x.grad, [2.0, 5.0])

    def test_leaf_gradients_accumulate(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward(reduce('sum', x * 3.0))
        backward(reduce('sum', x * 3.0))
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])
        x.zero_grad()
        self.assertIsNone(x.grad)

    def test_mean_gradient(self):
        x = Tensor(np.zeros((2, 5)), requires_grad=True)
        backward(reduce('mean', x))
        np.testing.assert_array_equal(x.grad, np.full((2, 5), 0.1))

    def test_partial_reduction(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        y = reduce('sum', x, axes=[1])
        self.assertEqual(y.shape, (2,))
        backward(reduce('sum', y * Tensor(np.array([1.0, 2.0]))))
        np.testing.assert_array_equal(x.grad, [[1, 1, 1], [2, 2, 2]])

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with self.assertRaises(TapeError):
            backward(x * 2.0)

    def test_consumed_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = reduce('sum', x * 2.0)
        backward(loss)
        with self.assertRaises(TapeError):
            backward(loss)

    def test_intermediate_of_consumed_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * 2.0
        backward(reduce('sum', y))
        with self.assertRaises(TapeError):
            reduce('sum', y)
        # detached copies can be reused
        z = reduce('sum', y.detach())
        self.assertEqual(z.item(), 6.0)

    def test_no_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = reduce('sum', x * 2.0)
        self.assertFalse(y.requires_grad)
        with self.assertRaises(TapeError):
            backward(y)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            elementwise('add', Tensor(np.ones(3)), Tensor(np.ones(4)))
        with self.assertRaises(ShapeError):
            reduce('sum', Tensor(np.ones(3)), axes=[1])


class TestFiniteDifferences(unittest.TestCase):

    def test_quadratic(self):
        x = Tensor(np.array([1.0, -3.0]))
        grad = finite_diff_grad(lambda t: reduce('sum', elementwise('square', t)), x, 1e-4)
        np.testing.assert_allclose(grad, [2.0, -6.0], rtol=1e-8)
        # x is restored
        np.testing.assert_array_equal(x.data, [1.0, -3.0])

    def test_non_finite_value(self):
        x = Tensor(np.array([1.0]))
        with self.assertRaises(NumericalError):
            finite_diff_grad(lambda t: float('nan'), x)

    def test_invalid_step(self):
        with self.assertRaises(ValueError):
            finite_diff_grad(lambda t: 0.0, Tensor(np.zeros(1)), 0.0)

    def test_relative_error_per_element(self):
        # an error on a small entry is not hidden by a large one
        self.assertAlmostEqual(relative_error(np.array([100.0, 1e-3]), np.array([100.0, 2e-3])), 0.5)
        self.assertEqual(relative_error(np.zeros(3), np.zeros(3)), 0.0)
        self.assertAlmostEqual(relative_error(np.array([1e-9]), np.array([0.0])), 0.1)
