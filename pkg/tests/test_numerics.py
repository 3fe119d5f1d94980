import unittest
import warnings
import os
import sys

import numpy as np

# Добавляем родительскую директорию в путь для импорта модулей
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from protoinfomax import numerics as nx
from protoinfomax.exceptions import GradientError, NumericsError, ShapeError


def leaf(array):
    return nx.Tensor(np.array(array, dtype=np.float64), requires_grad=True)


class TestForward(unittest.TestCase):
    """Тесты прямого прохода"""

    def test_1_elementwise_and_matmul(self):
        """1. Значения add, mul и matmul совпадают с numpy"""
        a = nx.Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = nx.Tensor([[5.0, 6.0], [7.0, 8.0]])

        np.testing.assert_array_equal((a + b).data, [[6, 8], [10, 12]])
        np.testing.assert_array_equal((a * b).data, [[5, 12], [21, 32]])
        np.testing.assert_array_equal((a @ b).data, [[19, 22], [43, 50]])
        np.testing.assert_array_equal((a - 1.0).data, [[0, 1], [2, 3]])

    def test_2_shape_mismatch(self):
        """2. Несовместимые формы приводят к ShapeError с именем операции"""
        a = nx.Tensor(np.ones((2, 3)))
        b = nx.Tensor(np.ones((3, 2)))
        with self.assertRaises(ShapeError) as context:
            nx.add(a, b)
        self.assertIn('add', str(context.exception))
        with self.assertRaises(ShapeError):
            nx.matmul(a, a)
        with self.assertRaises(ShapeError):
            nx.Tensor(np.ones((2, 3))) * nx.Tensor(np.ones((1, 3)))

    def test_3_dtype_preserved(self):
        """3. float32 сохраняется, целые приводятся к float64"""
        self.assertEqual(nx.Tensor(np.ones(3, dtype=np.float32)).data.dtype, np.float32)
        self.assertEqual(nx.Tensor([1, 2, 3]).data.dtype, np.float64)

    def test_4_masked_operations(self):
        """4. Маскированные softmax и среднее"""
        a = nx.Tensor([[1.0, 2.0, 3.0]])
        y = nx.softmax(a, axis=1, mask=np.array([[True, True, False]]))
        self.assertEqual(y.data[0, 2], 0.0)
        self.assertAlmostEqual(float(y.data.sum()), 1.0, places=12)

        values = nx.Tensor([[[1.0], [3.0], [100.0]]])
        mean = nx.masked_mean(values, np.array([[1, 1, 0]]), axis=1)
        np.testing.assert_allclose(mean.data, [[2.0]])

    def test_5_empty_masks(self):
        """5. Полностью замаскированная ось приводит к NumericsError"""
        a = nx.Tensor([[1.0, 2.0]])
        with self.assertRaises(NumericsError):
            nx.softmax(a, axis=1, mask=np.array([[False, False]]))
        with self.assertRaises(NumericsError):
            nx.masked_mean(nx.Tensor(np.ones((1, 2, 3))), np.array([[0, 0]]), axis=1)

    def test_6_no_grad(self):
        """6. Внутри no_grad граф не строится"""
        x = leaf([1.0, 2.0])
        with nx.no_grad():
            self.assertFalse(nx.is_grad_enabled())
            y = nx.sum(x * x)
        self.assertTrue(nx.is_grad_enabled())
        self.assertFalse(y.requires_grad)

    def test_7_item(self):
        """7. item работает только для одного элемента"""
        self.assertEqual(nx.Tensor(3.5).item(), 3.5)
        with self.assertRaises(ShapeError):
            nx.Tensor([1.0, 2.0]).item()


class TestBackward(unittest.TestCase):
    """Тесты обратного прохода"""

    def test_1_accumulation(self):
        """1. Тензор, использованный дважды: градиент 2x + 1"""
        x = leaf([1.0, -2.0, 3.0])
        grads = nx.backward(nx.sum(x * x + x))
        np.testing.assert_allclose(grads[x], [3.0, -3.0, 7.0])
        np.testing.assert_allclose(x.grad, [3.0, -3.0, 7.0])

    def test_2_scalar_broadcast_gradient(self):
        """2. Градиент скалярного операнда суммируется"""
        x = leaf([1.0, 2.0, 3.0])
        scale = leaf(2.0)
        nx.backward(nx.sum(x * scale))
        self.assertAlmostEqual(float(scale.grad), 6.0)
        np.testing.assert_allclose(x.grad, [2.0, 2.0, 2.0])

    def test_3_non_scalar_loss(self):
        """3. backward от нескалярного тензора запрещён"""
        x = leaf([1.0, 2.0])
        with self.assertRaises(GradientError):
            nx.backward(x * 2.0)

    def test_4_repeated_backward(self):
        """4. Повторный backward по тому же графу запрещён"""
        x = leaf([1.0, 2.0])
        loss = nx.sum(x * x)
        nx.backward(loss)
        with self.assertRaises(GradientError):
            nx.backward(loss)

    def test_5_detached_loss_warns(self):
        """5. Граф без параметров: предупреждение и пустой результат"""
        loss = nx.sum(nx.Tensor([1.0, 2.0]))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always')
            grads = nx.backward(loss)
        self.assertEqual(grads, {})
        self.assertTrue(any(issubclass(w.category, RuntimeWarning) for w in caught))

    def test_6_tape_order(self):
        """6. Лента: родители раньше потомков"""
        x = leaf([1.0, 2.0])
        y = nx.tanh(x)
        z = nx.sum(y * x)
        tape = nx.Tape.record(z)
        position = {id(node): index for index, node in enumerate(tape.nodes)}

        self.assertEqual(len(tape), 4)
        self.assertLess(position[id(x)], position[id(y)])
        self.assertLess(position[id(y)], position[id(z)])

    def test_7_clamp_gradient(self):
        """7. clamp пропускает градиент только внутри интервала"""
        x = leaf([-2.0, 0.5, 2.0])
        nx.backward(nx.sum(nx.clamp(x, -1.0, 1.0)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_8_max_gradient(self):
        """8. max: градиент уходит в первый аргмаксимум"""
        x = leaf([[1.0, 3.0, 3.0], [5.0, 0.0, 1.0]])
        nx.backward(nx.sum(nx.max(x, axis=1)))
        np.testing.assert_array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])


class TestGradCheck(unittest.TestCase):
    """Проверка градиентов конечными разностями"""

    def setUp(self):
        self.rng = np.random.default_rng(11)

    def normal(self, *shape):
        return leaf(self.rng.normal(size=shape))

    def positive(self, *shape):
        return leaf(self.rng.uniform(0.5, 2.0, size=shape))

    def assertGradients(self, f, inputs):
        report = nx.grad_check(f, inputs)
        self.assertTrue(report.passed, f"max relative error {report.max_relative_error}")

    def test_1_elementwise(self):
        """1. Поэлементные операции"""
        a, b = self.normal(3, 4), self.positive(3, 4)
        self.assertGradients(lambda a, b: nx.sum(nx.sigmoid(a) * nx.tanh(b) + nx.exp(a) / b), [a, b])
        self.assertGradients(lambda b: nx.sum(nx.log(b) * nx.sqrt(b) - b), [b])
        self.assertGradients(lambda a: nx.sum(nx.clamp(a * 0.1, -0.9, 0.9) * a), [a])

    def test_2_matmul_variants(self):
        """2. Матричные произведения 2D, ND@2D и пакетное"""
        a, b = self.normal(3, 4), self.normal(4, 2)
        self.assertGradients(lambda a, b: nx.sum(nx.tanh(a @ b)), [a, b])

        c = self.normal(2, 3, 4)
        self.assertGradients(lambda c, b: nx.sum(nx.tanh(c @ b)), [c, b])

        d = self.normal(2, 4, 3)
        self.assertGradients(lambda c, d: nx.sum(nx.tanh(nx.matmul(c, d))), [c, d])

    def test_3_shape_operations(self):
        """3. concat, stack, срезы, take_rows, reshape, transpose, expand"""
        a, b = self.normal(2, 3), self.normal(2, 3)
        weights = nx.Tensor(self.rng.normal(size=(4, 3)))
        self.assertGradients(lambda a, b: nx.sum(nx.concat([a, b], axis=0) * weights), [a, b])

        w2 = nx.Tensor(self.rng.normal(size=(2, 2, 3)))
        self.assertGradients(lambda a, b: nx.sum(nx.stack([a, b], axis=1) * w2), [a, b])
        self.assertGradients(lambda a: nx.sum(nx.tanh(a[:, 1:]) * a[:, :2]), [a])

        table = self.normal(5, 3)
        self.assertGradients(lambda t: nx.sum(nx.tanh(nx.take_rows(t, [0, 3, 3, 1]))), [table])

        fixed = nx.Tensor(self.rng.normal(size=(2, 3)))
        self.assertGradients(
            lambda a: nx.sum(nx.transpose(nx.tanh(nx.reshape(a, (3, 2)))) @ nx.transpose(fixed)), [a])

        row = self.normal(1, 3)
        self.assertGradients(lambda r: nx.sum(nx.tanh(nx.expand(r, (4, 3))) * weights), [row])
        vector = self.normal(3)
        self.assertGradients(lambda v: nx.sum(nx.expand(v, (2, 4, 3)) * nx.Tensor(
            np.arange(24.0).reshape(2, 4, 3))), [vector])

    def test_4_reductions(self):
        """4. sum, mean, max, logsumexp, softmax и masked_mean"""
        a = self.normal(3, 4)
        w = nx.Tensor(self.rng.normal(size=(3, 4)))
        mask = np.array([[True, True, False, True], [True, False, False, False],
                         [True, True, True, True]])

        self.assertGradients(
            lambda a: nx.sum(nx.expand(nx.tanh(nx.mean(a, axis=1, keepdims=True)), (3, 4)) * a), [a])
        self.assertGradients(lambda a: nx.sum(nx.max(a, axis=1) * nx.mean(a, axis=1)), [a])
        self.assertGradients(lambda a: nx.sum(nx.logsumexp(a, axis=0)), [a])
        self.assertGradients(lambda a: nx.sum(nx.softmax(a, axis=1, mask=mask) * w), [a])

        b = self.normal(2, 3, 2)
        self.assertGradients(lambda b: nx.sum(nx.tanh(nx.masked_mean(b, np.array([[1, 1, 0], [0, 1, 1]]),
                                                                      axis=1))), [b])

    def test_5_random_compositions(self):
        """5. Случайные композиции на 100 зёрнах"""
        for seed in range(100):
            rng = np.random.default_rng(seed)
            x = leaf(rng.normal(size=(2, 3)))
            w = leaf(rng.normal(size=(3, 2)))
            report = nx.grad_check(
                lambda x, w: nx.mean(nx.log(nx.sigmoid(x @ w) + 0.5))
                - nx.sum(nx.softmax(x, axis=1)[:, :1]),
                [x, w])
            self.assertTrue(report.passed, f"seed {seed}: {report.max_relative_error}")

    def test_6_detects_wrong_gradient(self):
        """6. Ошибочное правило обратного прохода обнаруживается"""
        def wrong_square(t):
            return nx._result(t.data ** 2, (t,), lambda g: (g * 3.0,), "wrong_square")

        x = self.normal(4)
        report = nx.grad_check(lambda x: nx.sum(wrong_square(x)), [x])
        self.assertFalse(report.passed)

    def test_7_requires_float64(self):
        """7. grad_check отклоняет float32"""
        x = nx.Tensor(np.ones(3, dtype=np.float32))
        with self.assertRaises(NumericsError):
            nx.grad_check(lambda x: nx.sum(x), [x])


if __name__ == '__main__':
    unittest.main()
