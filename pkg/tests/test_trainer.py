# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

import csv
import hashlib
import math
import tempfile
import unittest
from pathlib import Path

import numpy as np

from fundusgan import (ConfigError, CycleGanNets, DataError, DivergenceError, FakeImageBuffer, LossRecord,
                       OptimizerKind, Tensor, backward, cycle_loss, finite_diff_grad, identity_loss, load_checkpoint,
                       lsgan_loss, split_dataset, train, train_step, write_synthetic_corpus)
from fundusgan.trainer import Optimizers, fake_image_buffers, generator_objective
from tests.fixtures import relative_error, tiny_discriminator_config, tiny_generator_config, tiny_train_config


def _buffers(cfg):
    return FakeImageBuffer(cfg.buffer_size, 10), FakeImageBuffer(cfg.buffer_size, 11)


def _batch(seed: int, size: int = 16) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-1, 1, (1, 3, size, size)).astype(np.float32)


class TestLosses(unittest.TestCase):

    def test_lsgan_examples(self):
        ones = Tensor(np.ones((1, 1, 8, 8)))
        zeros = Tensor(np.zeros((1, 1, 8, 8)))
        self.assertEqual(lsgan_loss(ones, True).item(), 0.0)
        self.assertEqual(lsgan_loss(zeros, False).item(), 0.0)
        self.assertEqual(lsgan_loss(zeros, True).item(), 1.0)
        self.assertEqual(lsgan_loss(ones, False).item(), 1.0)
        self.assertAlmostEqual(lsgan_loss(Tensor(np.full((1, 1, 2, 2), 0.5)), True).item(), 0.25)

    def test_cycle_loss(self):
        x = Tensor(np.zeros((1, 3, 2, 2)))
        self.assertEqual(cycle_loss(x, x).item(), 0.0)
        y = Tensor(np.full((1, 3, 2, 2), -0.5))
        self.assertAlmostEqual(cycle_loss(x, y).item(), 0.5)

    def test_identity_loss(self):
        class Negate:
            def __call__(self, t):
                return t * -1.0

        y = Tensor(np.full((1, 3, 2, 2), 0.25))
        self.assertAlmostEqual(identity_loss(Negate(), y).item(), 0.5)


class TestFakeImageBuffer(unittest.TestCase):

    def test_fills_first(self):
        buffer = FakeImageBuffer(3, 0)
        for i in range(3):
            fresh = np.full((1, 2, 2, 2), float(i))
            np.testing.assert_array_equal(buffer.draw(fresh), fresh)
            buffer.push(fresh)
        self.assertEqual(len(buffer), 3)

    def test_mixes_history_when_full(self):
        buffer = FakeImageBuffer(2, 0)
        for i in range(2):
            fresh = np.full((1, 1, 1, 1), float(i))
            buffer.draw(fresh)
            buffer.push(fresh)
        drawn = [float(buffer.draw(np.full((1, 1, 1, 1), 9.0))[0, 0, 0, 0]) for _ in range(200)]
        self.assertTrue(any(v == 9.0 for v in drawn))
        self.assertTrue(any(v in (0.0, 1.0) for v in drawn))
        self.assertEqual(len(buffer), 2)

    def test_disabled(self):
        buffer = FakeImageBuffer(0, 0)
        fresh = np.ones((2, 1, 1, 1))
        self.assertIs(buffer.draw(fresh), fresh)
        buffer.push(fresh)
        self.assertEqual(len(buffer), 0)

    def test_reproducible(self):
        def run():
            buffer = FakeImageBuffer(2, 4)
            values = []
            for i in range(20):
                fresh = np.full((1, 1, 1, 1), float(i))
                values.append(float(buffer.draw(fresh)[0, 0, 0, 0]))
                buffer.push(fresh)
            return values
        self.assertEqual(run(), run())

    def test_resume_buffers(self):
        def draws(buffer):
            values = []
            for i in range(20):
                fresh = np.full((1, 1, 1, 1), float(i))
                values.append(float(buffer.draw(fresh)[0, 0, 0, 0]))
                buffer.push(fresh)
            return values
        first, second = fake_image_buffers(2, 0, 8)
        self.assertEqual((len(first), len(second)), (0, 0))
        again = fake_image_buffers(2, 0, 8)[0]
        self.assertEqual(draws(first), draws(again))
        self.assertNotEqual(draws(second), draws(fake_image_buffers(2, 0, 8)[0]))


class TestTrainStep(unittest.TestCase):

    def setUp(self):
        self.cfg = tiny_train_config()
        self.nets = CycleGanNets.build(self.cfg.generator, self.cfg.discriminator, 0)

    def test_record(self):
        record = train_step(_batch(1), _batch(2), self.nets, Optimizers(self.cfg, self.nets), self.cfg,
                            _buffers(self.cfg), step=1, epoch=1)
        self.assertTrue(record.is_finite())
        self.assertEqual((record.step, record.epoch), (1, 1))
        self.assertGreaterEqual(record.cycle_m, 0.0)

    def test_all_networks_updated(self):
        before = {role: model.state() for role, model in self.nets.models().items()}
        train_step(_batch(1), _batch(2), self.nets, Optimizers(self.cfg, self.nets), self.cfg, _buffers(self.cfg))
        for role, model in self.nets.models().items():
            changed = any(not np.array_equal(before[role][name], value) for name, value in model.state().items())
            self.assertTrue(changed, role)

    def test_half_steps_touch_only_their_network(self):
        nets = self.nets

        def digests():
            return {role: hashlib.sha256(b''.join(np.ascontiguousarray(v).tobytes()
                                                  for _, v in sorted(model.state().items()))).hexdigest()
                    for role, model in nets.models().items()}

        class RecordingOptimizers(Optimizers):
            changes = []

            def step(self, model, grads):
                before = digests()
                super().step(model, grads)
                after = digests()
                self.changes.append((model.role, {role for role in before if before[role] != after[role]}))

        optimizers = RecordingOptimizers(self.cfg, nets)
        train_step(_batch(1), _batch(2), nets, optimizers, self.cfg, _buffers(self.cfg))
        self.assertEqual(optimizers.changes, [('G_M', {'G_M'}), ('G_N', {'G_N'}), ('D_M', {'D_M'}), ('D_N', {'D_N'})])

    def test_zero_learning_rate(self):
        cfg = tiny_train_config(lr=0.0)
        before = {role: model.state() for role, model in self.nets.models().items()}
        train_step(_batch(1), _batch(2), self.nets, Optimizers(cfg, self.nets), cfg, _buffers(cfg))
        for role, model in self.nets.models().items():
            for name, value in model.state().items():
                np.testing.assert_array_equal(value, before[role][name])

    def test_sgd(self):
        cfg = tiny_train_config(optimizer=OptimizerKind.SGD, lr=0.01)
        record = train_step(_batch(1), _batch(2), self.nets, Optimizers(cfg, self.nets), cfg, _buffers(cfg))
        self.assertTrue(record.is_finite())

    def test_deterministic(self):
        def run():
            nets = CycleGanNets.build(self.cfg.generator, self.cfg.discriminator, 3)
            optimizers = Optimizers(self.cfg, nets)
            buffers = _buffers(self.cfg)
            records = [train_step(_batch(i), _batch(i + 100), nets, optimizers, self.cfg, buffers).row()
                       for i in range(3)]
            return records, nets.g_n.state()

        first, second = run(), run()
        self.assertEqual(first[0], second[0])
        for name, value in first[1].items():
            np.testing.assert_array_equal(value, second[1][name])

    def test_divergence(self):
        m = _batch(1)
        m[0, 0, 0, 0] = np.nan
        with self.assertRaises(DivergenceError) as context:
            train_step(m, _batch(2), self.nets, Optimizers(self.cfg, self.nets), self.cfg, _buffers(self.cfg))
        self.assertIsInstance(context.exception.record, LossRecord)

    def test_discriminators_frozen_in_generator_objective(self):
        m, n = Tensor(_batch(1)), Tensor(_batch(2))
        self.nets.zero_grad()
        with self.nets.d_m.frozen(), self.nets.d_n.frozen():
            total, _, _, _ = generator_objective(m, n, self.nets, 10.0, 5.0)
            grads = backward(total)
        self.assertTrue(any(name.startswith('G_M.') for name in grads))
        self.assertFalse(any(name.startswith('D_') for name in grads))

    def test_generator_gradient_without_auxiliary_terms(self):
        # λ_cyc = λ_id = 0 leaves the adversarial terms only
        gen = tiny_generator_config(image_size=8)
        disc = tiny_discriminator_config()
        disc.filters = (2,)
        nets = CycleGanNets.build(gen, disc, 0, dtype=np.float64)
        m = Tensor(np.random.default_rng(1).uniform(-1, 1, (1, 3, 8, 8)), dtype=np.float64)
        n = Tensor(np.random.default_rng(2).uniform(-1, 1, (1, 3, 8, 8)), dtype=np.float64)
        weight = nets.g_n.parameters()['G_N.out.weight']

        def loss():
            total, terms, _, _ = generator_objective(m, n, nets, 0.0, 0.0)
            return total

        nets.zero_grad()
        with nets.d_m.frozen(), nets.d_n.frozen():
            backward(loss())
            expected = finite_diff_grad(lambda _: loss(), weight, 1e-4)
        self.assertLess(relative_error(weight.grad, expected), 1e-4)


class TestTrain(unittest.TestCase):

    def setUp(self):
        self.dir = tempfile.TemporaryDirectory()
        root = Path(self.dir.name)
        write_synthetic_corpus(root / 'corpus', count=6, size=16, seed=0)
        self.manifest = split_dataset(root / 'corpus', 0, 0.34)
        self.out = root / 'run'

    def tearDown(self):
        self.dir.cleanup()

    def test_run(self):
        cfg = tiny_train_config(epochs=2, max_steps=0)
        result = train(cfg, self.manifest, self.out, prefetch=0)
        self.assertEqual(len(result.history), 8)
        self.assertTrue(all(r.is_finite() for r in result.history))
        self.assertTrue((self.out / 'checkpoint-final.fgan').exists())
        self.assertTrue((self.out / 'checkpoint-epoch0001.fgan').exists())
        self.assertTrue((self.out / 'samples' / 'final.png').exists())
        ckpt = load_checkpoint(result.checkpoint)
        self.assertEqual((ckpt.epoch, ckpt.step), (2, 8))

        with open(self.out / 'losses.csv', newline='') as file:
            rows = list(csv.reader(file))
        self.assertEqual(rows[0], LossRecord.header())
        self.assertEqual(len(rows), 9)

    def test_max_steps(self):
        result = train(tiny_train_config(epochs=5, max_steps=3), self.manifest, self.out, prefetch=2)
        self.assertEqual(len(result.history), 3)
        self.assertEqual(load_checkpoint(result.checkpoint).step, 3)

    def test_deterministic_files(self):
        cfg = tiny_train_config(epochs=1)
        train(cfg, self.manifest, self.out / 'a', prefetch=2)
        train(cfg, self.manifest, self.out / 'b', prefetch=0)
        for name in ('losses.csv', 'checkpoint-final.fgan'):
            self.assertEqual((self.out / 'a' / name).read_bytes(), (self.out / 'b' / name).read_bytes(), name)

    def test_resume(self):
        cfg = tiny_train_config(epochs=1)
        first = train(cfg, self.manifest, self.out, prefetch=0)
        cfg = tiny_train_config(epochs=2)
        second = train(cfg, self.manifest, self.out, resume=first.checkpoint, prefetch=0)
        self.assertEqual(len(second.history), 4)
        self.assertEqual(second.history[0].step, 5)
        with open(self.out / 'losses.csv', newline='') as file:
            self.assertEqual(len(list(csv.reader(file))), 9)

    def test_resume_reproducible(self):
        first = train(tiny_train_config(epochs=1), self.manifest, self.out, prefetch=0)
        cfg = tiny_train_config(epochs=2)
        train(cfg, self.manifest, self.out / 'r1', resume=first.checkpoint, prefetch=0)
        train(cfg, self.manifest, self.out / 'r2', resume=first.checkpoint, prefetch=0)
        for name in ('losses.csv', 'checkpoint-final.fgan'):
            self.assertEqual((self.out / 'r1' / name).read_bytes(), (self.out / 'r2' / name).read_bytes(), name)

    def test_invalid_config(self):
        with self.assertRaises(ConfigError) as context:
            train(tiny_train_config(batch_size=0), self.manifest, self.out)
        self.assertEqual(context.exception.key, 'batch_size')

    def test_empty_domain(self):
        manifest = split_dataset(Path(self.dir.name) / 'corpus', 0, 0.34)
        manifest.entries = [e for e in manifest.entries if e.domain.value == 'N']
        with self.assertRaises(DataError):
            train(tiny_train_config(), manifest, self.out)

    def test_loss_record_row(self):
        record = LossRecord(step=3, epoch=1, cycle_m=0.5)
        self.assertEqual(record.row()[:2], ['3', '1'])
        self.assertEqual(record.row()[LossRecord.header().index('cycle_m')], '0.5')
        self.assertFalse(record.is_finite())
        self.assertTrue(math.isnan(LossRecord().adv_d_m))
