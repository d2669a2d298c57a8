# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

import csv
import tempfile
import unittest
from pathlib import Path

import numpy as np

from fundusgan import (BlockLabel, CheckpointError, CycleGanNets, MetricError, MscnConfig, NiqeConfig, PiqeConfig,
                       fit_niqe_model, load_niqe_model, mscn, niqe_distance, niqe_score, piqe, save_checkpoint,
                       save_niqe_model, score_corpus)
from fundusgan._common.container import encode_container
from fundusgan.iqa import (NIQE_ROLE, _is_impaired, _is_noisy, aggd_features, gaussian_window, ggd_features,
                           image_features, summary_path, to_luminance)
from fundusgan.synthetic import add_gaussian_noise, clean_fundus
from tests.fixtures import random_image, tiny_discriminator_config, tiny_generator_config, write_images

NOISE_SIGMA = 25 / 255
FIXTURE_COUNT = 20


def small_niqe_config() -> NiqeConfig:
    return NiqeConfig(patch_size=32, min_images=10)


class TestMscn(unittest.TestCase):

    def test_window(self):
        w = gaussian_window(3, 7 / 6)
        self.assertEqual(w.shape, (7,))
        self.assertAlmostEqual(float(w.sum()), 1.0, places=12)
        np.testing.assert_allclose(w, w[::-1])
        self.assertEqual(MscnConfig().window_size, 7)

    def test_constant_image(self):
        field = mscn(np.full((20, 24), 100.0))
        np.testing.assert_allclose(field.coefficients, 0.0, atol=1e-6)
        np.testing.assert_allclose(field.mu, 100.0)
        self.assertTrue(np.all(field.sigma >= 0))

    def test_normalization(self):
        rng = np.random.default_rng(0)
        image = rng.normal(128, 30, (64, 64))
        field = mscn(image)
        np.testing.assert_allclose(field.coefficients, (image - field.mu) / (field.sigma + 1.0))
        self.assertLess(abs(float(field.coefficients.mean())), 0.05)
        self.assertEqual(field.window.shape, (7, 7))

    def test_too_small(self):
        with self.assertRaises(MetricError):
            mscn(np.zeros((7, 20)))
        with self.assertRaises(MetricError):
            mscn(np.zeros((3, 20, 20)))

    def test_luminance(self):
        image = np.stack([np.full((2, 2), 1.0), np.full((2, 2), -1.0), np.full((2, 2), -1.0)])
        np.testing.assert_allclose(to_luminance(image), np.full((2, 2), 0.299 * 255))
        with self.assertRaises(MetricError):
            to_luminance(np.zeros((4, 2, 2)))


class TestPiqe(unittest.TestCase):

    def test_range_on_random_images(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            score = piqe(random_image(rng, 32)).score
            self.assertGreaterEqual(score, 0.0)
            self.assertLessEqual(score, 100.0)

    def test_constant_image(self):
        report = piqe(np.zeros((3, 64, 64), dtype=np.float32))
        self.assertTrue(report.no_activity)
        self.assertEqual(report.score, 100.0)
        self.assertTrue(np.all(report.labels == BlockLabel.INACTIVE))
        self.assertFalse(report.activity_mask.any())

    def test_noise_raises_score(self):
        rng = np.random.default_rng(2)
        higher = 0
        for _ in range(FIXTURE_COUNT):
            clean = clean_fundus(rng, 64)
            noisy = add_gaussian_noise(clean, NOISE_SIGMA, rng)
            higher += piqe(noisy).score > piqe(clean).score
        self.assertGreaterEqual(higher, 0.9 * FIXTURE_COUNT)

    def test_noise_labels(self):
        rng = np.random.default_rng(3)
        noise = add_gaussian_noise(np.zeros((3, 64, 64), dtype=np.float32), NOISE_SIGMA, rng)
        report = piqe(noise)
        self.assertEqual(report.active_count, 16)
        self.assertGreater(np.count_nonzero(report.labels == BlockLabel.GAUSSIAN_NOISE), 8)
        self.assertTrue(report.noise_mask.any())

    def test_partial_blocks_discarded(self):
        report = piqe(random_image(np.random.default_rng(4), 40))
        self.assertEqual(report.labels.shape, (2, 2))
        mask = report.activity_mask
        self.assertEqual(mask.shape, (40, 40))
        self.assertFalse(mask[32:, :].any())
        self.assertFalse(mask[:, 32:].any())

    def test_luminance_input(self):
        luminance = np.random.default_rng(5).uniform(0, 255, (32, 32))
        self.assertEqual(piqe(luminance).labels.shape, (2, 2))

    def test_too_small(self):
        with self.assertRaises(MetricError):
            piqe(np.zeros((3, 8, 64), dtype=np.float32))

    def test_custom_block_size(self):
        report = piqe(random_image(np.random.default_rng(6), 32), PiqeConfig(block_size=8, segment_length=4))
        self.assertEqual(report.labels.shape, (4, 4))

    def test_score_averages_distorted_blocks(self):
        rng = np.random.default_rng(8)
        luminance = rng.uniform(0, 255, (64, 64))
        luminance[:8, :] = 128.0
        config = PiqeConfig(noise_ratio=1.0)
        report = piqe(luminance, config)
        self.assertEqual(report.active_count, 16)
        self.assertTrue(np.all(report.labels[0] == BlockLabel.BLOCKING_ARTIFACT))
        self.assertLess(report.distorted_count, report.active_count)

        coefficients = mscn(luminance).coefficients
        distorted = report.artifact_blocks | report.noise_blocks
        expected = [100.0 * min(float(np.var(coefficients[16 * i:16 * i + 16, 16 * j:16 * j + 16], ddof=1)), 1.0)
                    for i, j in zip(*np.nonzero(distorted))]
        self.assertAlmostEqual(report.score, float(np.mean(expected)), places=9)
        np.testing.assert_array_equal(report.block_scores[~distorted], 0.0)

    def test_active_but_undistorted(self):
        luminance = np.random.default_rng(9).uniform(0, 255, (32, 32))
        report = piqe(luminance, PiqeConfig(impaired_threshold=0.0, noise_ratio=1.0))
        self.assertEqual(report.active_count, 4)
        self.assertEqual(report.distorted_count, 0)
        self.assertFalse(report.no_activity)
        self.assertEqual(report.score, 0.0)


def checkerboard(size: int) -> np.ndarray:
    return np.where(np.add.outer(np.arange(size), np.arange(size)) % 2 == 0, 1.0, -1.0)


class TestPiqeCriteria(unittest.TestCase):

    def test_blocking_segment_threshold(self):
        config = PiqeConfig()
        block = checkerboard(16)
        self.assertFalse(_is_impaired(block, config))
        # alternating ±a over 6 values has a sample variance of 1.2·a²
        for amplitude, impaired in ((0.28, True), (0.3, False), (0.2, True)):
            block = checkerboard(16)
            block[0, :] *= amplitude
            self.assertEqual(_is_impaired(block, config), impaired, amplitude)

    def test_noise_ratio_threshold(self):
        config = PiqeConfig()
        # outer ring ±c, center region ±1: the block variance is (64 + 192·c²) / 255
        for outer, noisy in ((1.0, True), (0.6, True), (0.55, False), (0.0, False)):
            block = outer * checkerboard(16)
            block[4:12, 4:12] = checkerboard(8)
            variance = float(np.var(block, ddof=1))
            self.assertEqual(_is_noisy(block, variance, config), noisy, outer)


class TestNiqeFeatures(unittest.TestCase):

    def test_ggd_gaussian(self):
        x = np.random.default_rng(0).normal(0, 1, 200000)
        alpha, variance = ggd_features(x)
        self.assertAlmostEqual(alpha, 2.0, delta=0.1)
        self.assertAlmostEqual(variance, 1.0, delta=0.02)

    def test_ggd_laplacian(self):
        alpha, _ = ggd_features(np.random.default_rng(0).laplace(0, 1, 200000))
        self.assertAlmostEqual(alpha, 1.0, delta=0.1)

    def test_aggd_symmetric(self):
        alpha, mean, left, right = aggd_features(np.random.default_rng(0).normal(0, 1, 200000))
        self.assertAlmostEqual(alpha, 2.0, delta=0.1)
        self.assertAlmostEqual(mean, 0.0, delta=0.02)
        self.assertAlmostEqual(left, right, delta=0.02)

    def test_zero_input(self):
        self.assertEqual(ggd_features(np.zeros(10))[1], 0.0)
        self.assertEqual(aggd_features(np.zeros(10))[1:], (0.0, 0.0, 0.0))


class TestNiqeDistance(unittest.TestCase):

    def test_equal_means(self):
        rng = np.random.default_rng(0)
        mean = rng.normal(size=36)
        self.assertEqual(niqe_distance(mean, np.eye(36), mean.copy(), np.zeros((36, 36))), 0.0)

    def test_known_value(self):
        self.assertAlmostEqual(niqe_distance(np.array([3.0, 4.0]), np.eye(2), np.zeros(2), np.eye(2)), 5.0)
        # pooled covariance halves the zero second covariance
        self.assertAlmostEqual(niqe_distance(np.array([1.0, 0.0]), 2 * np.eye(2), np.zeros(2), np.zeros((2, 2))),
                               1.0)

    def test_singular(self):
        with self.assertRaises(MetricError):
            niqe_distance(np.ones(2), np.zeros((2, 2)), np.zeros(2), np.zeros((2, 2)))

    def test_rotation_invariance(self):
        rng = np.random.default_rng(12)
        a, b = rng.normal(size=(2, 6, 6))
        cov1, cov2 = a @ a.T + np.eye(6), b @ b.T
        mean1, mean2 = rng.normal(size=(2, 6))
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        expected = niqe_distance(mean1, cov1, mean2, cov2)
        rotated = niqe_distance(q @ mean1, q @ cov1 @ q.T, q @ mean2, q @ cov2 @ q.T)
        self.assertAlmostEqual(rotated, expected, places=9)


class TestNiqeModel(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        rng = np.random.default_rng(10)
        cls.corpus = [clean_fundus(rng, 64) for _ in range(60)]
        cls.model = fit_niqe_model(cls.corpus, small_niqe_config())

    def test_model(self):
        model = self.model
        self.assertEqual(model.mean.shape, (36,))
        self.assertEqual(model.cov.shape, (36, 36))
        np.testing.assert_array_equal(model.cov, model.cov.T)
        self.assertEqual(model.image_count, 60)
        self.assertEqual(len(model.fingerprint), 64)

    def test_fingerprint(self):
        again = fit_niqe_model(self.corpus, small_niqe_config())
        self.assertEqual(again.fingerprint, self.model.fingerprint)
        np.testing.assert_array_equal(again.cov, self.model.cov)
        other = fit_niqe_model(self.corpus, NiqeConfig(patch_size=32, min_images=10, sharpness_percentile=50.0))
        self.assertNotEqual(other.fingerprint, self.model.fingerprint)

    def test_sharpness_gate(self):
        config = small_niqe_config()
        rng = np.random.default_rng(14)
        images, expected = [], []
        for _ in range(10):
            luminance = np.full((64, 64), 128.0)
            for k, (y, x) in enumerate(((0, 0), (0, 32), (32, 0), (32, 32))):
                luminance[y:y + 32, x:x + 32] += rng.normal(0, 8.0 * (k + 1), (32, 32))
            luminance = np.clip(luminance, 0, 255)
            features, sharpness = image_features(luminance, config)
            images.append(luminance)
            # of four patches, only the sharpest reaches the 75th percentile
            expected.append(features[np.argmax(sharpness)])
        model = fit_niqe_model(images, config)
        np.testing.assert_allclose(model.mean, np.mean(expected, axis=0), rtol=1e-10)

    def test_noise_raises_score(self):
        rng = np.random.default_rng(11)
        higher = 0
        for _ in range(FIXTURE_COUNT):
            clean = clean_fundus(rng, 64)
            noisy = add_gaussian_noise(clean, NOISE_SIGMA, rng)
            higher += niqe_score(noisy, self.model) > niqe_score(clean, self.model)
        self.assertGreaterEqual(higher, 0.9 * FIXTURE_COUNT)

    def test_fitting_images_score_low(self):
        scores = np.array([niqe_score(image, self.model) for image in self.corpus])
        rng = np.random.default_rng(13)
        noisy = np.array([niqe_score(add_gaussian_noise(image, NOISE_SIGMA, rng), self.model)
                          for image in self.corpus[:FIXTURE_COUNT]])
        self.assertGreaterEqual(np.count_nonzero(scores <= scores.mean() + scores.std()), 0.75 * len(scores))
        self.assertLess(float(np.median(scores)), float(np.median(noisy)))

    def test_save_and_load(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / 'niqe.fgan'
            save_niqe_model(self.model, path)
            loaded = load_niqe_model(path)
        np.testing.assert_array_equal(loaded.mean, self.model.mean)
        np.testing.assert_array_equal(loaded.cov, self.model.cov)
        self.assertEqual(loaded.config, self.model.config)
        self.assertEqual(loaded.fingerprint, self.model.fingerprint)
        self.assertEqual(loaded.image_count, 60)

    def test_load_network_checkpoint(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / 'model.fgan'
            nets = CycleGanNets.build(tiny_generator_config(), tiny_discriminator_config(), 0)
            save_checkpoint(nets.models(), {'epoch': 0, 'step': 0, 'seed': 0}, path)
            with self.assertRaises(CheckpointError):
                load_niqe_model(path)

    def test_missing_configuration(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / 'niqe.fgan'
            path.write_bytes(encode_container([NIQE_ROLE], {}, {'mean': self.model.mean, 'cov': self.model.cov}))
            with self.assertRaises(CheckpointError) as context:
                load_niqe_model(path)
        self.assertIn('configuration', str(context.exception))

    def test_too_few_images(self):
        with self.assertRaises(MetricError) as context:
            fit_niqe_model(self.corpus[:3], small_niqe_config())
        self.assertIn('at least 10', str(context.exception))

    def test_image_too_small(self):
        with self.assertRaises(MetricError):
            fit_niqe_model([np.zeros((3, 16, 16), dtype=np.float32)] * 10, small_niqe_config())
        with self.assertRaises(MetricError):
            niqe_score(np.zeros((3, 16, 16), dtype=np.float32), self.model)

    def test_degenerate_corpus(self):
        with self.assertRaises(MetricError) as context:
            fit_niqe_model([np.full((3, 64, 64), -1.0, dtype=np.float32)] * 10, small_niqe_config())
        self.assertIn('degenerate', str(context.exception))


class TestScoreCorpus(unittest.TestCase):

    def setUp(self):
        self.dir = tempfile.TemporaryDirectory()
        self.root = Path(self.dir.name)

    def tearDown(self):
        self.dir.cleanup()

    def test_rows_and_summary(self):
        good = write_images(self.root / 'in', 2, 32, 0)
        small = write_images(self.root / 'small', 1, 8, 1)
        broken = self.root / 'broken.png'
        broken.write_bytes(b'not an image')
        images = [(good[0], 'input'), (broken, 'input'), (good[1], 'output'), (small[0], 'output')]
        out = self.root / 'scores.csv'

        rows = score_corpus(images, None, out)
        self.assertEqual([r.error == '' for r in rows], [True, False, True, False])
        self.assertIsNone(rows[0].niqe)
        self.assertTrue(0 <= rows[0].piqe <= 100)

        with open(out, newline='') as file:
            table = list(csv.reader(file))
        self.assertEqual(table[0], ['image', 'group', 'niqe', 'piqe', 'error'])
        self.assertEqual(len(table), 5)
        self.assertEqual(table[2][0], broken.as_posix())
        self.assertNotEqual(table[2][4], '')

        with open(summary_path(out), newline='') as file:
            summary = list(csv.reader(file))
        self.assertEqual(summary_path(out).name, 'scores-summary.csv')
        self.assertEqual([row[:3] for row in summary[1:]], [['input', '2', '1'], ['output', '2', '1']])
        self.assertEqual(float(summary[1][5]), rows[0].piqe)
        self.assertEqual(summary[1][3], '')
