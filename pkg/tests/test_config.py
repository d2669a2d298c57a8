# fundusgan – Artifact reduction for fundus images
# Copyright (c) 2024 Manuel Bleichenbacher
# Licensed under MIT License
# https://opensource.org/licenses/MIT

import tempfile
import unittest
from pathlib import Path

from fundusgan import Activation, CliConfig, ConfigError, NormMode, OptimizerKind
from fundusgan.config import EFFECTIVE_CONFIG_NAME, ConfigParser


class TestConfigParser(unittest.TestCase):

    def test_values(self):
        values = ConfigParser.parse_text('# training\n'
                                         'epochs = 3   # short run\n'
                                         '\n'
                                         'lr=0.001\n'
                                         'disc_filters = 8, 16\n'
                                         'norm_affine = yes\n'
                                         'optimizer = sgd\n')
        self.assertEqual(values, {'epochs': 3, 'lr': 0.001, 'disc_filters': (8, 16), 'norm_affine': True,
                                  'optimizer': 'sgd'})

    def test_unknown_key(self):
        with self.assertRaises(ConfigError) as context:
            ConfigParser.parse_text('epochs = 3\nlearning_rate = 0.1\n')
        self.assertEqual(context.exception.line, 2)
        self.assertEqual(context.exception.key, 'learning_rate')
        self.assertIn('line 2', str(context.exception))

    def test_missing_assignment(self):
        with self.assertRaises(ConfigError) as context:
            ConfigParser.parse_text('epochs 3\n')
        self.assertEqual(context.exception.line, 1)
        self.assertIsNone(context.exception.key)

    def test_invalid_value(self):
        with self.assertRaises(ConfigError) as context:
            ConfigParser.parse_text('\n\nbatch_size = two\n')
        self.assertEqual((context.exception.line, context.exception.key), (3, 'batch_size'))

    def test_out_of_range(self):
        for text, key in (('beta1 = 1.0', 'beta1'), ('image_size = 30', 'image_size'),
                          ('lr = -0.1', 'lr'), ('disc_filters = 8,0', 'disc_filters'),
                          ('generator_norm = layer', 'generator_norm'), ('norm_affine = maybe', 'norm_affine'),
                          ('niqe_sharpness_percentile = 101', 'niqe_sharpness_percentile')):
            with self.assertRaises(ConfigError, msg=text) as context:
                ConfigParser.parse_text(text)
            self.assertEqual(context.exception.key, key)

    def test_duplicate_key(self):
        with self.assertRaises(ConfigError) as context:
            ConfigParser.parse_text('seed = 1\nseed = 2\n')
        self.assertEqual(context.exception.line, 2)
        self.assertIn('line 1', str(context.exception))


class TestCliConfig(unittest.TestCase):

    def setUp(self):
        self.dir = tempfile.TemporaryDirectory()
        self.root = Path(self.dir.name)

    def tearDown(self):
        self.dir.cleanup()

    def test_full_scale_preset(self):
        config = CliConfig.load()
        generator = config.generator_config()
        self.assertEqual((generator.image_size, generator.base_filters, generator.n_res_blocks), (256, 64, 9))
        self.assertEqual(generator.norm, NormMode.INSTANCE)
        self.assertEqual(generator.activation, Activation.LEAKY)
        self.assertEqual(config.discriminator_config().filters, (64, 128, 256, 512, 512))
        train = config.train_config()
        self.assertEqual(train.epochs, 200)
        self.assertEqual(train.lr, 0.000364)
        self.assertEqual(train.beta1, 0.5032)
        self.assertEqual(train.optimizer, OptimizerKind.ADAM)
        self.assertEqual(config.niqe_config().patch_size, 96)
        self.assertEqual(config.piqe_config().block_size, 16)

    def test_toy_preset(self):
        config = CliConfig.load('toy')
        self.assertEqual(config['image_size'], 32)
        self.assertEqual(config['n_res_blocks'], 3)
        self.assertEqual(config.discriminator_config().filters, (16, 32, 64))
        self.assertEqual(config['max_steps'], 500)
        self.assertEqual(config.niqe_config().patch_size, 16)

    def test_unknown_preset(self):
        with self.assertRaises(ConfigError) as context:
            CliConfig.load('huge')
        self.assertEqual(context.exception.key, 'preset')

    def test_precedence(self):
        path = self.root / 'run.cfg'
        path.write_text('image_size = 64\nseed = 4\n')
        config = CliConfig.load('toy', path)
        self.assertEqual(config['image_size'], 64)
        self.assertEqual(config['seed'], 4)
        self.assertEqual(config['n_res_blocks'], 3)
        self.assertEqual(CliConfig.load('toy', path, seed=9)['seed'], 9)

    def test_invalid_seed_flag(self):
        with self.assertRaises(ConfigError) as context:
            CliConfig.load(seed=-1)
        self.assertEqual(context.exception.key, 'seed')

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            CliConfig.load(path=self.root / 'missing.cfg')

    def test_cross_key_validation(self):
        path = self.root / 'run.cfg'
        path.write_text('image_size = 36\n')
        with self.assertRaises(ConfigError) as context:
            CliConfig.load('toy', path)
        self.assertEqual(context.exception.key, 'image_size')
        path.write_text('niqe_patch_size = 18\nniqe_scales = 3\n')
        with self.assertRaises(ConfigError) as context:
            CliConfig.load(path=path)
        self.assertEqual(context.exception.key, 'niqe_patch_size')

    def test_echo_round_trip(self):
        path = self.root / 'run.cfg'
        path.write_text('norm_affine = true\nlambda_id = 0.5\nmscn_sigma = 1.3\n')
        config = CliConfig.load('toy', path, seed=7)
        echo = config.write_echo(self.root)
        self.assertEqual(echo.name, EFFECTIVE_CONFIG_NAME)
        self.assertTrue(echo.read_text().startswith('# effective configuration (preset toy)'))
        restored = CliConfig.load('full', echo)
        self.assertEqual(restored.values, config.values)

    def test_component_configs(self):
        path = self.root / 'run.cfg'
        path.write_text('generator_norm = batch\ngenerator_activation = relu\noptimizer = sgd\n'
                        'mscn_epsilon = 2.0\npiqe_segment_length = 4\nniqe_sharpness_percentile = 60\n')
        config = CliConfig.load('toy', path)
        self.assertEqual(config.generator_config().norm, NormMode.BATCH)
        self.assertEqual(config.generator_config().activation, Activation.RELU)
        self.assertEqual(config.train_config().optimizer, OptimizerKind.SGD)
        self.assertEqual(config.piqe_config().mscn.epsilon, 2.0)
        self.assertEqual(config.niqe_config().mscn.epsilon, 2.0)
        self.assertEqual(config.piqe_config().segment_length, 4)
        self.assertEqual(config.niqe_config().sharpness_percentile, 60.0)
