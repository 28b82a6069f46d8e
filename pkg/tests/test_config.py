import unittest
import sys
import os
import tempfile
from pathlib import Path
from unittest import mock

# Add the project root to the Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from config import Config, DecoderPath, EncoderVariant, env_name, get_dynamic_worker_count


class TestConfig(unittest.TestCase):
    """Test cases for layered configuration"""

    def test_defaults_and_derived_values(self):
        config = Config()
        self.assertEqual(config['data.height'], 32)
        self.assertEqual(config.enum('encoder.variant'), EncoderVariant.SA)
        self.assertEqual(config.enum('decoder.path'), DecoderPath.BROADCAST)
        self.assertEqual(config.num_slots, 7)
        self.assertEqual(config.copy({'encoder.num_slots': 3}).num_slots, 3)
        self.assertEqual(config.warmup_iters, 2000)

    def test_text_round_trip(self):
        config = Config({'train.lr': 0.001, 'data.video': True, 'encoder.variant': 'isa'})
        restored = Config.from_text(config.to_text())
        self.assertEqual(restored.to_text(), config.to_text())
        self.assertIs(restored['data.video'], True)
        self.assertEqual(restored['train.lr'], 0.001)

    def test_invalid_values(self):
        for key, value in (('train.nope', '1'), ('data.video', 'maybe'), ('encoder.variant', 'gru'),
                           ('decoder.p_null', '1.0'), ('data.height', '8'), ('train.steps', 'many')):
            with self.subTest(key):
                with self.assertRaises(ValueError):
                    Config.load(overrides=[f'{key}={value}'], use_env=False)
        with self.assertRaises(ValueError):
            Config.load(overrides=['train.steps'], use_env=False)

    def test_comment_and_blank_lines(self):
        config = Config.from_text('# header\n\ntrain.steps = 12  # short run\n')
        self.assertEqual(config['train.steps'], 12)
        with self.assertRaises(ValueError):
            Config.from_text('train.steps 12\n')

    def test_precedence(self):
        self.assertEqual(env_name('train.steps'), 'SLOTDIFF_TRAIN_STEPS')
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.conf'
            path.write_text('train.steps = 5\ntrain.batch = 3\n', encoding='utf-8')
            with mock.patch.dict(os.environ, {'SLOTDIFF_TRAIN_STEPS': '7'}):
                config = Config.load(path)
                self.assertEqual(config['train.steps'], 7)
                self.assertEqual(config['train.batch'], 3)
                self.assertEqual(Config.load(path, ['train.steps=9'])['train.steps'], 9)
            with self.assertRaises(FileNotFoundError):
                Config.load(Path(tmp) / 'missing.conf')

    def test_base_text_keeps_explicit_defaults(self):
        base = Config({'train.steps': 50}).to_text()
        config = Config.load(None, ['train.batch=32'], use_env=False, base_text=base)
        self.assertEqual(config['train.steps'], 50)
        self.assertEqual(config['train.batch'], 32)

    def test_worker_count_follows_memory(self):
        with mock.patch('config.get_memory_usage', return_value=90.0):
            self.assertEqual(get_dynamic_worker_count(8), 1)
        with mock.patch('config.get_memory_usage', return_value=80.0):
            self.assertEqual(get_dynamic_worker_count(8), 4)
        with mock.patch('config.get_memory_usage', return_value=10.0):
            self.assertEqual(get_dynamic_worker_count(8), 8)


if __name__ == '__main__':
    unittest.main()
