import unittest
import sys
import os
import shutil
import logging
import tempfile
from pathlib import Path

import numpy as np

# Add the project root to the Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from checkpoint import checkpoint_load
from config import CHECKPOINT_NAME, LOSS_LOG_NAME, Config
from diagnostics import TOLERANCES, gradient_suite
from diffusion_decoder import EditKind
from evaluation import cmd_edit, cmd_eval, cmd_gen_data, cmd_sample, model_from_checkpoint, parse_edit_script
from main import main
from numerics import set_precision
from storage import read_ppm, write_slot_file
from training import NonFiniteLossError, TrainingRuntime, cmd_train, load_split, stack_valid, warmup_factor

TINY = {
    'data.height': 16, 'data.width': 16, 'data.max_objects': 2, 'data.train_size': 4, 'data.val_size': 3,
    'data.clip_length': 3,
    'encoder.slot_dim': 8, 'encoder.feature_dim': 8, 'encoder.key_dim': 8, 'encoder.iters': 2,
    'decoder.width': 8, 'decoder.heads': 2, 'decoder.timesteps': 4, 'decoder.beta_end': 0.5,
    'temporal.heads': 2, 'temporal.layers': 1,
    'train.batch': 2, 'train.steps': 2, 'train.lr_warmup': 1,
}


def close_root_handlers():
    logger = logging.getLogger()
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()


class TrainingTestCase(unittest.TestCase):
    """Shared fixture: one tiny image dataset and one tiny video dataset"""

    @classmethod
    def setUpClass(cls):
        cls.root = Path(tempfile.mkdtemp())
        cls.image_data = cmd_gen_data(Config(dict(TINY)), cls.root / 'images')
        cls.video_data = cmd_gen_data(Config({**TINY, 'data.video': True}), cls.root / 'videos')

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.root, ignore_errors=True)

    def setUp(self):
        set_precision('float32')
        self.tmp = Path(tempfile.mkdtemp(dir=self.root))

    def tearDown(self):
        set_precision('float32')
        close_root_handlers()

    def config(self, out='run', **updates):
        values = dict(TINY)
        values['io.out_dir'] = str(self.tmp / out)
        values['data.dir'] = str(self.image_data)
        values.update({key.replace('__', '.'): value for key, value in updates.items()})
        return Config(values)

    def video_config(self, out='run', **updates):
        return self.config(out, data__dir=str(self.video_data), data__video=True, temporal__mode='v1', **updates)


class TestTraining(TrainingTestCase):
    """Test cases for the training runtime"""

    def test_generated_layout(self):
        for split, size in (('train', 4), ('val', 3)):
            self.assertTrue((self.image_data / split / 'manifest.txt').exists())
            self.assertEqual(len(load_split(self.image_data / split, self.config())), size)

    def test_zero_steps(self):
        result = cmd_train(self.config(train__steps=0))
        self.assertEqual(result.losses, [])
        self.assertEqual((self.tmp / 'run' / LOSS_LOG_NAME).read_text(encoding='utf-8'), '')
        self.assertEqual(checkpoint_load(result.checkpoint_path).iteration, 0)

    def test_training_is_deterministic(self):
        first = cmd_train(self.config('a'))
        second = cmd_train(self.config('b'))
        self.assertEqual(len(first.losses), 2)
        self.assertEqual([r.line() for r in first.losses], [r.line() for r in second.losses])
        lines = (self.tmp / 'a' / LOSS_LOG_NAME).read_text(encoding='utf-8').splitlines()
        self.assertEqual(lines[0].split()[0], '0')
        self.assertEqual(len(lines[1].split()), 4)
        ckpt = checkpoint_load(self.tmp / 'a' / CHECKPOINT_NAME)
        self.assertEqual(ckpt.iteration, 2)
        self.assertTrue(ckpt.optimizer)
        self.assertEqual(Config.from_text(ckpt.config_text)['train.steps'], 2)

    def test_diffusion_two_phase_training(self):
        result = cmd_train(self.config(decoder__path='diffusion', train__two_phase=True, guidance__warmup_frac=0.0))
        self.assertEqual(len(result.losses), 2)
        self.assertTrue(all(np.isfinite(r.total) for r in result.losses))

    def test_video_diffusion_training(self):
        result = cmd_train(self.video_config(decoder__path='diffusion', train__steps=1))
        self.assertEqual(len(result.losses), 1)

    def test_load_split_mismatch(self):
        with self.assertRaises(ValueError):
            load_split(self.image_data / 'train', self.video_config())
        with self.assertRaises(ValueError):
            load_split(self.image_data / 'train', self.config(data__height=32, data__width=32))
        with self.assertRaises(FileNotFoundError):
            load_split(self.tmp / 'missing', self.config())

    def test_short_clips_are_padded(self):
        original = load_split(self.video_data / 'train', self.video_config())
        padded = load_split(self.video_data / 'train', self.video_config(data__clip_length=5))
        sample, source = padded[0], original[0]
        self.assertEqual(sample.frames.shape[0], 5)
        self.assertEqual(sample.masks.shape[0], 5)
        self.assertEqual(sample.tracks.shape, (source.tracks.shape[0], 5, 2))
        np.testing.assert_array_equal(sample.valid, [True, True, True, False, False])
        np.testing.assert_array_equal(sample.frames[:3], source.frames)
        np.testing.assert_array_equal(sample.frames[4], source.frames[2])
        valid = stack_valid(padded)
        self.assertEqual(tuple(valid.shape), (len(padded), 5))
        self.assertIsNone(stack_valid(load_split(self.image_data / 'train', self.config())))

    def test_long_clips_use_centered_window(self):
        original = load_split(self.video_data / 'train', self.video_config())
        cut = load_split(self.video_data / 'train', self.video_config(data__clip_length=2))
        np.testing.assert_array_equal(cut[0].frames, original[0].frames[:2])
        np.testing.assert_array_equal(cut[0].tracks, original[0].tracks[:, :2])
        self.assertTrue(cut[0].valid.all())
        self.assertTrue(original[0].frame_valid.all())

    def test_video_training_with_padded_clips(self):
        result = cmd_train(self.video_config(decoder__path='diffusion', data__clip_length=5, train__steps=2))
        self.assertEqual(len(result.losses), 2)
        self.assertTrue(all(np.isfinite(r.total) for r in result.losses))

    def test_set_phase_freezes_parameter_groups(self):
        for config in (self.config(decoder__path='diffusion', encoder__register_mode='feature_mean'),
                       self.video_config(decoder__path='diffusion')):
            runtime = TrainingRuntime(config)
            model = runtime.model
            slot_side = model.slot_parameters()
            adapters = list(model.denoiser.adapter_parameters())
            base = list(model.base_parameters())
            register = model.register_parameters()
            self.assertTrue(register)

            runtime.set_phase(1)
            self.assertFalse(any(p.requires_grad for p in slot_side + adapters))
            self.assertTrue(all(p.requires_grad for p in base + register))

            runtime.set_phase(2)
            self.assertTrue(all(p.requires_grad for p in slot_side + adapters))
            self.assertFalse(any(p.requires_grad for p in base + register))
            with self.assertRaises(ValueError):
                runtime.set_phase(3)

    def test_warmup_factor(self):
        factor = warmup_factor(4)
        self.assertEqual([factor(s) for s in range(5)], [0.25, 0.5, 0.75, 1.0, 1.0])
        self.assertEqual(warmup_factor(0)(0), 1.0)

    def test_non_finite_loss_error_is_runtime_error(self):
        self.assertTrue(issubclass(NonFiniteLossError, RuntimeError))


class TestCommands(TrainingTestCase):
    """Test cases for eval, sample and edit commands"""

    def trained(self, config):
        result = cmd_train(config.copy({'train.steps': 1}))
        return model_from_checkpoint(checkpoint_load(result.checkpoint_path), config)

    def test_eval_report(self):
        config = self.config()
        report = cmd_eval(config, self.trained(config))
        metrics = set(report['metric'].to_list())
        self.assertTrue({'fg_ari', 'miou', 'mbo_instance', 'mbo_class', 'psnr', 'ssim'} <= metrics)
        self.assertEqual(report.filter(report['metric'] == 'fg_ari').height, 4)
        text = (config.out_dir / 'eval_val.txt').read_text(encoding='utf-8')
        self.assertIn('val mean miou', text)

    def test_eval_video(self):
        config = self.video_config()
        report = cmd_eval(config, self.trained(config))
        self.assertEqual(report.filter(report['metric'] == 'psnr').height, 4)

    def test_parse_edit_script(self):
        edits = parse_edit_script('remove 0\n# comment\n\nreplace 1 2\nadd 0\nmix 2 1  # trailing\n')
        self.assertEqual([e.kind for e in edits], [EditKind.REMOVE, EditKind.REPLACE, EditKind.ADD, EditKind.REPLACE])
        self.assertEqual(edits[2].donor_index, 0)
        self.assertEqual(edits[3].lineno, 6)
        for bad in ('swap 1', 'remove', 'remove x', 'replace 1'):
            with self.subTest(bad):
                with self.assertRaises(ValueError):
                    parse_edit_script(bad)

    def test_broadcast_edit(self):
        config = self.config()
        model = self.trained(config)
        before, after = cmd_edit(config, model, '')
        np.testing.assert_array_equal(before[0], after[0])
        before, after = cmd_edit(config, model, 'remove 0\nadd 1\n')
        self.assertEqual(after[0].shape, (16, 16, 3))
        with self.assertRaises(ValueError):
            cmd_edit(config, model, 'remove 9')
        with self.assertRaises(ValueError):
            cmd_edit(config, model, '', donor=5)

    def test_diffusion_edit_matches_sample(self):
        config = self.config(decoder__path='diffusion')
        model = self.trained(config)
        before, after = cmd_edit(config, model, '', seed=3)
        np.testing.assert_array_equal(before[0], after[0])
        cmd_sample(config, model, seed=3)
        sampled = read_ppm(config.out_dir / 'samples' / 'sample_000000_output.ppm')
        edited = read_ppm(config.out_dir / 'edits' / 'edit_000000_after.ppm')
        np.testing.assert_array_equal(sampled, edited)
        _, removed = cmd_edit(config, model, 'remove 0', seed=3)
        self.assertEqual(removed[0].shape, (16, 16, 3))

    def test_sample_from_slot_file(self):
        config = self.config(decoder__path='diffusion')
        model = self.trained(config)
        path = self.tmp / 'slots.txt'
        write_slot_file(path, np.random.default_rng(0).normal(size=(3, 8)).astype(np.float32))
        written = cmd_sample(config, model, seed=1, source='slots', slots_file=path)
        self.assertEqual(read_ppm(written[0]).shape, (16, 16, 3))
        write_slot_file(path, np.zeros((3, 5), dtype=np.float32))
        with self.assertRaises(ValueError):
            cmd_sample(config, model, source='slots', slots_file=path)

    def test_sample_writes_masks(self):
        config = self.config()
        written = cmd_sample(config, self.trained(config), index=1)
        names = {p.name for p in written}
        self.assertIn('sample_000001_pair.ppm', names)
        self.assertIn('sample_000001_mask_0.pgm', names)
        with self.assertRaises(ValueError):
            cmd_sample(config, self.trained(config), index=3)


class TestMain(TrainingTestCase):
    """Test cases for the command-line entry point"""

    def test_usage_errors(self):
        self.assertEqual(main(['bogus']), 2)
        self.assertEqual(main([]), 2)
        self.assertEqual(main(['train', '--nope', '1']), 2)
        self.assertEqual(main(['eval']), 2)

    def test_runtime_error_exit_code(self):
        self.assertEqual(main(['eval', '--checkpoint', str(self.tmp / 'missing.ckpt')]), 1)

    def test_gen_data_train_and_eval(self):
        out = self.tmp / 'cli'
        sets = [arg for key, value in TINY.items() for arg in ('--set', f'{key}={value}')]
        sets += ['--set', f'io.out_dir={out}', '--set', f'data.dir={out / "data"}']
        self.assertEqual(main(['gen-data'] + sets), 0)
        self.assertTrue((out / 'data' / 'val' / 'manifest.txt').exists())
        self.assertEqual(main(['train', '--threads', '1'] + sets), 0)
        self.assertTrue((out / 'logs' / 'app.log').exists())
        ckpt = str(out / CHECKPOINT_NAME)
        self.assertEqual(main(['eval', '--checkpoint', ckpt]), 0)
        self.assertTrue((out / 'eval_val.txt').exists())
        script = self.tmp / 'edit.txt'
        script.write_text('remove 0\n', encoding='utf-8')
        self.assertEqual(main(['edit', '--checkpoint', ckpt, '--script', str(script)]), 0)
        self.assertEqual(main(['edit', '--checkpoint', ckpt, '--script', str(self.tmp / 'none.txt')]), 1)


class TestGradientSuite(unittest.TestCase):
    """Finite-difference checks for every differentiable path"""

    def tearDown(self):
        set_precision('float32')

    def test_all_paths_within_tolerance(self):
        results = gradient_suite()
        self.assertTrue(results)
        for name, error in results.items():
            self.assertLess(error, TOLERANCES[name], name)
        self.assertIn('end_to_end', results)
        self.assertIn('video_diffusion', results)


if __name__ == '__main__':
    unittest.main()
