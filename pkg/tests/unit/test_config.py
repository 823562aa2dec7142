import unittest
import os
import tempfile

from pyRCF.config import *
from pyRCF.errors import ConfigError
from pyRCF.motion import ResidualPathway


class Test_parse_config_text(unittest.TestCase):

    def test_comments_and_blank_lines(self):
        text = "# header\n\ntrain.lr = 1e-3  # inline\n  data.scenario=articulated\n"
        self.assertEqual(parse_config_text(text), {'train.lr': '1e-3', 'data.scenario': 'articulated'})

    def test_missing_equals(self):
        with self.assertRaises(ConfigError):
            parse_config_text("train.lr 1e-3")

    def test_missing_section(self):
        with self.assertRaises(ConfigError):
            parse_config_text("lr = 1e-3")


class Test_load_config_file(unittest.TestCase):

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config_file('/nonexistent/rcf.cfg')

    def test_reads_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'rcf.cfg')
            with open(path, 'w') as f:
                f.write("train.channels = 5\ncrf.iterations = 3\n")
            self.assertEqual(load_config_file(path), {'train.channels': '5', 'crf.iterations': '3'})


class Test_build_run_config(unittest.TestCase):

    # ======== precedence TESTING ========

    def test_defaults(self):
        config = build_run_config('train')
        self.assertEqual(config.train, TrainConfig())
        self.assertEqual(config.crf_params, CrfParams())
        self.assertEqual(config.seed, 0)

    def test_flag_overrides_file(self):
        config = build_run_config('train', {'train.lr': '1e-3', 'train.lam': '4'}, {'train.lr': 5e-4})
        self.assertEqual(config.train.lr, 5e-4)
        self.assertEqual(config.train.lam, 4.0)

    def test_seed_flag_reaches_training(self):
        config = build_run_config('train', {'train.seed': '3'}, seed=9)
        self.assertEqual(config.seed, 9)
        self.assertEqual(config.train.seed, 9)

    def test_seed_from_file(self):
        self.assertEqual(build_run_config('train', {'train.seed': '3'}).seed, 3)

    # ======== value coercion TESTING ========

    def test_typed_values(self):
        config = build_run_config('tune', {
            'train.residual_pathway': 'scaling',
            'train.symmetric_loss': 'yes',
            'train.semantic_constraint': 'auto',
            'tune.channels': '2, 3,4',
            'tune.weight_decay': '0.0,1e-4',
            'data.dir': 'frames',
        })
        self.assertIs(config.train.residual_pathway, ResidualPathway.SCALING)
        self.assertTrue(config.train.symmetric_loss)
        self.assertIsNone(config.train.semantic_constraint)
        self.assertEqual(config.tune.channels, (2, 3, 4))
        self.assertEqual(config.tune.weight_decay, (0.0, 1e-4))
        self.assertEqual(config.data.dir, 'frames')

    def test_semantic_constraint_off(self):
        self.assertFalse(build_run_config('train', {'train.semantic_constraint': 'false'}).train.semantic_constraint)

    def test_unreadable_value(self):
        with self.assertRaises(ConfigError):
            build_run_config('train', {'train.lr': 'fast'})

    def test_unreadable_bool(self):
        with self.assertRaises(ConfigError):
            build_run_config('train', {'train.symmetric_loss': 'maybe'})

    # ======== validation TESTING ========

    def test_unknown_key(self):
        with self.assertRaises(ConfigError):
            build_run_config('train', {'train.learning_rate': '1e-3'})

    def test_unknown_section(self):
        with self.assertRaises(ConfigError):
            build_run_config('train', {'model.lr': '1e-3'})

    def test_negative_lambda(self):
        with self.assertRaises(ConfigError):
            build_run_config('train', overrides={'train.lam': -1.0})

    def test_unknown_scenario(self):
        with self.assertRaises(ConfigError):
            build_run_config('synth', {'data.scenario': 'occlusion'})

    def test_unknown_pathway(self):
        with self.assertRaises(ConfigError):
            build_run_config('train', {'train.residual_pathway': 'gated'})

    def test_unknown_command(self):
        with self.assertRaises(ConfigError):
            build_run_config('serve')

    def test_invalid_stage(self):
        with self.assertRaises(ConfigError):
            build_run_config('train', stage=3)

    def test_invalid_threshold(self):
        with self.assertRaises(ConfigError):
            build_run_config('eval', threshold=1.0)


class Test_records___init__(unittest.TestCase):

    def test_crf_bandwidth(self):
        with self.assertRaises(ConfigError):
            CrfParams(theta_beta=0.0)

    def test_crf_iterations(self):
        with self.assertRaises(ConfigError):
            CrfParams(iterations=0)

    def test_ema_momentum_range(self):
        with self.assertRaises(ConfigError):
            TrainConfig(ema_momentum=1.5)

    def test_zero_channels(self):
        with self.assertRaises(ConfigError):
            TrainConfig(channels=0)

    def test_tune_channels(self):
        with self.assertRaises(ConfigError):
            TuneConfig(channels=(2, 0))

    def test_scenario_is_normalized(self):
        self.assertEqual(DataConfig(scenario='REFLECTION').scenario, 'reflection')


if __name__ == '__main__':
    unittest.main()
