import pytest

import pvt_config as config
from pvt_config import ConfigError, RunConfig, resolved_config_beside, split_seeds


class TestRunConfig:
    def test_defaults(self):
        run_config = RunConfig.load()
        assert run_config['embed_dims'] == (32, 64, 160, 256)
        assert run_config['learning_rate'] == 1e-4
        assert run_config['epochs'] == 60
        assert run_config['vote_rounds'] == 10
        assert run_config['batch_size'] == 8
        assert run_config['enhancement'] == 'histogram-equalization'

    def test_file_values_are_typed(self, tmp_path):
        path = tmp_path / 'run.env'
        path.write_text("# comment\nepochs=5\nlearning_rate=0.001\nsr_ratios=4,2,2,1\nlr_schedule=cosine\n")
        run_config = RunConfig.load(path)
        assert run_config['epochs'] == 5
        assert run_config['learning_rate'] == 0.001
        assert run_config['sr_ratios'] == (4, 2, 2, 1)
        assert run_config['lr_schedule'] == 'cosine'

    def test_override_beats_file_beats_default(self, tmp_path):
        path = tmp_path / 'run.env'
        path.write_text("seed=3\nepochs=7\n")
        run_config = RunConfig.load(path, {'seed': 11, 'epochs': None})
        assert run_config['seed'] == 11
        assert run_config['epochs'] == 7
        assert run_config['vote_rounds'] == 10

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            RunConfig.load(tmp_path / 'absent.env')

    def test_unknown_key(self, tmp_path):
        path = tmp_path / 'run.env'
        path.write_text("epochs=5\nlearning_rat=0.1\n")
        with pytest.raises(ConfigError, match='learning_rat'):
            RunConfig.load(path)

    @pytest.mark.parametrize('key,value', [
        ('epochs', 'five'),
        ('epochs', '0'),
        ('learning_rate', '-1'),
        ('beta1', '1.0'),
        ('embed_dims', '32,64,160'),
        ('embed_dims', '32,64,0,256'),
        ('enhancement', 'clahe'),
        ('lr_schedule', 'step'),
        ('batch_size', '16'),
        ('synth_slices_min', '800'),
        ('synth_central_fraction', '0'),
    ])
    def test_rejects_bad_values(self, key, value):
        with pytest.raises(ConfigError):
            RunConfig.load(overrides={key: value})

    def test_resolved_echo_reproduces_run(self, tmp_path):
        original = RunConfig.load(overrides={'seed': 9, 'learning_rate': 3e-4, 'depths': '1,2,3,1',
                                             'layer_norm_eps': 1e-6})
        path = original.write(tmp_path / config.RESOLVED_CONFIG_NAME)
        assert RunConfig.load(path) == original

    def test_resolved_config_beside(self, tmp_path):
        checkpoint = tmp_path / 'best_checkpoint.pvtc'
        assert resolved_config_beside(checkpoint) is None
        RunConfig().write(tmp_path / config.RESOLVED_CONFIG_NAME)
        assert resolved_config_beside(checkpoint) == tmp_path / config.RESOLVED_CONFIG_NAME


class TestSeeds:
    def test_streams_are_named_and_distinct(self):
        seeds = split_seeds(0)
        assert set(seeds) == set(config.SEED_STREAMS)
        assert len(set(seeds.values())) == len(seeds)

    def test_deterministic(self):
        assert split_seeds(123) == split_seeds(123)
        assert split_seeds(123) != split_seeds(124)
