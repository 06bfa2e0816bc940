"""
Tests for the training loop, checkpoint selection and run artifacts
"""
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

import pvt_config as config
import trainer
from ct_data import DatasetError, PreprocessSpec, ScanCase, load_dataset, load_slices
from optimizer import AdamWState
from pvt_model import PvtModel
from trainer import (
    BEST_CHECKPOINT_NAME, LOSS_CURVE_COLUMNS, LOSS_CURVE_NAME, TrainConfig, TrainingDivergedError, train,
    train_step,
)

SPEC = PreprocessSpec(resolution=32)


@pytest.fixture
def train_cases(tiny_data):
    return load_dataset(tiny_data / 'train').cases


@pytest.fixture
def val_cases(tiny_data):
    return load_dataset(tiny_data / 'val').cases


def quick_config(**overrides) -> TrainConfig:
    settings = dict(epochs=2, learning_rate=1e-3, val_vote_rounds=1, seed=0)
    settings.update(overrides)
    return TrainConfig(**settings)


class TestTrainConfig:
    def test_from_run_config(self):
        run_config = config.RunConfig({'epochs': '3', 'learning_rate': '0.002', 'lr_schedule': 'cosine'})
        train_config = TrainConfig.from_run_config(run_config)
        assert train_config.epochs == 3
        assert train_config.learning_rate == 0.002
        assert train_config.lr_schedule == 'cosine'
        assert train_config.batch_size == 8

    @pytest.mark.parametrize('overrides', [
        {'epochs': 0}, {'learning_rate': -1e-4}, {'batch_size': 4}, {'lr_schedule': 'step'},
        {'checkpoint_every': -1},
    ])
    def test_rejects_bad_values(self, overrides):
        with pytest.raises(config.ConfigError):
            TrainConfig(**overrides)

    def test_optimizer_state(self):
        state = TrainConfig(learning_rate=0.01, weight_decay=0.0).optimizer_state()
        assert isinstance(state, AdamWState)
        assert state.learning_rate == 0.01


class TestTrainStep:
    def test_frozen_batch_loss_decreases(self, reduced_cfg):
        improved = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            model = PvtModel(reduced_cfg, seed=seed)
            batch = rng.uniform(0, 1, (8, 3, 32, 32)).astype(np.float32)
            state = AdamWState(learning_rate=1e-4)
            losses = [train_step(model, batch, 1.0, state) for _ in range(10)]
            if losses[-1] < losses[0]:
                improved += 1
        assert improved >= 18

    def test_step_updates_parameters(self, reduced_cfg, rng):
        model = PvtModel(reduced_cfg, seed=0)
        before = model.state_dict()
        loss = train_step(model, rng.uniform(0, 1, (8, 3, 32, 32)).astype(np.float32), -1.0,
                          AdamWState(learning_rate=1e-3))
        assert np.isfinite(loss)
        assert not np.array_equal(before['head.weight'], model.params['head.weight'].data)

    @pytest.mark.slow
    def test_overfits_single_case(self, reduced_cfg, train_cases):
        model = PvtModel(reduced_cfg, seed=0)
        case = train_cases[0]
        batch = load_slices(case, np.arange(8) % case.slice_count, SPEC)
        state = AdamWState(learning_rate=1e-3)
        losses = [train_step(model, batch, case.target, state) for _ in range(50)]
        assert losses[-1] < 0.5 * losses[0]


class TestTrain:
    def test_writes_run_artifacts(self, tmp_path, reduced_cfg, train_cases, val_cases):
        run_config = config.RunConfig({'epochs': '2'})
        result = train(train_cases, PvtModel(reduced_cfg), quick_config(checkpoint_every=1), SPEC,
                       val_cases=val_cases, out_dir=tmp_path / 'run', run_config=run_config)
        run_dir = tmp_path / 'run'
        assert (run_dir / BEST_CHECKPOINT_NAME).is_file()
        assert (run_dir / 'checkpoint_epoch1.pvtc').is_file()
        assert (run_dir / 'checkpoint_epoch2.pvtc').is_file()
        assert config.RunConfig.load(run_dir / config.RESOLVED_CONFIG_NAME) == run_config

        curve = pd.read_csv(run_dir / LOSS_CURVE_NAME)
        assert list(curve.columns) == LOSS_CURVE_COLUMNS
        assert curve['epoch'].tolist() == [1, 2]
        assert result.steps == 2 * len(train_cases)
        assert curve['val_macro_f1'].between(0, 1).all()

    def test_best_checkpoint_is_best_epoch(self, tmp_path, reduced_cfg, train_cases, val_cases):
        result = train(train_cases, PvtModel(reduced_cfg), quick_config(epochs=3), SPEC,
                       val_cases=val_cases, out_dir=tmp_path)
        curve = result.loss_curve
        assert result.best_epoch == int(curve.loc[curve['val_macro_f1'].idxmax(), 'epoch'])
        assert result.best_val_macro_f1 == curve['val_macro_f1'].max()
        restored = PvtModel.load(result.best_checkpoint, reduced_cfg)
        for name, array in result.best_state.items():
            np.testing.assert_array_equal(restored.params[name].data, array)

    def test_model_ends_at_best_epoch_weights(self, monkeypatch, reduced_cfg, train_cases, val_cases):
        scores = iter([0.9, 0.5, 0.7])
        monkeypatch.setattr(trainer, 'evaluate', lambda *args, **kwargs: SimpleNamespace(macro_f1=next(scores)))
        model = PvtModel(reduced_cfg, seed=3)
        initial = model.state_dict()
        result = train(train_cases, model, quick_config(epochs=3), SPEC, val_cases=val_cases)
        assert result.best_epoch == 1
        assert result.best_val_macro_f1 == 0.9
        for name, param in model.params.items():
            np.testing.assert_array_equal(param.data, result.best_state[name])
        assert not np.array_equal(model.params['head.weight'].data, initial['head.weight'])

    def test_without_validation_keeps_last_epoch(self, reduced_cfg, train_cases):
        model = PvtModel(reduced_cfg)
        result = train(train_cases, model, quick_config(), SPEC)
        assert result.best_epoch == 2
        assert np.isnan(result.best_val_macro_f1)
        assert result.loss_curve['val_macro_f1'].isna().all()
        np.testing.assert_array_equal(result.best_state['head.bias'], model.params['head.bias'].data)

    def test_same_seed_same_run(self, reduced_cfg, train_cases, val_cases):
        runs = [train(train_cases, PvtModel(reduced_cfg, seed=1), quick_config(seed=4), SPEC, val_cases=val_cases)
                for _ in range(2)]
        pd.testing.assert_frame_equal(runs[0].loss_curve, runs[1].loss_curve)
        for name in runs[0].best_state:
            np.testing.assert_array_equal(runs[0].best_state[name], runs[1].best_state[name])

    def test_zero_learning_rate_keeps_weights(self, reduced_cfg, train_cases):
        model = PvtModel(reduced_cfg, seed=2)
        before = model.state_dict()
        train(train_cases, model, quick_config(epochs=1, learning_rate=0.0), SPEC)
        for name, array in before.items():
            np.testing.assert_array_equal(model.params[name].data, array)

    def test_divergence_is_reported(self, monkeypatch, reduced_cfg, train_cases):
        monkeypatch.setattr(trainer, 'train_step', lambda *args: float('nan'))
        with pytest.raises(TrainingDivergedError) as info:
            train(train_cases, PvtModel(reduced_cfg), quick_config(), SPEC)
        assert info.value.epoch == 1 and info.value.step == 1

    def test_unlabeled_training_case(self, reduced_cfg, train_cases):
        case = train_cases[0]
        stray = ScanCase('stray', 'unknown', case.slice_paths)
        with pytest.raises(DatasetError, match='stray'):
            train(train_cases + [stray], PvtModel(reduced_cfg), quick_config(), SPEC)

    def test_empty_training_set(self, reduced_cfg):
        with pytest.raises(DatasetError):
            train([], PvtModel(reduced_cfg), quick_config(), SPEC)

    def test_single_class_warns(self, reduced_cfg, train_cases, capsys):
        positives = [c for c in train_cases if c.label == 'positive']
        train(positives, PvtModel(reduced_cfg), quick_config(epochs=1), SPEC)
        assert 'single class' in capsys.readouterr().err
