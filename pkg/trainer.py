"""
Training loop: +/-1-target MSE regression on sampled slice batches

One optimisation step = one case: 8 slice indices drawn with the slice
sampler, all targets +1 for a positive case and -1 for a negative one.
Cases are reshuffled and resampled every epoch.
"""
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

import pvt_config as config
from ct_data import DatasetError, PreprocessSpec, ScanCase, load_slices
from evaluation import evaluate
from optimizer import AdamWState, adamw_step, scheduled_learning_rate, zero_grad
from pvt_model import PvtModel
from slice_sampler import SliceSampler, VotingConfig, sample_indices
from tensor import DTYPE, Tape, Tensor, backward, mse_loss

BEST_CHECKPOINT_NAME = 'best_checkpoint.pvtc'
LOSS_CURVE_NAME = 'loss_curve.csv'
LOSS_CURVE_COLUMNS = ['epoch', 'mean_loss', 'val_macro_f1']


class TrainingDivergedError(RuntimeError):
    """Loss became NaN or infinite"""

    def __init__(self, epoch: int, step: int, case_id: str, loss: float):
        super().__init__(f"training diverged at epoch {epoch}, step {step} (case {case_id}): loss={loss}")
        self.epoch = epoch
        self.step = step
        self.case_id = case_id
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.05
    lr_schedule: str = 'constant'
    batch_size: int = config.BATCH_SIZE
    sigma_divisor: float = 6.0
    val_vote_rounds: int = 3
    checkpoint_every: int = 0
    eval_workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise config.ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.learning_rate < 0:
            raise config.ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.batch_size != config.BATCH_SIZE:
            raise config.ConfigError(f"batch_size must equal the sampler batch ({config.BATCH_SIZE})")
        if self.lr_schedule not in config.CHOICES['lr_schedule']:
            raise config.ConfigError(f"lr_schedule must be one of {config.CHOICES['lr_schedule']}")
        if self.checkpoint_every < 0:
            raise config.ConfigError("checkpoint_every must be non-negative")

    @classmethod
    def from_run_config(cls, run_config: config.RunConfig) -> "TrainConfig":
        return cls(**{key: run_config[key] for key in cls.__dataclass_fields__})

    def optimizer_state(self) -> AdamWState:
        return AdamWState(learning_rate=self.learning_rate, beta1=self.beta1, beta2=self.beta2,
                          epsilon=self.adam_eps, weight_decay=self.weight_decay)


@dataclass
class TrainResult:
    loss_curve: pd.DataFrame
    steps: int
    best_epoch: int
    best_val_macro_f1: float
    best_state: Dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    run_dir: Optional[Path] = None

    @property
    def best_checkpoint(self) -> Optional[Path]:
        return self.run_dir / BEST_CHECKPOINT_NAME if self.run_dir else None


def train_step(model: PvtModel, batch: np.ndarray, target: float, state: AdamWState) -> float:
    """Forward, MSE against a constant target, backward, one AdamW update; returns the loss"""
    targets = Tensor(np.full(batch.shape[0], target, dtype=DTYPE))
    with Tape() as tape:
        scores = model.forward(Tensor(batch))
        loss = mse_loss(scores, targets)
    value = loss.item()
    if not math.isfinite(value):
        return value
    zero_grad(model.params)
    backward(loss, tape)
    adamw_step(model.params, None, state)
    return value


def train(cases: Sequence[ScanCase], model: PvtModel, train_config: TrainConfig, spec: PreprocessSpec,
          val_cases: Optional[Sequence[ScanCase]] = None, out_dir: Union[str, Path, None] = None,
          run_config: Optional[config.RunConfig] = None) -> TrainResult:
    """
    Train model in place

    With val_cases, the epoch with the strictly best validation macro F1 is
    kept (first such epoch on ties) and its weights are loaded back into
    model before returning; without, the last epoch is. When out_dir
    is given the best checkpoint, the loss curve, periodic checkpoints and
    the resolved run config are written there.
    """
    cases = list(cases)
    if not cases:
        raise DatasetError("training set is empty")
    unlabeled = [c.case_id for c in cases if c.target is None]
    if unlabeled:
        raise DatasetError(f"training cases without a label: {', '.join(unlabeled[:5])}")
    if len({c.label for c in cases}) < 2:
        print("⚠ training set holds a single class", file=sys.stderr)

    run_dir = Path(out_dir) if out_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        if run_config is not None:
            run_config.write(run_dir / config.RESOLVED_CONFIG_NAME)

    seeds = config.split_seeds(train_config.seed)
    shuffle_rng = np.random.default_rng(seeds['shuffle'])
    sampler = SliceSampler(batch_size=train_config.batch_size, sigma_divisor=train_config.sigma_divisor,
                           seed=seeds['sampler'])
    state = train_config.optimizer_state()
    total_steps = train_config.epochs * len(cases)
    val_voting = VotingConfig(train_config.val_vote_rounds)

    TrainReporter.print_header(train_config, len(cases), len(val_cases or []), model.parameter_count())
    rows: List[Dict] = []
    best_epoch, best_f1, best_state = 0, -math.inf, {}
    step = 0
    for epoch in range(1, train_config.epochs + 1):
        losses = []
        for position in shuffle_rng.permutation(len(cases)):
            case = cases[position]
            batch = load_slices(case, sample_indices(case.slice_count, sampler), spec)
            state.learning_rate = scheduled_learning_rate(train_config.learning_rate, step, total_steps,
                                                          train_config.lr_schedule)
            loss = train_step(model, batch, case.target, state)
            step += 1
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, step, case.case_id, loss)
            losses.append(loss)

        mean_loss = float(np.mean(losses))
        val_f1 = float('nan')
        if val_cases:
            report = evaluate(val_cases, model, val_voting, seeds['eval'], spec,
                              sigma_divisor=train_config.sigma_divisor, batch_size=train_config.batch_size,
                              workers=train_config.eval_workers)
            val_f1 = report.macro_f1
        improved = val_f1 > best_f1 if val_cases else True
        if improved:
            best_epoch, best_f1 = epoch, (val_f1 if val_cases else best_f1)
            best_state = model.state_dict()
            if run_dir is not None:
                model.save(run_dir / BEST_CHECKPOINT_NAME)
        if run_dir is not None and train_config.checkpoint_every and epoch % train_config.checkpoint_every == 0:
            model.save(run_dir / f"checkpoint_epoch{epoch}.pvtc")

        rows.append({'epoch': epoch, 'mean_loss': mean_loss, 'val_macro_f1': val_f1})
        TrainReporter.print_epoch(epoch, train_config.epochs, mean_loss, val_f1, improved)
        if run_dir is not None:
            pd.DataFrame(rows, columns=LOSS_CURVE_COLUMNS).to_csv(run_dir / LOSS_CURVE_NAME, index=False)

    if val_cases and best_state:
        model.load_state(best_state)
    result = TrainResult(loss_curve=pd.DataFrame(rows, columns=LOSS_CURVE_COLUMNS), steps=step,
                         best_epoch=best_epoch, best_val_macro_f1=best_f1 if val_cases else float('nan'),
                         best_state=best_state, run_dir=run_dir)
    TrainReporter.print_summary(result)
    return result


class TrainReporter:
    """Training progress lines (stderr)"""

    @staticmethod
    def print_header(train_config: TrainConfig, n_train: int, n_val: int, n_params: int):
        out = sys.stderr
        print("\n" + "=" * 80, file=out)
        print("🏋 TRAINING", file=out)
        print("=" * 80, file=out)
        print(f"  Train cases: {n_train}   Validation cases: {n_val}   Parameters: {n_params:,}", file=out)
        print(f"  Epochs: {train_config.epochs}   lr: {train_config.learning_rate:g} "
              f"({train_config.lr_schedule})   weight decay: {train_config.weight_decay:g}", file=out)
        print("-" * 80, file=out)
        print(f"{'Epoch':>7} | {'Mean loss':>10} | {'Val F1':>7} |", file=out)
        print("-" * 80, file=out)

    @staticmethod
    def print_epoch(epoch: int, epochs: int, mean_loss: float, val_f1: float, improved: bool):
        f1_text = f"{val_f1:7.4f}" if not math.isnan(val_f1) else f"{'-':>7}"
        marker = " ✓ best" if improved else ""
        print(f"{epoch:>3}/{epochs:<3} | {mean_loss:10.5f} | {f1_text} |{marker}", file=sys.stderr)

    @staticmethod
    def print_summary(result: TrainResult):
        out = sys.stderr
        print("-" * 80, file=out)
        print(f"✓ {result.steps} steps, best epoch {result.best_epoch}", file=out)
        if result.run_dir is not None:
            print(f"  Checkpoint: {result.best_checkpoint}", file=out)
            print(f"  Loss curve: {result.run_dir / LOSS_CURVE_NAME}", file=out)
