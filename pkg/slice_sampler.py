"""
Slice Sampling and Multi-Round Voting

A case is scored by drawing batches of slice indices from a normal
distribution centred on the middle of the scan, averaging the model's scores
per batch and taking a strict majority over the signs of those averages.
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import pvt_config as config
from ct_data import PreprocessSpec, ScanCase, load_slices
from tensor import ShapeError

VERDICT_FIELDS = ('case_id', 'round_averages', 'positive_rounds', 'n', 'label')


@dataclass
class SliceSampler:
    """
    Normal(mean=(L-1)/2, sigma) index sampler; owns its random state.

    sigma defaults to L / sigma_divisor; pass sigma to pin it (0 collapses
    every draw onto the middle slice).
    """
    batch_size: int = config.BATCH_SIZE
    sigma_divisor: float = 6.0
    sigma: Optional[float] = None
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.sigma_divisor <= 0:
            raise ValueError(f"sigma_divisor must be positive, got {self.sigma_divisor}")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")
        self.rng = np.random.default_rng(self.seed)

    @classmethod
    def from_run_config(cls, run_config: config.RunConfig, seed: int) -> "SliceSampler":
        return cls(batch_size=run_config['batch_size'], sigma_divisor=run_config['sigma_divisor'], seed=seed)

    def mean(self, slice_count: int) -> float:
        return (slice_count - 1) / 2.0

    def spread(self, slice_count: int) -> float:
        return self.sigma if self.sigma is not None else slice_count / self.sigma_divisor

    def draw(self, slice_count: int, size: int) -> np.ndarray:
        """size rounded, clamped normal draws in draw order"""
        if slice_count < 1:
            raise ValueError("cannot sample from an empty scan (0 slices)")
        values = self.rng.normal(self.mean(slice_count), self.spread(slice_count), size=size)
        return np.clip(np.rint(values), 0, slice_count - 1).astype(np.int64)


def sample_indices(slice_count: int, sampler: SliceSampler) -> np.ndarray:
    """One batch of slice indices; duplicates allowed"""
    return sampler.draw(slice_count, sampler.batch_size)


def batch_average(scores: Sequence[float], batch_size: int = config.BATCH_SIZE) -> float:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size != batch_size:
        raise ShapeError(f"expected {batch_size} scores, got {scores.size}")
    return math.fsum(scores.tolist()) / batch_size


@dataclass(frozen=True)
class VotingConfig:
    rounds: int = 10

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError(f"voting needs at least one round, got {self.rounds}")


@dataclass(frozen=True)
class CaseVerdict:
    """Per-round batch averages and the strict-majority decision for one case"""
    case_id: str
    round_averages: Tuple[float, ...]
    positive_rounds: int
    label: str

    @property
    def n(self) -> int:
        return len(self.round_averages)

    @property
    def round_signs(self) -> Tuple[int, ...]:
        return tuple(1 if avg > 0 else -1 for avg in self.round_averages)

    @property
    def is_positive(self) -> bool:
        return self.label == 'positive'

    def to_dict(self) -> Dict:
        return {
            'case_id': self.case_id,
            'round_averages': list(self.round_averages),
            'positive_rounds': self.positive_rounds,
            'n': self.n,
            'label': self.label,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, record: Dict) -> "CaseVerdict":
        missing = [key for key in VERDICT_FIELDS if key not in record]
        if missing:
            raise ValueError(f"verdict record is missing {missing}")
        averages = tuple(float(a) for a in record['round_averages'])
        if record['n'] != len(averages):
            raise ValueError(f"verdict {record['case_id']}: n={record['n']} but {len(averages)} round averages")
        return cls(case_id=str(record['case_id']), round_averages=averages,
                   positive_rounds=int(record['positive_rounds']), label=record['label'])


def vote(round_averages: Sequence[float], voting: VotingConfig, case_id: str = '') -> CaseVerdict:
    """
    Positive iff more than half of the round averages are strictly above 0
    """
    averages = tuple(float(a) for a in round_averages)
    if len(averages) != voting.rounds:
        raise ShapeError(f"expected {voting.rounds} round averages, got {len(averages)}")
    positive = sum(1 for avg in averages if avg > 0)
    label = 'positive' if 2 * positive > voting.rounds else 'negative'
    return CaseVerdict(case_id=case_id, round_averages=averages, positive_rounds=positive, label=label)


def diagnose_case(scan: ScanCase, model, sampler: SliceSampler, voting: VotingConfig,
                  spec: PreprocessSpec) -> CaseVerdict:
    """
    voting.rounds rounds of sample -> preprocess -> forward -> batch average,
    then vote. model needs predict(batch) -> ModelPrediction.

    Slice read failures surface as ct_data.SliceLoadError naming the case.
    """
    averages = []
    for _ in range(voting.rounds):
        indices = sample_indices(scan.slice_count, sampler)
        batch = load_slices(scan, indices, spec)
        prediction = model.predict(batch)
        averages.append(batch_average(prediction.scores, sampler.batch_size))
    return vote(averages, voting, scan.case_id)


def write_verdicts(verdicts: Sequence[CaseVerdict], path: Union[str, Path]) -> Path:
    """One JSON object per line, floats at full repr precision"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(''.join(v.to_json() + '\n' for v in verdicts), encoding='utf-8')
    return path


def read_verdicts(path: Union[str, Path]) -> List[CaseVerdict]:
    lines = Path(path).read_text(encoding='utf-8').splitlines()
    return [CaseVerdict.from_dict(json.loads(line)) for line in lines if line.strip()]
