"""
Case-level evaluation: voting diagnosis per case, confusion counts, macro F1
"""
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

import pvt_config as config
from ct_data import DatasetError, PreprocessSpec, ScanCase
from slice_sampler import CaseVerdict, SliceSampler, VotingConfig, diagnose_case


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def class_f1(tp: int, fp: int, fn: int) -> float:
    """F1 of one class; 1.0 when the class is neither predicted nor present"""
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def macro_f1(tp: int, fp: int, fn: int, tn: int) -> float:
    """Unweighted mean of the positive-class and negative-class F1"""
    counts = (tp, fp, fn, tn)
    if any(c < 0 for c in counts):
        raise ValueError(f"confusion counts must be non-negative, got {counts}")
    if sum(counts) == 0:
        raise ValueError("macro F1 is undefined for an empty confusion table")
    return (class_f1(tp, fp, fn) + class_f1(tn, fn, fp)) / 2.0


def confusion_counts(labels: Sequence[str], predictions: Sequence[str]) -> Tuple[int, int, int, int]:
    """(TP, FP, FN, TN) with COVID ('positive') as the positive class"""
    truth = np.asarray(labels) == 'positive'
    pred = np.asarray(predictions) == 'positive'
    return (int(np.sum(truth & pred)), int(np.sum(~truth & pred)),
            int(np.sum(truth & ~pred)), int(np.sum(~truth & ~pred)))


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    tn: int
    macro_f1: float
    positive_accuracy: float
    negative_accuracy: float
    accuracy: float
    per_class: Dict[str, Dict[str, float]]
    verdicts: List[CaseVerdict] = field(default_factory=list)
    excluded: List[str] = field(default_factory=list)

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int,
                    verdicts: Optional[List[CaseVerdict]] = None,
                    excluded: Optional[List[str]] = None) -> "EvalReport":
        total = tp + fp + fn + tn
        per_class = {
            'positive': {'precision': _ratio(tp, tp + fp), 'recall': _ratio(tp, tp + fn),
                         'f1': class_f1(tp, fp, fn), 'support': tp + fn},
            'negative': {'precision': _ratio(tn, tn + fn), 'recall': _ratio(tn, tn + fp),
                         'f1': class_f1(tn, fn, fp), 'support': tn + fp},
        }
        return cls(
            tp=tp, fp=fp, fn=fn, tn=tn,
            macro_f1=macro_f1(tp, fp, fn, tn),
            positive_accuracy=_ratio(tp, tp + fn),
            negative_accuracy=_ratio(tn, tn + fp),
            accuracy=_ratio(tp + tn, total),
            per_class=per_class,
            verdicts=list(verdicts or []),
            excluded=list(excluded or []),
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def check_consistency(self, tol: float = 1e-12) -> bool:
        """Recompute every rate from the counts; raises ValueError on drift"""
        if self.verdicts and len(self.verdicts) != self.total:
            raise ValueError(f"{len(self.verdicts)} verdicts but counts sum to {self.total}")
        expected = EvalReport.from_counts(self.tp, self.fp, self.fn, self.tn)
        for name in ('macro_f1', 'positive_accuracy', 'negative_accuracy', 'accuracy'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0 or abs(value - getattr(expected, name)) > tol:
                raise ValueError(f"{name}={value} disagrees with the confusion counts")
        return True

    def to_dict(self) -> Dict:
        return {
            'macro_f1': self.macro_f1,
            'positive_accuracy': self.positive_accuracy,
            'negative_accuracy': self.negative_accuracy,
            'accuracy': self.accuracy,
            'confusion': {'tp': self.tp, 'fp': self.fp, 'fn': self.fn, 'tn': self.tn},
            'per_class': self.per_class,
            'verdicts': [v.to_dict() for v in self.verdicts],
            'excluded': self.excluded,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def best_constant_macro_f1(labels: Sequence[str]) -> float:
    """Best macro F1 reachable by predicting a single class for every case"""
    scores = []
    for constant in ('positive', 'negative'):
        scores.append(macro_f1(*confusion_counts(labels, [constant] * len(labels))))
    return max(scores)


def case_seeds(case_ids: Iterable[str], seed: int) -> Dict[str, int]:
    """One sampler seed per case, assigned in sorted case-id order"""
    ordered = sorted(case_ids)
    children = np.random.SeedSequence(seed).spawn(len(ordered))
    return {cid: int(child.generate_state(1)[0]) for cid, child in zip(ordered, children)}


def evaluate(cases: Iterable[ScanCase], model, voting: VotingConfig, seed: int,
             spec: PreprocessSpec, sigma_divisor: float = 6.0, batch_size: int = config.BATCH_SIZE,
             workers: int = 1) -> EvalReport:
    """
    diagnose_case on every labeled case and score the verdicts

    Unlabeled cases are excluded and listed in the report. The result depends
    only on (weights, cases, seed), not on workers.
    """
    labeled, excluded = [], []
    for case in cases:
        (labeled if case.target is not None else excluded).append(case)
    for case in excluded:
        print(f"⚠ {case.case_id}: no label, excluded from evaluation", file=sys.stderr)
    if not labeled:
        raise DatasetError("no labeled cases to evaluate")

    labeled.sort(key=lambda c: c.case_id)
    seeds = case_seeds([c.case_id for c in labeled], seed)

    def run(case: ScanCase) -> CaseVerdict:
        sampler = SliceSampler(batch_size=batch_size, sigma_divisor=sigma_divisor, seed=seeds[case.case_id])
        return diagnose_case(case, model, sampler, voting, spec)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            verdicts = list(pool.map(run, labeled))
    else:
        verdicts = [run(case) for case in labeled]

    counts = confusion_counts([c.label for c in labeled], [v.label for v in verdicts])
    return EvalReport.from_counts(*counts, verdicts=verdicts, excluded=sorted(c.case_id for c in excluded))


class EvalReporter:
    """Human-readable evaluation summaries (stderr)"""

    @staticmethod
    def print_report(report: EvalReport, title: str = "EVALUATION"):
        out = sys.stderr
        print("\n" + "=" * 80, file=out)
        print(f"📊 {title}", file=out)
        print("=" * 80, file=out)
        print(f"  Cases evaluated:   {report.total}", file=out)
        if report.excluded:
            print(f"  ⚠ Excluded (unlabeled): {len(report.excluded)}", file=out)
        print(f"  Macro F1:          {report.macro_f1:.4f}", file=out)
        print(f"  Positive accuracy: {report.positive_accuracy:.2%}", file=out)
        print(f"  Negative accuracy: {report.negative_accuracy:.2%}", file=out)
        print(f"  Overall accuracy:  {report.accuracy:.2%}", file=out)
        print("-" * 80, file=out)
        print(f"{'':12} {'pred +':>8} {'pred -':>8}", file=out)
        print(f"{'actual +':12} {report.tp:>8} {report.fn:>8}", file=out)
        print(f"{'actual -':12} {report.fp:>8} {report.tn:>8}", file=out)

    @staticmethod
    def print_verdict(verdict: CaseVerdict):
        marker = "🔴" if verdict.is_positive else "🟢"
        print(f"{marker} {verdict.case_id}: {verdict.label} "
              f"({verdict.positive_rounds}/{verdict.n} rounds positive)", file=sys.stderr)
