#!/usr/bin/env python3
"""
Spatial-reduction attention benchmark

Times one sr_attention call per reduction ratio on a stage-1 sized grid
(56 x 56 tokens, dim 32 by default) and compares the measured time ratio
against count_flops_attention and the instrumented FLOP counter.

Usage:
    python benchmark_attention.py [side] [dim] [repeats]
"""
import sys
import time
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from pvt_model import count_flops_attention, init_attention_params, sr_attention
from tensor import DTYPE, FlopCounter, Tensor

RATIOS = (1, 2, 4, 8)


def measure_attention(side: int = 56, dim: int = 32, heads: int = 1, ratios: Sequence[int] = RATIOS,
                      repeats: int = 3, seed: int = 0) -> pd.DataFrame:
    """One row per ratio: predicted FLOPs, counted FLOPs, best-of-repeats wall time"""
    rng = np.random.default_rng(seed)
    tokens = Tensor(rng.standard_normal((1, side * side, dim)).astype(DTYPE))
    rows: List[Dict] = []
    for ratio in ratios:
        params = init_attention_params(dim, ratio, seed)
        with FlopCounter() as counter:
            sr_attention(tokens, side, side, params, "attn", heads, ratio)
        timings = []
        for _ in range(repeats):
            start = time.perf_counter()
            sr_attention(tokens, side, side, params, "attn", heads, ratio)
            timings.append(time.perf_counter() - start)
        rows.append({
            'sr_ratio': ratio,
            'tokens': side * side,
            'kv_tokens': (side // ratio) ** 2,
            'predicted_flops': count_flops_attention(side * side, dim, ratio),
            'counted_flops': counter.flops,
            'seconds': min(timings),
        })
    return pd.DataFrame(rows)


def compare_ratios(results: pd.DataFrame, low: int = 1, high: int = 8) -> Dict[str, float]:
    """Measured vs predicted speedup of sr_ratio=high over sr_ratio=low"""
    by_ratio = results.set_index('sr_ratio')
    measured = by_ratio.loc[low, 'seconds'] / by_ratio.loc[high, 'seconds']
    predicted = by_ratio.loc[low, 'predicted_flops'] / by_ratio.loc[high, 'predicted_flops']
    return {'measured_speedup': float(measured), 'predicted_speedup': float(predicted),
            'agreement': float(max(measured / predicted, predicted / measured))}


def main():
    side = int(sys.argv[1]) if len(sys.argv) > 1 else 56
    dim = int(sys.argv[2]) if len(sys.argv) > 2 else 32
    repeats = int(sys.argv[3]) if len(sys.argv) > 3 else 3

    print("=" * 80)
    print(f"SR-ATTENTION BENCHMARK  ({side}x{side} tokens, dim {dim}, best of {repeats})")
    print("=" * 80)
    results = measure_attention(side, dim, repeats=repeats)
    print(f"{'R':>3} | {'KV tokens':>9} | {'Predicted FLOPs':>16} | {'Counted FLOPs':>14} | {'Time (ms)':>10}")
    print("-" * 80)
    for row in results.itertuples(index=False):
        print(f"{row.sr_ratio:>3} | {row.kv_tokens:>9} | {row.predicted_flops:>16,} | "
              f"{row.counted_flops:>14,} | {row.seconds * 1000:>10.2f}")

    summary = compare_ratios(results)
    print("-" * 80)
    print(f"Speedup R=8 over R=1: measured {summary['measured_speedup']:.1f}x, "
          f"predicted {summary['predicted_speedup']:.1f}x")
    if summary['agreement'] <= 2.0:
        print(f"✓ Within a factor of 2 of the FLOP prediction ({summary['agreement']:.2f}x)")
    else:
        print(f"⚠ Off by {summary['agreement']:.2f}x from the FLOP prediction")


if __name__ == "__main__":
    main()
