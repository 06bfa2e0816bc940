#!/usr/bin/env python3
"""
Plot a training run's loss curve and validation macro F1

Usage:
    python create_loss_chart.py output/run1
"""
import sys
from pathlib import Path

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import pandas as pd

from trainer import LOSS_CURVE_COLUMNS, LOSS_CURVE_NAME

CHART_NAME = 'loss_curve.png'


def create_loss_chart(run_dir: Path) -> Path:
    """Render <run_dir>/loss_curve.csv to <run_dir>/loss_curve.png"""
    curve = pd.read_csv(run_dir / LOSS_CURVE_NAME)
    missing = set(LOSS_CURVE_COLUMNS) - set(curve.columns)
    if missing:
        raise ValueError(f"{run_dir / LOSS_CURVE_NAME} lacks columns: {sorted(missing)}")

    fig, loss_ax = plt.subplots(figsize=(10, 6))
    loss_ax.plot(curve['epoch'], curve['mean_loss'], color='tab:blue', marker='o', label='Mean train loss')
    loss_ax.set_xlabel('Epoch', fontsize=12, fontweight='bold')
    loss_ax.set_ylabel('Mean MSE loss', fontsize=12, fontweight='bold', color='tab:blue')
    loss_ax.grid(alpha=0.3, linestyle='--')

    validated = curve.dropna(subset=['val_macro_f1'])
    if not validated.empty:
        f1_ax = loss_ax.twinx()
        f1_ax.plot(validated['epoch'], validated['val_macro_f1'], color='tab:green', marker='s',
                   label='Validation macro F1')
        f1_ax.set_ylabel('Validation macro F1', fontsize=12, fontweight='bold', color='tab:green')
        f1_ax.set_ylim(0.0, 1.05)
        best = validated.loc[validated['val_macro_f1'].idxmax()]
        f1_ax.annotate(f"best {best['val_macro_f1']:.3f}",
                       xy=(best['epoch'], best['val_macro_f1']),
                       xytext=(best['epoch'], min(1.0, best['val_macro_f1'] + 0.03)),
                       ha='center', fontsize=10, fontweight='bold', color='darkgreen')

    plt.title(f"Training run: {run_dir.name}", fontsize=16, fontweight='bold', pad=20)
    fig.tight_layout()
    output_file = run_dir / CHART_NAME
    fig.savefig(output_file, dpi=150, bbox_inches='tight')
    plt.close(fig)
    return output_file


if __name__ == "__main__":
    if len(sys.argv) != 2:
        print(__doc__, file=sys.stderr)
        sys.exit(3)
    try:
        chart = create_loss_chart(Path(sys.argv[1]))
        print(f"📊 Loss chart saved to: {chart}", file=sys.stderr)
    except Exception as e:
        print(f"Error: {e}", file=sys.stderr)
        import traceback
        traceback.print_exc()
        sys.exit(2)
