"""
Plotting helpers for ablation reports and training logs using Matplotlib/Seaborn.
"""
from __future__ import annotations
import typing as t
import pandas as pd
import matplotlib.pyplot as plt
import seaborn as sns

sns.set_context("talk")


def plot_ablation(rows: pd.DataFrame, metric: str = 'back_region_iou', ax: plt.Axes | None = None) -> plt.Axes:
    """Mean metric per setting as bars, with each seed overlaid as a point."""
    ax = ax or plt.gca()
    order = list(dict.fromkeys(rows['setting']))
    sns.barplot(data=rows, x='setting', y=metric, order=order, color='steelblue', errorbar=None, ax=ax)
    sns.stripplot(data=rows, x='setting', y=metric, order=order, color='crimson', size=6, ax=ax)
    ax.set_title(f'Ablation: {metric} by setting')
    return ax


def plot_loss_curve(records: t.Sequence[t.Mapping[str, t.Any]] | pd.DataFrame, ax: plt.Axes | None = None,
                    window: int = 50) -> plt.Axes:
    """Loss per step for each training phase, smoothed with a rolling mean."""
    ax = ax or plt.gca()
    df = records if isinstance(records, pd.DataFrame) else pd.DataFrame(list(records))
    for phase, part in df.groupby('phase', sort=False):
        part = part.reset_index(drop=True)
        part['loss'].rolling(window, min_periods=1).mean().plot(ax=ax, label=str(phase))
    ax.set_yscale('log')
    ax.set_xlabel('step')
    ax.legend()
    ax.set_title('Training loss')
    return ax


def save_figure(ax: plt.Axes, path: str) -> None:
    fig = ax.get_figure()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
