"""
Report figures. Built on :py:class:`matplotlib.figure.Figure` without
pyplot; callers save them with ``savefig``.
"""

import numpy as np
from matplotlib.figure import Figure


def plot_similarity_heatmap(matrix, title=None):
    """Colour map of a pairwise similarity matrix on a fixed diverging scale
    over [-1, 1]."""
    fig = Figure(figsize=(6, 5))
    ax = fig.add_subplot(111)
    im = ax.imshow(np.asarray(matrix), cmap='RdBu_r', vmin=-1.0, vmax=1.0,
                   interpolation='nearest')
    ax.set_xlabel('instance')
    ax.set_ylabel('instance')
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax)
    return fig


def plot_sweep(summary, param, title=None):
    """Mean test accuracy with a one-standard-deviation band against the
    swept values.

    :param summary: data frame indexed by the swept value with columns
        ``mean`` and ``std``.
    """
    x = np.arange(len(summary))
    mean = summary['mean'].to_numpy(dtype=float)
    std = summary['std'].to_numpy(dtype=float)

    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot(111)
    ax.plot(x, mean, marker='o', color='k')
    ax.fill_between(x, mean - std, mean + std, color='C0', alpha=0.3)
    ax.set_xticks(x)
    ax.set_xticklabels([str(v) for v in summary.index])
    ax.set_xlabel(param)
    ax.set_ylabel('test accuracy (%)')
    if title:
        ax.set_title(title)
    return fig


def plot_ablation(summary, title=None):
    """Bar chart of the mean test accuracy per variant with standard
    deviations as error bars."""
    x = np.arange(len(summary))
    fig = Figure(figsize=(1.2 * len(summary) + 2, 4))
    ax = fig.add_subplot(111)
    ax.bar(x, summary['mean'].to_numpy(dtype=float),
           yerr=summary['std'].to_numpy(dtype=float), capsize=4,
           color=['C{}'.format(i % 10) for i in range(len(summary))])
    ax.set_xticks(x)
    ax.set_xticklabels([str(v) for v in summary.index], rotation=30,
                       ha='right')
    ax.set_ylabel('test accuracy (%)')
    lower = float((summary['mean'] - summary['std']).min())
    ax.set_ylim(bottom=max(0.0, lower - 5.0))
    if title:
        ax.set_title(title)
    return fig
