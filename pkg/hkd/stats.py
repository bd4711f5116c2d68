"""
Evaluation metrics: top-1 accuracy, average relative improvement over a
baseline, prediction-similarity matrices and seed statistics.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import torch


def accuracy(predictions, labels):
    """Top-1 accuracy in percent; argmax ties go to the lowest class index.

    :param predictions: ``[n, K]`` scores (logits or probabilities).
    :param labels: ``[n]`` integer labels.
    """
    if predictions.dim() != 2 or labels.dim() != 1 \
            or predictions.shape[0] != labels.shape[0]:
        raise ValueError(
            "predictions {} do not match labels {}".format(
                tuple(predictions.shape), tuple(labels.shape)))
    if labels.shape[0] == 0:
        raise ValueError("accuracy of an empty set")
    hits = (predictions.argmax(dim=1) == labels.to(predictions.device))
    return 100.0 * float(hits.double().mean())


@dataclass
class AriInput:
    """Accuracies (percent) of one teacher/student combination."""
    acc_hkd: float
    acc_bkd: float
    acc_stu: float
    name: Optional[str] = None


def ari(rows):
    """Average relative improvement, in percent::

        100 / M * sum((acc_hkd - acc_bkd) / (acc_bkd - acc_stu))

    :raises ValueError: on an empty input or when a baseline equals the
        plain student.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("ARI over zero combinations")
    ratios = []
    for i, row in enumerate(rows):
        gain = row.acc_bkd - row.acc_stu
        if gain == 0:
            raise ValueError(
                "row {} ({}): baseline accuracy equals the student's".format(
                    i, row.name or 'unnamed'))
        ratios.append((row.acc_hkd - row.acc_bkd) / gain)
    return 100.0 * float(np.mean(ratios))


def read_ari_table(path):
    """Accuracy table with methods as rows and teacher/student pairs as
    columns; the first column holds the method names."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    table = pd.read_csv(path, index_col=0)
    table.index = table.index.astype(str).str.strip()
    try:
        return table.astype(float)
    except ValueError as err:
        raise ValueError(
            "{} holds non-numeric accuracies: {}".format(path, err)) from None


def ari_table(table, method='HKD+KD', student='Student',
              exclude=('Teacher',)):
    """ARI of ``method`` against every other row, with ``student`` as the
    plain-student reference.

    :return: copy of ``table`` with an ``ARI (%)`` column; rows without an
        ARI (``method``, ``student`` and ``exclude``) hold NaN.
    """
    for name in (method, student):
        if name not in table.index:
            raise ValueError("table has no '{}' row".format(name))
    pairs = [c for c in table.columns if c != 'ARI (%)']
    result = table.copy()
    result['ARI (%)'] = np.nan
    for baseline in table.index:
        if baseline in (method, student) or baseline in exclude:
            continue
        result.loc[baseline, 'ARI (%)'] = ari(
            AriInput(table.loc[method, c], table.loc[baseline, c],
                     table.loc[student, c], '{} / {}'.format(baseline, c))
            for c in pairs)
    return result


def mean_std(values):
    """Mean and sample standard deviation (zero for a single value)."""
    values = np.asarray(list(values), dtype=float)
    if values.size == 0:
        raise ValueError("no values")
    std = values.std(ddof=1) if values.size > 1 else 0.0
    return float(values.mean()), float(std)


def summarize_runs(frame, by, value='test_acc'):
    """Mean and standard deviation of ``value`` per group."""
    grouped = frame.groupby(by, sort=False)[value]
    summary = grouped.agg(['mean', 'count']).rename(
        columns={'count': 'runs'})
    summary['std'] = grouped.agg(lambda v: mean_std(v)[1])
    return summary[['mean', 'std', 'runs']]


def prediction_similarity(logits):
    """Pairwise cosine similarity of the softmax predictions, ``[b, b]``."""
    if logits.dim() != 2:
        raise ValueError("logits must be a [b, K] matrix")
    p = torch.softmax(logits.double(), dim=1)
    p = p / p.norm(dim=1, keepdim=True)
    return (p @ p.T).clamp(-1.0, 1.0)


def frobenius_distance(a, b):
    if a.shape != b.shape:
        raise ValueError("matrix shapes differ: {} vs {}".format(
            tuple(a.shape), tuple(b.shape)))
    return float(torch.linalg.norm((a - b).double()))
