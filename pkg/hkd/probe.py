"""
Linear probe: a randomly initialized linear classifier trained on frozen
representations.
"""

import logging
import warnings

import torch
import torch.nn.functional as F
from torch import nn

from .seeds import derive_seed, seeded_global_rng
from .stats import accuracy

log = logging.getLogger(__name__)

MIN_STD = 1e-8


def standardize(train, test):
    """Scale both feature sets with the training mean and standard deviation.
    Constant feature dimensions are left unscaled and reported."""
    mean = train.mean(dim=0)
    std = train.std(dim=0, unbiased=False)
    degenerate = std < MIN_STD
    if degenerate.all():
        warnings.warn("all probe features are constant; the probe can only "
                      "learn the class prior")
    elif degenerate.any():
        warnings.warn("{} of {} probe feature dimensions are constant".format(
            int(degenerate.sum()), degenerate.numel()))
    std = torch.where(degenerate, torch.ones_like(std), std)
    return (train - mean) / std, (test - mean) / std


def linear_probe(train, test, num_classes, seed=0, max_iter=500,
                 tolerance=1e-6, weight_decay=1e-4):
    """Fit a linear classifier on ``train`` with full-batch L-BFGS and report
    its accuracy on ``test``.

    :param train: object with ``features`` ``[n, d]`` and ``labels`` ``[n]``.
    :param test: same, for the evaluation split.
    :param tolerance: gradient and change tolerance of the optimizer.
    :return: test accuracy in percent.
    """
    x_train, x_test = standardize(train.features.double(),
                                  test.features.double())
    y_train = train.labels

    with seeded_global_rng(derive_seed(seed, 'probe')):
        classifier = nn.Linear(x_train.shape[1], num_classes).double()

    optimizer = torch.optim.LBFGS(
        classifier.parameters(), lr=1.0, max_iter=max_iter,
        tolerance_grad=tolerance, tolerance_change=tolerance,
        history_size=20, line_search_fn='strong_wolfe')

    def closure():
        optimizer.zero_grad()
        loss = F.cross_entropy(classifier(x_train), y_train)
        loss = loss + weight_decay * classifier.weight.pow(2).sum()
        loss.backward()
        return loss

    optimizer.step(closure)

    with torch.no_grad():
        train_acc = accuracy(classifier(x_train), y_train)
        test_acc = accuracy(classifier(x_test), test.labels)
    log.info("linear probe: train %.2f%%, test %.2f%%", train_acc, test_acc)
    return test_acc
