"""
Holistic embeddings: topology adaptive graph convolution over the attributed
context graph, the parameter-free pooling baselines, and the projection of
raw features into the shared embedding space.
"""

import math
from dataclasses import dataclass

import torch
from torch import nn

ENCODER_MODES = ('gnn', 'sum', 'mean')
ZERO_NORM = 1e-12


@dataclass
class HolisticEmbedding:
    """Graph-based representation, one row per instance.

    ``zero_rows`` flags rows that were too small to be normalized."""
    vectors: torch.Tensor
    normalized: bool
    zero_rows: torch.Tensor = None


def normalize_rows(x):
    """L2-normalize the rows of ``x``. Rows with a norm below ``1e-12`` are
    passed through unchanged and flagged.

    :return: tuple ``(normalized, zero_rows)``.
    """
    norms = x.norm(dim=1, keepdim=True)
    zero_rows = (norms < ZERO_NORM).flatten()
    safe = torch.where(norms < ZERO_NORM, torch.ones_like(norms), norms)
    return x / safe, zero_rows


def _embedding(raw):
    vectors, zero_rows = normalize_rows(raw)
    return HolisticEmbedding(vectors, True, zero_rows)


def _check_weights(features, hop_weights):
    if features.dim() != 2:
        raise ValueError("features must be a [b, d] matrix")
    d = features.shape[1]
    widths = {w.shape[1] for w in hop_weights}
    if len(widths) != 1:
        raise ValueError(
            "hop weights disagree on the output width: {}".format(
                sorted(widths)))
    for l, w in enumerate(hop_weights):
        if w.dim() != 2 or w.shape[0] != d:
            raise ValueError(
                "hop weight {} has shape {}, expected [{}, g]".format(
                    l, tuple(w.shape), d))


def tagcn_forward(normalized_adjacency, features, hop_weights, L):
    """Evaluate ``sum_{l=0..L} Â^l F Θ_l`` and normalize the rows.

    :param normalized_adjacency: ``[b, b]`` matrix ``Â``.
    :param features: ``[b, d]`` node attributes ``F``.
    :param hop_weights: sequence of ``L + 1`` matrices of shape ``[d, g]``.
    :param L: number of hops, ``L >= 0``.
    :return: :py:class:`HolisticEmbedding` of width ``g``.
    """
    if L < 0:
        raise ValueError("L must be non-negative, got {}".format(L))
    if len(hop_weights) != L + 1:
        raise ValueError("expected {} hop weights for L={}, got {}".format(
            L + 1, L, len(hop_weights)))
    _check_weights(features, hop_weights)
    b = features.shape[0]
    if L > 0 and tuple(normalized_adjacency.shape) != (b, b):
        raise ValueError(
            "adjacency of shape {} does not match a batch of {}".format(
                tuple(normalized_adjacency.shape), b))

    propagated = features
    out = features @ hop_weights[0]
    for theta in hop_weights[1:]:
        propagated = normalized_adjacency @ propagated
        out = out + propagated @ theta
    return _embedding(out)


def pool_neighbours(adjacency, features, mode):
    """Raw neighbourhood aggregate: ``A F`` for ``sum``, ``D^{-1} A F`` for
    ``mean``."""
    if adjacency.shape[0] != features.shape[0]:
        raise ValueError(
            "adjacency and features disagree on the batch size "
            "({} != {})".format(adjacency.shape[0], features.shape[0]))
    if mode not in ('sum', 'mean'):
        raise ValueError(
            "unknown pooling mode '{}', expected 'sum' or 'mean'".format(
                mode))

    aggregate = adjacency @ features
    if mode == 'mean':
        degree = adjacency.sum(dim=1, keepdim=True)
        if (degree <= 0).any():
            raise ValueError("mean pooling over an isolated node")
        aggregate = aggregate / degree
    return aggregate


def pooling_forward(adjacency, features, mode):
    """Parameter-free neighbourhood aggregation over a binary adjacency.

    ``sum`` returns the row-normalized aggregate ``A F``; ``mean`` divides
    each node's aggregate by its degree and leaves the rows unnormalized.
    """
    aggregate = pool_neighbours(adjacency, features, mode)
    if mode == 'sum':
        return _embedding(aggregate)
    return HolisticEmbedding(aggregate, False)


def project_features(features, hop_weights):
    """Map raw features into the shared embedding space with ``Θ_0``; equal
    to :py:func:`tagcn_forward` with ``L = 0``."""
    theta = hop_weights[0]
    _check_weights(features, [theta])
    return _embedding(features @ theta)


def init_hop_weights(d, g, L, generator=None, dtype=torch.float32):
    """``L + 1`` matrices drawn uniformly from ``[-1/sqrt(d), 1/sqrt(d)]``."""
    bound = 1.0 / math.sqrt(d)
    return [
        (torch.rand(d, g, generator=generator, dtype=dtype) * 2 - 1) * bound
        for _ in range(L + 1)]


class HolisticEncoder(nn.Module):
    """Owns the hop weights ``Θ_0 … Θ_L`` of one network."""

    def __init__(self, d, g, L=1, generator=None, dtype=torch.float32):
        super().__init__()
        self.L = L
        self.hop_weights = nn.ParameterList(
            nn.Parameter(w)
            for w in init_hop_weights(d, g, L, generator, dtype))

    @property
    def in_features(self):
        return self.hop_weights[0].shape[0]

    @property
    def out_features(self):
        return self.hop_weights[0].shape[1]

    def forward(self, graph):
        return tagcn_forward(
            graph.normalized_adjacency, graph.features,
            list(self.hop_weights), self.L)

    def project(self, features):
        return project_features(features, list(self.hop_weights))


class PoolingEncoder(HolisticEncoder):
    """Sum/Mean pooling baseline: the node's own features plus the pooled
    neighbourhood, projected into the shared space by ``Θ_0``."""

    def __init__(self, d, g, mode, generator=None, dtype=torch.float32):
        if mode not in ('sum', 'mean'):
            raise ValueError("unknown pooling mode '{}'".format(mode))
        super().__init__(d, g, 0, generator, dtype)
        self.mode = mode

    def forward(self, graph):
        adjacency = (graph.adjacency > 0).to(graph.features.dtype)
        aggregate = pool_neighbours(adjacency, graph.features, self.mode)
        return self.project(graph.features + aggregate)


def build_encoder(mode, d, g, L, generator=None, dtype=torch.float32):
    if mode == 'gnn':
        return HolisticEncoder(d, g, L, generator, dtype)
    if mode in ('sum', 'mean'):
        return PoolingEncoder(d, g, mode, generator, dtype)
    raise ValueError("unknown encoder mode '{}', expected one of {}"
                     .format(mode, ENCODER_MODES))
