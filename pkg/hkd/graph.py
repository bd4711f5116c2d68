"""
Construction of the per-batch attributed context graph.

Every node is an instance of the mini-batch, node attributes are the
backbone features and edges connect each instance to its most similar
predictions. All functions are pure; adjacency matrices are dense
``b x b`` tensors with the dtype of the input.
"""

from dataclasses import dataclass

import torch

GRAPH_MODES = ('knn', 'random', 'fc')
KNN_METRICS = ('cosine', 'euclidean')
EDGE_WEIGHTINGS = ('binary', 'cosine')


@dataclass
class PredictionBatch:
    """Logits and temperature-scaled soft targets of one network for one
    mini-batch."""
    logits: torch.Tensor
    soft_targets: torch.Tensor
    temperature: float

    @classmethod
    def from_logits(cls, logits, temperature):
        return cls(logits, softmax_with_temperature(logits, temperature),
                   float(temperature))


@dataclass
class AttributedGraph:
    adjacency: torch.Tensor
    normalized_adjacency: torch.Tensor
    features: torch.Tensor
    k: int


def softmax_with_temperature(logits, temperature):
    """Row-wise softmax of ``logits / temperature``.

    :param logits: tensor of shape ``[b, K]``.
    :param temperature: positive scalar; larger values flatten the output.
    :return: tensor of shape ``[b, K]`` whose rows sum to one.
    """
    if not temperature > 0:
        raise ValueError(
            "temperature must be positive, got {}".format(temperature))
    if logits.dim() != 2:
        raise ValueError("logits must be a [b, K] matrix")
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")
    return torch.softmax(logits / temperature, dim=1)


def _similarity(predictions, metric):
    if metric == 'cosine':
        norms = predictions.norm(dim=1)
        if (norms == 0).any():
            bad = torch.nonzero(norms == 0).flatten().tolist()
            raise ValueError(
                "prediction rows {} have zero norm".format(bad))
        unit = predictions / norms[:, None]
        return unit @ unit.T
    if metric == 'euclidean':
        return -torch.cdist(predictions, predictions)
    raise ValueError("unknown similarity metric '{}', expected one of {}"
                     .format(metric, KNN_METRICS))


def knn_neighbours(predictions, k, metric='cosine'):
    """For every row, the indices of its ``k`` most similar other rows,
    ordered by decreasing similarity. Ties go to the lower index.

    :return: long tensor of shape ``[b, k]``.
    """
    b = predictions.shape[0]
    if k < 1:
        raise ValueError("k must be at least 1, got {}".format(k))
    if k >= b:
        raise ValueError(
            "k={} needs a batch larger than k, got b={}".format(k, b))

    sim = _similarity(predictions, metric)
    sim.fill_diagonal_(float('-inf'))
    # a stable sort keeps equal similarities in index order
    order = torch.sort(sim, dim=1, descending=True, stable=True).indices
    return order[:, :k]


def build_knn_adjacency(predictions, k, metric='cosine'):
    """Symmetric binary KNN graph: each node points to its ``k`` nearest
    neighbours, then the directed graph is OR-ed with its transpose.

    :param predictions: ``[b, K]`` prediction matrix.
    :param k: number of neighbours, ``1 <= k < b``.
    :param metric: ``'cosine'`` or ``'euclidean'``.
    :return: ``[b, b]`` tensor of zeros and ones with zero diagonal.
    """
    neighbours = knn_neighbours(predictions, k, metric)
    b = predictions.shape[0]
    directed = torch.zeros(b, b, dtype=predictions.dtype,
                           device=predictions.device)
    directed.scatter_(1, neighbours, 1.0)
    return torch.maximum(directed, directed.T)


def _as_generator(seed):
    if isinstance(seed, torch.Generator):
        return seed
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator


def build_ablation_adjacency(b, mode, k=None, seed=0, dtype=torch.float32):
    """Graphs used by the graph-construction ablation.

    ``fully_connected`` (alias ``fc``) links every pair of distinct nodes.
    ``random`` lets every node pick ``k`` distinct other nodes uniformly at
    random, then symmetrizes like the KNN graph.

    :param seed: integer seed or :py:class:`torch.Generator`.
    """
    if mode in ('fully_connected', 'fc'):
        return torch.ones(b, b, dtype=dtype) - torch.eye(b, dtype=dtype)

    if mode != 'random':
        raise ValueError(
            "unknown ablation graph mode '{}', expected 'random' or "
            "'fully_connected'".format(mode))
    if k is None or k < 1 or k >= b:
        raise ValueError(
            "random graph needs 1 <= k < b, got k={}, b={}".format(k, b))

    generator = _as_generator(seed)
    directed = torch.zeros(b, b, dtype=dtype)
    for i in range(b):
        picks = torch.randperm(b - 1, generator=generator)[:k]
        picks = picks + (picks >= i).long()
        directed[i, picks] = 1.0
    return torch.maximum(directed, directed.T)


def weight_adjacency(adjacency, predictions):
    """Scale every edge by the (non-negative part of the) cosine similarity
    of its end points. Edges whose weight would vanish keep a floor of
    ``1e-6`` so the node degrees stay positive."""
    sim = _similarity(predictions, 'cosine')
    sim = ((sim + sim.T) / 2).clamp(min=1e-6)
    return adjacency * sim


def normalize_adjacency(adjacency):
    """Symmetric normalization ``D^{-1/2} A D^{-1/2}``.

    :param adjacency: symmetric ``[b, b]`` matrix with zero diagonal and no
        isolated nodes.
    :return: ``[b, b]`` matrix with spectrum inside ``[-1, 1]``.
    """
    if adjacency.dim() != 2 or adjacency.shape[0] != adjacency.shape[1]:
        raise ValueError("adjacency must be a square matrix")
    if not torch.equal(adjacency, adjacency.T):
        raise ValueError("adjacency must be symmetric")

    degree = adjacency.sum(dim=1)
    if (degree <= 0).any():
        isolated = torch.nonzero(degree <= 0).flatten().tolist()
        raise ValueError(
            "nodes {} are isolated (zero degree)".format(isolated))

    scale = degree.rsqrt()
    return scale[:, None] * adjacency * scale[None, :]


def build_attributed_graph(
        predictions, features, k, mode='knn', metric='cosine',
        edge_weighting='binary', seed=0):
    """Build ``G = {A, F}`` for one network's view of a batch.

    :param predictions: ``[b, K]`` predictions used for the KNN edges.
    :param features: ``[b, d]`` node attributes; gradients flow through.
    :param mode: one of ``'knn'``, ``'random'``, ``'fc'``.
    :param seed: seed or generator for the ``random`` mode.
    """
    b = features.shape[0]
    if predictions.shape[0] != b:
        raise ValueError(
            "predictions and features disagree on the batch size "
            "({} != {})".format(predictions.shape[0], b))

    with torch.no_grad():
        if mode == 'knn':
            adjacency = build_knn_adjacency(predictions, k, metric)
        elif mode in ('random', 'fc'):
            adjacency = build_ablation_adjacency(
                b, mode, k, seed, dtype=features.dtype).to(features.device)
        else:
            raise ValueError("unknown graph mode '{}', expected one of {}"
                             .format(mode, GRAPH_MODES))

        if edge_weighting == 'cosine':
            adjacency = weight_adjacency(adjacency, predictions)
        elif edge_weighting != 'binary':
            raise ValueError("unknown edge weighting '{}'"
                             .format(edge_weighting))

        adjacency = adjacency.to(features.dtype)
        normalized = normalize_adjacency(adjacency)

    return AttributedGraph(adjacency, normalized, features, k)
