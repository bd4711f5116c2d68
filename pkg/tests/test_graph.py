import math

import numpy as np
import pytest
import torch
from scipy.linalg import eigvalsh

from hkd.graph import (
    softmax_with_temperature, knn_neighbours, build_knn_adjacency,
    build_ablation_adjacency, normalize_adjacency, weight_adjacency,
    build_attributed_graph, PredictionBatch)


def knn_oracle(predictions, k):
    p = predictions.tolist()
    b = len(p)

    def cosine(u, v):
        dot = sum(x * y for x, y in zip(u, v))
        return dot / math.sqrt(sum(x * x for x in u) * sum(y * y for y in v))

    a = [[0.0] * b for _ in range(b)]
    for i in range(b):
        others = sorted((j for j in range(b) if j != i),
                        key=lambda j: (-cosine(p[i], p[j]), j))
        for j in others[:k]:
            a[i][j] = a[j][i] = 1.0
    return torch.tensor(a, dtype=torch.float64)


def normalize_oracle(adjacency):
    a = adjacency.tolist()
    b = len(a)
    degree = [sum(row) for row in a]
    return torch.tensor(
        [[a[i][j] / math.sqrt(degree[i] * degree[j]) for j in range(b)]
         for i in range(b)], dtype=torch.float64)


def test_softmax_rows_sum_to_one(generator):
    logits = torch.randn(5, 7, generator=generator, dtype=torch.float64)
    p = softmax_with_temperature(logits, 4.0)
    torch.testing.assert_close(p.sum(dim=1), torch.ones(5, dtype=p.dtype))


def test_softmax_temperature_flattens(generator):
    logits = torch.randn(6, 10, generator=generator, dtype=torch.float64)

    def entropy(p):
        return -(p * p.log()).sum(dim=1)

    cold = entropy(softmax_with_temperature(logits, 1.0))
    hot = entropy(softmax_with_temperature(logits, 8.0))
    assert (hot >= cold).all()


def test_softmax_examples():
    torch.testing.assert_close(
        softmax_with_temperature(torch.zeros(1, 2, dtype=torch.float64), 1.0),
        torch.tensor([[0.5, 0.5]], dtype=torch.float64))
    shifted = softmax_with_temperature(
        torch.tensor([[1.0, 2.0], [6.0, 7.0]], dtype=torch.float64), 1.0)
    torch.testing.assert_close(shifted[0], shifted[1])

    p = softmax_with_temperature(
        torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64), 2.0)
    total = sum(math.exp(z / 2) for z in (1.0, 2.0, 3.0))
    expected = [math.exp(z / 2) / total for z in (1.0, 2.0, 3.0)]
    torch.testing.assert_close(
        p[0], torch.tensor(expected, dtype=torch.float64))


def test_higher_temperature_lowers_the_peak(generator):
    logits = torch.randn(4, 6, generator=generator, dtype=torch.float64)
    cold = softmax_with_temperature(logits, 1.0).max(dim=1).values
    hot = softmax_with_temperature(logits, 3.0).max(dim=1).values
    assert (hot < cold).all()


@pytest.mark.parametrize('temperature', [0.0, -1.0])
def test_softmax_rejects_bad_temperature(temperature):
    with pytest.raises(ValueError):
        softmax_with_temperature(torch.zeros(2, 3), temperature)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        softmax_with_temperature(torch.tensor([[0.0, float('nan')]]), 1.0)


def test_prediction_batch_from_logits():
    logits = torch.tensor([[1.0, 2.0], [0.5, 0.5]], dtype=torch.float64)
    pred = PredictionBatch.from_logits(logits, 2.0)
    assert pred.temperature == 2.0
    torch.testing.assert_close(pred.soft_targets[1],
                               torch.tensor([0.5, 0.5], dtype=torch.float64))


def test_knn_adjacency_matches_oracle():
    for seed in range(50):
        g = torch.Generator().manual_seed(seed)
        b = 3 + seed % 6
        k = 1 + seed % (b - 1)
        predictions = torch.softmax(
            torch.randn(b, 5, generator=g, dtype=torch.float64), dim=1)
        torch.testing.assert_close(
            build_knn_adjacency(predictions, k), knn_oracle(predictions, k),
            rtol=0, atol=0)


def test_knn_adjacency_structure(generator):
    b, k = 12, 3
    predictions = torch.rand(b, 6, generator=generator, dtype=torch.float64)
    a = build_knn_adjacency(predictions, k)
    assert torch.equal(a, a.T)
    assert torch.all(a.diagonal() == 0)
    assert set(a.unique().tolist()) <= {0.0, 1.0}
    assert torch.all(a.sum(dim=1) >= k)
    neighbours = knn_neighbours(predictions, k)
    for i in range(b):
        assert torch.all(a[i, neighbours[i]] == 1)


def test_knn_ties_prefer_lower_index():
    predictions = torch.ones(5, 3, dtype=torch.float64)
    neighbours = knn_neighbours(predictions, 2)
    assert neighbours[0].tolist() == [1, 2]
    assert neighbours[3].tolist() == [0, 1]
    assert neighbours[4].tolist() == [0, 1]


def test_knn_euclidean_metric():
    predictions = torch.tensor(
        [[0.0], [1.0], [3.0], [10.0]], dtype=torch.float64)
    neighbours = knn_neighbours(predictions, 1, metric='euclidean')
    assert neighbours.flatten().tolist() == [1, 0, 1, 2]


def test_knn_on_one_hot_classes():
    predictions = torch.eye(2, dtype=torch.float64)[[0, 0, 1, 1]]
    expected = torch.zeros(4, 4, dtype=torch.float64)
    expected[0, 1] = expected[1, 0] = 1.0
    expected[2, 3] = expected[3, 2] = 1.0
    assert torch.equal(build_knn_adjacency(predictions, 1), expected)


def test_knn_with_all_neighbours_is_complete(generator):
    predictions = torch.rand(5, 3, generator=generator, dtype=torch.float64)
    assert torch.equal(build_knn_adjacency(predictions, 4),
                       torch.ones(5, 5, dtype=torch.float64)
                       - torch.eye(5, dtype=torch.float64))


def test_knn_is_permutation_equivariant(generator):
    predictions = torch.rand(9, 4, generator=generator, dtype=torch.float64)
    perm = torch.randperm(9, generator=generator)
    a = build_knn_adjacency(predictions, 3)
    assert torch.equal(build_knn_adjacency(predictions[perm], 3),
                       a[perm][:, perm])


def test_knn_is_scale_invariant(generator):
    predictions = torch.rand(8, 4, generator=generator, dtype=torch.float64)
    scale = 0.5 + torch.rand(8, 1, generator=generator, dtype=torch.float64)
    assert torch.equal(build_knn_adjacency(predictions * scale, 2),
                       build_knn_adjacency(predictions, 2))


@pytest.mark.parametrize('k', [0, 4, 5])
def test_knn_rejects_bad_k(k):
    with pytest.raises(ValueError):
        build_knn_adjacency(torch.rand(4, 3), k)


def test_knn_rejects_zero_rows():
    predictions = torch.tensor([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        build_knn_adjacency(predictions, 1)


def test_normalize_adjacency_matches_oracle():
    for seed in range(50):
        g = torch.Generator().manual_seed(seed)
        b = 3 + seed % 6
        predictions = torch.rand(b, 4, generator=g, dtype=torch.float64)
        a = build_knn_adjacency(predictions, 1 + seed % (b - 1))
        torch.testing.assert_close(
            normalize_adjacency(a), normalize_oracle(a), rtol=0, atol=1e-9)


def test_normalize_regular_graphs():
    triangle = build_ablation_adjacency(3, 'fc', dtype=torch.float64)
    torch.testing.assert_close(normalize_adjacency(triangle), 0.5 * triangle)
    cycle = torch.zeros(4, 4, dtype=torch.float64)
    for i in range(4):
        cycle[i, (i + 1) % 4] = cycle[(i + 1) % 4, i] = 1.0
    torch.testing.assert_close(normalize_adjacency(cycle), 0.5 * cycle)


def test_normalized_spectrum_in_unit_interval(generator):
    a = build_knn_adjacency(
        torch.rand(16, 5, generator=generator, dtype=torch.float64), 4)
    eigenvalues = eigvalsh(normalize_adjacency(a).numpy())
    assert eigenvalues.max() <= 1 + 1e-9
    assert eigenvalues.min() >= -1 - 1e-9
    # connected components give eigenvalue one
    assert np.isclose(eigenvalues.max(), 1.0)


def test_normalize_rejects_isolated_node():
    a = torch.zeros(3, 3, dtype=torch.float64)
    a[0, 1] = a[1, 0] = 1.0
    with pytest.raises(ValueError, match='isolated'):
        normalize_adjacency(a)


def test_normalize_rejects_asymmetric():
    a = torch.tensor([[0.0, 1.0], [0.0, 0.0]])
    with pytest.raises(ValueError, match='symmetric'):
        normalize_adjacency(a)


def test_fully_connected_graph():
    a = build_ablation_adjacency(5, 'fully_connected')
    assert torch.equal(a, torch.ones(5, 5) - torch.eye(5))
    assert torch.equal(build_ablation_adjacency(5, 'fc'), a)


def test_random_graph_structure():
    a = build_ablation_adjacency(16, 'random', k=3, seed=7,
                                 dtype=torch.float64)
    assert torch.equal(a, a.T)
    assert torch.all(a.diagonal() == 0)
    assert torch.all(a.sum(dim=1) >= 3)
    assert torch.equal(
        a, build_ablation_adjacency(16, 'random', k=3, seed=7,
                                    dtype=torch.float64))
    assert not torch.equal(
        a, build_ablation_adjacency(16, 'random', k=3, seed=8,
                                    dtype=torch.float64))


def test_ablation_rejects_unknown_mode():
    with pytest.raises(ValueError):
        build_ablation_adjacency(4, 'ring', k=1)
    with pytest.raises(ValueError):
        build_ablation_adjacency(4, 'random', k=4)


def test_weighted_edges(generator):
    predictions = torch.rand(8, 4, generator=generator, dtype=torch.float64)
    a = build_knn_adjacency(predictions, 2)
    w = weight_adjacency(a, predictions)
    assert torch.equal(w, w.T)
    assert torch.all(w[a > 0] > 0)
    assert torch.all(w[a == 0] == 0)
    assert torch.all(w <= 1 + 1e-12)
    normalize_adjacency(w)


def test_attributed_graph_keeps_gradients(generator):
    features = torch.randn(6, 4, generator=generator, dtype=torch.float64,
                           requires_grad=True)
    predictions = torch.rand(6, 3, generator=generator, dtype=torch.float64)
    graph = build_attributed_graph(predictions, features, k=2)
    assert graph.features is features
    assert graph.k == 2
    assert not graph.adjacency.requires_grad
    (graph.normalized_adjacency @ graph.features).sum().backward()
    assert features.grad is not None


@pytest.mark.parametrize('mode', ['knn', 'random', 'fc'])
def test_attributed_graph_modes(generator, mode):
    features = torch.randn(8, 4, generator=generator, dtype=torch.float64)
    predictions = torch.rand(8, 3, generator=generator, dtype=torch.float64)
    graph = build_attributed_graph(predictions, features, 2, mode, seed=3)
    assert graph.adjacency.shape == (8, 8)
    assert torch.equal(graph.adjacency, graph.adjacency.T)


def test_attributed_graph_rejects_size_mismatch():
    with pytest.raises(ValueError):
        build_attributed_graph(torch.rand(5, 3), torch.rand(6, 4), 2)
