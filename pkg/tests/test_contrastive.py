import math

import pytest
import torch

from hkd.contrastive import (
    infonce_in_batch, infonce_with_bank, graph_bank_variant,
    bank_contrast_term, sample_negatives, bank_update, MemoryBank,
    mse_alignment_loss, jsd_in_batch_loss)
from hkd.encoder import normalize_rows, init_hop_weights


def unit(generator, b, g):
    return normalize_rows(
        torch.randn(b, g, generator=generator, dtype=torch.float64))[0]


def in_batch_oracle(t, s, tau):
    t, s = t.tolist(), s.tolist()
    b = len(t)
    total = 0.0
    for i in range(b):
        scores = [sum(x * y for x, y in zip(t[i], s[j])) / tau
                  for j in range(b)]
        total += scores[i] - math.log(sum(math.exp(v) for v in scores) / b)
    return -total / b


def test_in_batch_matches_oracle(generator):
    for tau in (1.0, 0.5, 0.1):
        t, s = unit(generator, 7, 5), unit(generator, 7, 5)
        result = infonce_in_batch(t, s, tau)
        assert float(result.loss) == pytest.approx(
            in_batch_oracle(t, s, tau), rel=1e-10, abs=1e-12)
        assert result.mi_lower_bound_estimate == pytest.approx(
            -float(result.loss))
        torch.testing.assert_close(
            result.positive_similarities, (t * s).sum(dim=1))


def test_in_batch_bound_never_exceeds_log_b(generator):
    for _ in range(1000):
        b = int(torch.randint(2, 20, (1,), generator=generator))
        result = infonce_in_batch(unit(generator, b, 6), unit(generator, b, 6))
        assert float(result.bound_terms.max()) <= math.log(b) + 1e-12
        assert result.mi_lower_bound_estimate <= math.log(b) + 1e-12


def test_in_batch_rejects_bad_input(generator):
    t = unit(generator, 4, 3)
    with pytest.raises(ValueError, match='unit'):
        infonce_in_batch(t * 2, t)
    with pytest.raises(ValueError):
        infonce_in_batch(t, unit(generator, 5, 3))


def test_aligned_student_is_not_the_optimum():
    # orthonormal teacher rows; a student copying them scores 1 - log((e+2)/3)
    teacher = torch.eye(3, 4, dtype=torch.float64)
    aligned = infonce_in_batch(teacher, teacher)
    assert float(aligned.loss) == pytest.approx(
        -(1 - math.log((math.e + 2) / 3)), abs=1e-12)

    generator = torch.Generator().manual_seed(1)
    raw = torch.randn(3, 4, generator=generator, dtype=torch.float64)
    raw.requires_grad_()
    optimizer = torch.optim.Adam([raw], lr=0.05)
    for _ in range(2000):
        optimizer.zero_grad()
        loss = infonce_in_batch(teacher, normalize_rows(raw)[0]).loss
        loss.backward()
        optimizer.step()

    student = normalize_rows(raw.detach())[0]
    final = infonce_in_batch(teacher, student)
    assert float(final.loss) < float(aligned.loss) - 0.05
    similarities = student @ teacher.T
    assert similarities.argmax(dim=1).tolist() == [0, 1, 2]


def bank_oracle(anchor, positive, entries, theta, negatives, tau):
    """Per-anchor loop over an explicit list of negative rows."""
    total = 0.0
    for i, rows in enumerate(negatives):
        projected = normalize_rows(entries[rows] @ theta)[0]
        pos = float(anchor[i] @ positive[i]) / tau
        logits = [pos] + [float(anchor[i] @ n) / tau for n in projected]
        total += pos - math.log(sum(math.exp(v) for v in logits))
    return -total / len(negatives)


def test_bank_term_with_all_negatives(generator):
    b, d, g, size = 5, 6, 4, 9
    anchor, positive = unit(generator, b, g), unit(generator, b, g)
    bank = MemoryBank.random(size, d, generator=generator,
                             dtype=torch.float64)
    theta = init_hop_weights(d, g, 0, generator, torch.float64)
    indices = torch.tensor([0, 2, 3, 5, 8])
    result = bank_contrast_term(
        anchor, positive, bank, theta, indices, size - 1, 0.5, generator)
    negatives = [[j for j in range(size) if j != int(i)] for i in indices]
    assert float(result.loss) == pytest.approx(
        bank_oracle(anchor, positive, bank.entries, theta[0], negatives, 0.5),
        rel=1e-10)
    assert result.mi_lower_bound_estimate == pytest.approx(
        math.log(size) - float(result.loss))


def test_bank_term_without_negatives(generator):
    anchor = unit(generator, 4, 3)
    bank = MemoryBank.random(6, 3, generator=generator, dtype=torch.float64)
    result = bank_contrast_term(
        anchor, anchor, bank, None, torch.arange(4), 0)
    assert float(result.loss) == pytest.approx(0.0, abs=1e-12)


def test_bank_term_rejects_bad_arguments(generator):
    anchor = unit(generator, 4, 3)
    bank = MemoryBank.random(6, 3, generator=generator, dtype=torch.float64)
    with pytest.raises(ValueError):
        bank_contrast_term(anchor, anchor, bank, None, torch.arange(4), 6)
    with pytest.raises(ValueError):
        bank_contrast_term(anchor, anchor, bank, None,
                           torch.tensor([0, 1, 2, 6]), 2)
    with pytest.raises(ValueError):
        bank_contrast_term(anchor, anchor, bank, None, torch.arange(3), 2)


def test_graph_bank_reduces_to_in_batch(generator):
    b, g = 6, 5
    t, s = unit(generator, b, g), unit(generator, b, g)
    teacher_bank = MemoryBank(t.clone(), owner='teacher')
    student_bank = MemoryBank(s.clone(), owner='student')
    result = graph_bank_variant(
        t, s, teacher_bank, student_bank, torch.arange(b), b - 1,
        generator=generator)
    expected = infonce_in_batch(t, s).loss + infonce_in_batch(s, t).loss \
        + 2 * math.log(b)
    assert float(result.loss) == pytest.approx(float(expected), rel=1e-10)


def test_bank_objective_sums_both_directions(generator):
    b, d, g, size = 4, 5, 3, 8
    t, s = unit(generator, b, g), unit(generator, b, g)
    teacher_bank = MemoryBank.random(size, d, generator=generator,
                                     dtype=torch.float64)
    student_bank = MemoryBank.random(size, d, owner='student',
                                     generator=generator, dtype=torch.float64)
    t_theta = init_hop_weights(d, g, 0, generator, torch.float64)
    s_theta = init_hop_weights(d, g, 0, generator, torch.float64)
    indices = torch.tensor([1, 3, 4, 7])
    result = infonce_with_bank(
        t, s, teacher_bank, student_bank, t_theta, s_theta, indices,
        size - 1)
    forward = bank_contrast_term(t, s, student_bank, s_theta, indices,
                                 size - 1)
    backward = bank_contrast_term(s, t, teacher_bank, t_theta, indices,
                                  size - 1)
    assert float(result.loss) == pytest.approx(
        float(forward.loss + backward.loss), rel=1e-10)


def test_negative_sampling(generator):
    indices = torch.tensor([0, 4, 9, 2])
    picks = sample_negatives(indices, 10, 9, generator)
    assert picks.shape == (4, 9)
    for anchor, row in zip(indices.tolist(), picks.tolist()):
        assert anchor not in row
        assert len(set(row)) == 9
    again = sample_negatives(indices, 10, 5,
                             torch.Generator().manual_seed(5))
    assert torch.equal(again, sample_negatives(
        indices, 10, 5, torch.Generator().manual_seed(5)))


def test_bank_update_formula(generator):
    bank = MemoryBank.random(10, 4, momentum=0.5, generator=generator,
                             dtype=torch.float64)
    before = bank.entries.clone()
    indices = torch.tensor([7, 2, 5])
    new = torch.randn(3, 4, generator=generator, dtype=torch.float64)
    bank_update(bank, indices, new)

    for row, i in enumerate(indices.tolist()):
        expected = 0.5 * before[i] + 0.5 * new[row] / new[row].norm()
        torch.testing.assert_close(bank.entries[i], expected / expected.norm())
    untouched = [i for i in range(10) if i not in indices.tolist()]
    assert torch.equal(bank.entries[untouched], before[untouched])


def test_bank_rows_stay_unit(generator):
    bank = MemoryBank.random(50, 8, momentum=0.9, generator=generator,
                             dtype=torch.float64)
    for _ in range(10000):
        indices = torch.randperm(50, generator=generator)[:4]
        bank_update(bank, indices, 100 * torch.randn(
            4, 8, generator=generator, dtype=torch.float64))
    torch.testing.assert_close(
        bank.entries.norm(dim=1), torch.ones(50, dtype=torch.float64),
        rtol=0, atol=1e-6)


def test_bank_momentum_edges(generator):
    new = torch.randn(2, 3, generator=generator, dtype=torch.float64)
    indices = torch.tensor([0, 1])

    frozen = MemoryBank.random(3, 3, momentum=1.0, generator=generator,
                               dtype=torch.float64)
    before = frozen.entries.clone()
    bank_update(frozen, indices, new)
    torch.testing.assert_close(frozen.entries, before)

    replace = MemoryBank.random(3, 3, momentum=0.0, generator=generator,
                                dtype=torch.float64)
    bank_update(replace, indices, new)
    torch.testing.assert_close(replace.entries[:2], normalize_rows(new)[0])

    with pytest.raises(ValueError):
        MemoryBank.random(3, 3, momentum=1.5)
    with pytest.raises(ValueError):
        bank_update(replace, indices,
                    torch.full((2, 3), float('nan'), dtype=torch.float64))


def test_mse_alignment(generator):
    t, s = unit(generator, 5, 4), unit(generator, 5, 4)
    expected = sum(float((a - b) ** 2) for a, b in
                   zip(t.flatten(), s.flatten())) / 20
    assert float(mse_alignment_loss(t, s)) == pytest.approx(expected)
    assert float(mse_alignment_loss(t, t)) == 0.0


def test_jsd_matches_oracle(generator):
    t, s = unit(generator, 4, 3), unit(generator, 4, 3)
    scores = (t @ s.T).tolist()

    def softplus(x):
        return math.log1p(math.exp(x))

    positives = sum(softplus(-scores[i][i]) for i in range(4)) / 4
    negatives = sum(softplus(scores[i][j]) for i in range(4)
                    for j in range(4) if i != j) / 12
    assert float(jsd_in_batch_loss(t, s)) == pytest.approx(
        positives + negatives, rel=1e-10)
    with pytest.raises(ValueError):
        jsd_in_batch_loss(t[:1], s[:1])


def test_in_batch_matches_oracle_on_many_batches():
    for seed in range(50):
        g = torch.Generator().manual_seed(seed)
        b, width = 2 + seed % 7, 3 + seed % 4
        t, s = unit(g, b, width), unit(g, b, width)
        tau = (1.0, 0.5, 0.2)[seed % 3]
        assert float(infonce_in_batch(t, s, tau).loss) == pytest.approx(
            in_batch_oracle(t, s, tau), rel=1e-10, abs=1e-12)


def test_in_batch_single_instance(generator):
    t, s = unit(generator, 1, 4), unit(generator, 1, 4)
    assert float(infonce_in_batch(t, s).loss) == 0.0


def test_in_batch_two_orthonormal_rows():
    e = torch.eye(2, dtype=torch.float64)
    expected = -(1 - math.log((math.exp(1) + math.exp(0)) / 2))
    assert float(infonce_in_batch(e, e).loss) == pytest.approx(
        expected, abs=1e-12)


def test_in_batch_is_permutation_invariant(generator):
    t, s = unit(generator, 8, 5), unit(generator, 8, 5)
    perm = torch.randperm(8, generator=generator)
    for tau in (1.0, 0.1):
        assert float(infonce_in_batch(t[perm], s[perm], tau).loss) == \
            pytest.approx(float(infonce_in_batch(t, s, tau).loss),
                          rel=1e-12)


def test_in_batch_gradients(generator):
    t_raw = torch.randn(4, 6, generator=generator, dtype=torch.float64,
                        requires_grad=True)
    s_raw = torch.randn(4, 6, generator=generator, dtype=torch.float64,
                        requires_grad=True)

    def loss(t, s):
        return infonce_in_batch(
            normalize_rows(t)[0], normalize_rows(s)[0], 0.5).loss

    assert torch.autograd.gradcheck(
        loss, (t_raw, s_raw), eps=1e-6, atol=1e-7, rtol=1e-4)


@pytest.mark.parametrize('tau', [0.0, -0.5])
def test_objectives_reject_bad_temperature(generator, tau):
    t = unit(generator, 4, 3)
    bank = MemoryBank.random(6, 3, generator=generator, dtype=torch.float64)
    with pytest.raises(ValueError, match='temperature'):
        infonce_in_batch(t, t, tau)
    with pytest.raises(ValueError, match='temperature'):
        jsd_in_batch_loss(t, t, tau)
    with pytest.raises(ValueError, match='temperature'):
        bank_contrast_term(t, t, bank, None, torch.arange(4), 2, tau)


def test_bank_term_matches_oracle_on_many_instances():
    for seed in range(50):
        g = torch.Generator().manual_seed(seed)
        b, d, width = 2 + seed % 4, 3 + seed % 3, 2 + seed % 3
        size = b + 1 + seed % 5
        anchor, positive = unit(g, b, width), unit(g, b, width)
        bank = MemoryBank.random(size, d, generator=g, dtype=torch.float64)
        theta = init_hop_weights(d, width, 0, g, torch.float64)
        indices = torch.randperm(size, generator=g)[:b]
        tau = (1.0, 0.5)[seed % 2]
        result = bank_contrast_term(
            anchor, positive, bank, theta, indices, size - 1, tau, g)
        negatives = [[j for j in range(size) if j != int(i)]
                     for i in indices]
        assert float(result.loss) == pytest.approx(
            bank_oracle(anchor, positive, bank.entries, theta[0], negatives,
                        tau), rel=1e-10, abs=1e-12)


def test_jsd_prefers_aligned_positives():
    t = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
    aligned = jsd_in_batch_loss(t, t)
    reversed_pairs = jsd_in_batch_loss(t, t.flip(0))
    assert float(aligned) < float(reversed_pairs)


def test_jsd_two_orthonormal_rows():
    e = torch.eye(2, dtype=torch.float64)
    expected = math.log1p(math.exp(-1.0)) + math.log(2.0)
    assert float(jsd_in_batch_loss(e, e)) == pytest.approx(
        expected, rel=1e-12)


def test_jsd_is_permutation_invariant(generator):
    t, s = unit(generator, 6, 4), unit(generator, 6, 4)
    perm = torch.randperm(6, generator=generator)
    assert float(jsd_in_batch_loss(t[perm], s[perm], 0.5)) == \
        pytest.approx(float(jsd_in_batch_loss(t, s, 0.5)), rel=1e-12)
