"""
Mutual-information objectives between teacher and student holistic
embeddings, and the momentum memory banks supplying their negatives.

Similarities are dot products of unit rows (cosine similarity) divided by a
contrast temperature; ``contrast_temperature = 1`` evaluates the plain
estimator.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import HolisticEmbedding, normalize_rows, project_features

OBJECTIVES = (
    'infonce_bank', 'infonce_batch', 'mse', 'jsd', 'graph_bank',
    'relational')
UNIT_TOLERANCE = 1e-5


@dataclass
class ContrastiveBatchResult:
    loss: torch.Tensor
    positive_similarities: torch.Tensor
    mi_lower_bound_estimate: float
    bound_terms: torch.Tensor = None


class MemoryBank(nn.Module):
    """One unit-normalized vector per training instance; row ``i`` always
    belongs to dataset instance ``i``."""

    def __init__(self, entries, momentum=0.5, owner='teacher'):
        super().__init__()
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(
                "momentum must lie in [0, 1], got {}".format(momentum))
        if owner not in ('teacher', 'student'):
            raise ValueError("owner must be 'teacher' or 'student'")
        self.momentum = momentum
        self.owner = owner
        self.register_buffer('entries', entries)

    @classmethod
    def random(cls, size, dim, momentum=0.5, owner='teacher',
               generator=None, dtype=torch.float32):
        """Bank filled with random unit vectors."""
        entries = torch.randn(size, dim, generator=generator, dtype=dtype)
        return cls(normalize_rows(entries)[0], momentum, owner)

    @property
    def size(self):
        return self.entries.shape[0]

    @property
    def dim(self):
        return self.entries.shape[1]


def _vectors(emb):
    return emb.vectors if isinstance(emb, HolisticEmbedding) else emb


def _unit_rows(emb, name):
    x = _vectors(emb)
    if x.dim() != 2:
        raise ValueError("{} must be a [b, g] matrix".format(name))
    norms = x.detach().norm(dim=1)
    if not torch.allclose(norms, torch.ones_like(norms),
                          atol=UNIT_TOLERANCE, rtol=0):
        raise ValueError("{} rows are not unit-normalized".format(name))
    return x


def _check_temperature(contrast_temperature):
    if not contrast_temperature > 0:
        raise ValueError("contrast temperature must be positive, got {}"
                         .format(contrast_temperature))


def _check_indices(batch_indices, size):
    if batch_indices.numel() and (
            batch_indices.min() < 0 or batch_indices.max() >= size):
        raise ValueError(
            "batch indices out of range for a bank of {} entries".format(
                size))


def infonce_in_batch(teacher_emb, student_emb, contrast_temperature=1.0):
    """In-batch InfoNCE: every other student row of the batch is a negative
    for a teacher anchor. The denominator is the batch mean, so every
    per-anchor bound term is at most ``log b``.

    :return: :py:class:`ContrastiveBatchResult`; ``loss`` is the negated
        bound.
    """
    t = _unit_rows(teacher_emb, 'teacher_emb')
    _check_temperature(contrast_temperature)
    s = _unit_rows(student_emb, 'student_emb')
    if t.shape != s.shape:
        raise ValueError("embedding shapes differ: {} vs {}".format(
            tuple(t.shape), tuple(s.shape)))
    b = t.shape[0]
    if b == 0:
        raise ValueError("empty batch")

    scores = t @ s.T / contrast_temperature
    bound_terms = scores.diagonal() - (
        torch.logsumexp(scores, dim=1) - math.log(b))
    loss = -bound_terms.mean()
    return ContrastiveBatchResult(
        loss=loss,
        positive_similarities=(t * s).sum(dim=1).detach(),
        mi_lower_bound_estimate=float(-loss.detach()),
        bound_terms=bound_terms.detach())


def sample_negatives(batch_indices, size, n_negatives, generator=None):
    """Draw ``n_negatives`` distinct bank rows per anchor, never the anchor's
    own row.

    :return: long tensor of shape ``[b, n_negatives]``.
    """
    b = batch_indices.shape[0]
    weights = torch.ones(b, size)
    weights[torch.arange(b), batch_indices.cpu()] = 0.0
    picks = torch.multinomial(
        weights, n_negatives, replacement=False, generator=generator)
    return picks.to(batch_indices.device)


def bank_contrast_term(anchor_emb, positive_emb, bank, projector,
                       batch_indices, n_negatives, contrast_temperature=1.0,
                       generator=None):
    """One direction of the memory-bank objective: anchor ``i`` against its
    positive and ``n_negatives`` bank rows ``j != i``.

    :param projector: hop weights whose ``Θ_0`` maps bank rows into the
        embedding space; ``None`` uses the bank rows as they are.
    :return: :py:class:`ContrastiveBatchResult` for this direction.
    """
    anchor = _unit_rows(anchor_emb, 'anchor_emb')
    positive = _unit_rows(positive_emb, 'positive_emb')
    if anchor.shape != positive.shape:
        raise ValueError("anchor and positive shapes differ")
    if batch_indices.shape[0] != anchor.shape[0]:
        raise ValueError("one batch index per anchor is required")
    size = bank.size
    _check_indices(batch_indices, size)
    _check_temperature(contrast_temperature)
    if n_negatives < 0 or n_negatives >= size:
        raise ValueError(
            "n_negatives must lie in [0, {}], got {}".format(
                size - 1, n_negatives))

    b, g = anchor.shape
    pos = (anchor * positive).sum(dim=1)
    logits = (pos / contrast_temperature)[:, None]
    if n_negatives > 0:
        idx = sample_negatives(batch_indices, size, n_negatives, generator)
        raw = bank.entries[idx.flatten()].detach()
        if projector is not None:
            negatives = project_features(raw, projector).vectors
        else:
            negatives = raw
        negatives = negatives.reshape(b, n_negatives, g)
        neg_logits = torch.einsum('bg,bng->bn', anchor, negatives)
        logits = torch.cat(
            [logits, neg_logits / contrast_temperature], dim=1)

    terms = logits[:, 0] - torch.logsumexp(logits, dim=1)
    loss = -terms.mean()
    return ContrastiveBatchResult(
        loss=loss,
        positive_similarities=pos.detach(),
        mi_lower_bound_estimate=math.log(n_negatives + 1) - float(
            loss.detach()),
        bound_terms=terms.detach())


def _symmetric(teacher_term, student_term):
    return ContrastiveBatchResult(
        loss=teacher_term.loss + student_term.loss,
        positive_similarities=teacher_term.positive_similarities,
        mi_lower_bound_estimate=(teacher_term.mi_lower_bound_estimate
                                 + student_term.mi_lower_bound_estimate) / 2,
        bound_terms=teacher_term.bound_terms + student_term.bound_terms)


def infonce_with_bank(teacher_emb, student_emb, teacher_bank, student_bank,
                      teacher_projector, student_projector, batch_indices,
                      n_negatives, contrast_temperature=1.0, generator=None):
    """Memory-bank InfoNCE: the teacher anchor is contrasted against the
    projected student bank and the student anchor against the projected
    teacher bank; the two directions are summed."""
    teacher_term = bank_contrast_term(
        teacher_emb, student_emb, student_bank, student_projector,
        batch_indices, n_negatives, contrast_temperature, generator)
    student_term = bank_contrast_term(
        student_emb, teacher_emb, teacher_bank, teacher_projector,
        batch_indices, n_negatives, contrast_temperature, generator)
    return _symmetric(teacher_term, student_term)


def graph_bank_variant(teacher_emb, student_emb, teacher_bank, student_bank,
                       batch_indices, n_negatives, contrast_temperature=1.0,
                       generator=None):
    """Like :py:func:`infonce_with_bank`, but the banks hold holistic
    embeddings of earlier batches, used without projection."""
    teacher_term = bank_contrast_term(
        teacher_emb, student_emb, student_bank, None,
        batch_indices, n_negatives, contrast_temperature, generator)
    student_term = bank_contrast_term(
        student_emb, teacher_emb, teacher_bank, None,
        batch_indices, n_negatives, contrast_temperature, generator)
    return _symmetric(teacher_term, student_term)


@torch.no_grad()
def bank_update(bank, batch_indices, new_features):
    """Momentum update of the rows in ``batch_indices``; all other rows stay
    untouched.

    ``entry <- normalize(m * entry + (1 - m) * normalize(new))``
    """
    _check_indices(batch_indices, bank.size)
    new_features = _vectors(new_features).detach().to(bank.entries.dtype)
    if not torch.isfinite(new_features).all():
        raise ValueError("new features contain non-finite values")

    order = torch.argsort(batch_indices)
    indices = batch_indices[order]
    new_unit = normalize_rows(new_features[order])[0]
    mixed = bank.momentum * bank.entries[indices] \
        + (1 - bank.momentum) * new_unit
    bank.entries.index_copy_(0, indices, normalize_rows(mixed)[0])
    return bank


def mse_alignment_loss(teacher_emb, student_emb):
    """Mean squared difference of the two embeddings."""
    t, s = _vectors(teacher_emb), _vectors(student_emb)
    if t.shape != s.shape:
        raise ValueError("embedding shapes differ: {} vs {}".format(
            tuple(t.shape), tuple(s.shape)))
    return ((t - s) ** 2).mean()


def jsd_in_batch_loss(teacher_emb, student_emb, contrast_temperature=1.0):
    """Jensen-Shannon contrastive objective over the batch (softplus form):
    ``mean(softplus(-s_pos)) + mean(softplus(s_neg))`` with the diagonal as
    positives and all off-diagonal pairs as negatives."""
    t = _unit_rows(teacher_emb, 'teacher_emb')
    s = _unit_rows(student_emb, 'student_emb')
    if t.shape != s.shape:
        raise ValueError("embedding shapes differ")
    b = t.shape[0]
    if b < 2:
        raise ValueError("JSD needs at least two instances for negatives")
    _check_temperature(contrast_temperature)

    scores = t @ s.T / contrast_temperature
    off_diagonal = ~torch.eye(b, dtype=torch.bool, device=scores.device)
    return F.softplus(-scores.diagonal()).mean() \
        + F.softplus(scores[off_diagonal]).mean()
