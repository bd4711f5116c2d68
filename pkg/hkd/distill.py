"""
The distillation engine. Every step forwards the frozen teacher and the
student, builds one attributed context graph per network, encodes both
into holistic embeddings and minimizes

    ce + lambda_kd * kd + beta * hol

over the student weights and both encoders; the memory banks follow with a
momentum update afterwards.
"""

import json
import logging
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F

from .checkpoint import (
    save_checkpoint, load_checkpoint, network_entry, backbone_from_checkpoint,
    state_digest)
from .config import config_hash
from .contrastive import (
    MemoryBank, infonce_in_batch, infonce_with_bank, graph_bank_variant,
    bank_update, mse_alignment_loss, jsd_in_batch_loss,
    ContrastiveBatchResult)
from .data.data_set import load_dataset, iterate_batches, ordered_batches
from .encoder import build_encoder, normalize_rows
from .errors import ConfigurationError, NumericalFailure
from .graph import (
    PredictionBatch, softmax_with_temperature, build_attributed_graph)
from .models import build_backbone, freeze
from .seeds import derive_seed, make_generator
from .stats import accuracy

log = logging.getLogger(__name__)


def _log_probabilities(pred):
    if pred.logits is not None:
        return torch.log_softmax(pred.logits / pred.temperature, dim=1)
    return pred.soft_targets.log()


def vanilla_kd_loss(student_pred, teacher_pred):
    """Batch mean of ``KL(p_s || p_t)`` scaled by ``tau**2``.

    :param student_pred: :py:class:`PredictionBatch` of the student.
    :param teacher_pred: :py:class:`PredictionBatch` of the teacher at the
        same temperature.
    """
    if student_pred.soft_targets.shape != teacher_pred.soft_targets.shape:
        raise ValueError("prediction shapes differ: {} vs {}".format(
            tuple(student_pred.soft_targets.shape),
            tuple(teacher_pred.soft_targets.shape)))
    if student_pred.temperature != teacher_pred.temperature:
        raise ValueError("predictions use different temperatures")
    tau = student_pred.temperature
    log_ps = _log_probabilities(student_pred)
    log_pt = _log_probabilities(teacher_pred)
    # kl_div(input, target) = sum target * (log target - input)
    kl = F.kl_div(log_pt, log_ps, reduction='batchmean', log_target=True)
    return kl * tau**2


def total_loss(ce, kd, hol, lambda_kd, beta):
    if lambda_kd < 0 or beta < 0:
        raise ValueError("loss weights must be non-negative")
    return ce + lambda_kd * kd + beta * hol


def relational_reduction_loss(teacher_features, student_features):
    """Mean squared difference between the ``b x b`` cosine-similarity
    matrices of the two feature sets."""
    if teacher_features.shape[0] != student_features.shape[0]:
        raise ValueError(
            "feature batches differ in size ({} != {})".format(
                teacher_features.shape[0], student_features.shape[0]))
    t = normalize_rows(teacher_features)[0]
    s = normalize_rows(student_features)[0]
    return ((t @ t.T - s @ s.T) ** 2).mean()


@dataclass
class StepMetrics:
    epoch: int
    step: int
    ce: float
    kd: float
    hol: float
    total: float
    lr: float
    train_acc: float
    grad_norm_student: float
    grad_norm_teacher_encoder: float
    grad_norm_student_encoder: float
    pos_sim: Optional[float] = None
    neg_sim: Optional[float] = None
    mi_estimate: Optional[float] = None

    def to_record(self):
        return dict(kind='step', **asdict(self))


@dataclass
class TrainState:
    teacher: torch.nn.Module
    student: torch.nn.Module
    teacher_encoder: torch.nn.Module
    student_encoder: torch.nn.Module
    teacher_bank: MemoryBank
    student_bank: MemoryBank
    optimizer: torch.optim.Optimizer
    scheduler: object
    negatives: torch.Generator
    graph_rng: torch.Generator
    n_negatives: int
    channels: int = 3
    image_size: int = 32
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)

    @property
    def lr(self):
        return self.optimizer.param_groups[0]['lr']


def _optimizer(params, lr, milestones, config):
    optimizer = torch.optim.SGD(
        params, lr=lr, momentum=config.sgd_momentum,
        weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=milestones, gamma=config.lr_decay_rate)
    return optimizer, scheduler


def init_train_state(config, teacher, num_train, num_classes, channels=3,
                     image_size=32):
    """Fresh training state around a frozen ``teacher``."""
    dtype = config.dtype
    teacher = freeze(teacher.to(dtype).to(config.device))
    student = build_backbone(
        config.student_arch, num_classes,
        seed=derive_seed(config.seed, 'student_init'), channels=channels,
        dtype=dtype).to(config.device)

    encoder_rng = make_generator(config.seed, 'encoder_init')
    teacher_encoder = build_encoder(
        config.encoder_mode, teacher.feature_dim, config.g, config.L,
        encoder_rng, dtype).to(config.device)
    student_encoder = build_encoder(
        config.encoder_mode, student.feature_dim, config.g, config.L,
        encoder_rng, dtype).to(config.device)

    if config.objective == 'graph_bank':
        dims = (config.g, config.g)
    else:
        dims = (teacher.feature_dim, student.feature_dim)
    bank_rng = make_generator(config.seed, 'bank_init')
    teacher_bank = MemoryBank.random(
        num_train, dims[0], config.momentum, 'teacher', bank_rng, dtype)
    student_bank = MemoryBank.random(
        num_train, dims[1], config.momentum, 'student', bank_rng, dtype)

    n_negatives = min(config.n_negatives, num_train - 1)
    if n_negatives < config.n_negatives:
        log.info("n_negatives lowered from %d to %d (training set of %d)",
                 config.n_negatives, n_negatives, num_train)

    optimizer, scheduler = _optimizer(
        list(student.parameters()) + list(teacher_encoder.parameters())
        + list(student_encoder.parameters()),
        config.learning_rate(), config.milestones(), config)

    return TrainState(
        teacher, student, teacher_encoder, student_encoder,
        teacher_bank.to(config.device), student_bank.to(config.device),
        optimizer, scheduler,
        negatives=make_generator(config.seed, 'negatives'),
        graph_rng=make_generator(config.seed, 'ablation_graph'),
        n_negatives=n_negatives, channels=channels, image_size=image_size)


def _knn_source(logits, config):
    if config.knn_source == 'logits':
        return logits
    return softmax_with_temperature(logits, 1.0)


def build_graphs(config, teacher_out, student_out, graph_rng=None):
    """Teacher and student context graphs for one batch."""
    graphs = []
    for out in (teacher_out, student_out):
        graphs.append(build_attributed_graph(
            _knn_source(out.logits.detach(), config), out.features,
            config.k, config.graph_mode, config.knn_metric,
            config.edge_weighting, graph_rng))
    return graphs


def holistic_loss(state, config, teacher_out, student_out, batch_indices):
    """Holistic objective of one batch.

    :return: tuple ``(result, teacher_emb, student_emb)``; the embeddings are
        ``None`` for the relational objective, which works on raw features.
    """
    if config.objective == 'relational':
        loss = relational_reduction_loss(
            teacher_out.features, student_out.features)
        return ContrastiveBatchResult(loss, None, None), None, None

    g_t, g_s = build_graphs(config, teacher_out, student_out, state.graph_rng)
    h_t = state.teacher_encoder(g_t)
    h_s = state.student_encoder(g_s)

    if config.objective == 'infonce_batch':
        result = infonce_in_batch(h_t, h_s, config.tau_c)
    elif config.objective == 'infonce_bank':
        result = infonce_with_bank(
            h_t, h_s, state.teacher_bank, state.student_bank,
            list(state.teacher_encoder.hop_weights),
            list(state.student_encoder.hop_weights),
            batch_indices, state.n_negatives, config.tau_c, state.negatives)
    elif config.objective == 'graph_bank':
        result = graph_bank_variant(
            h_t, h_s, state.teacher_bank, state.student_bank,
            batch_indices, state.n_negatives, config.tau_c, state.negatives)
    elif config.objective == 'mse':
        result = ContrastiveBatchResult(
            mse_alignment_loss(h_t, h_s), None, None)
    elif config.objective == 'jsd':
        result = ContrastiveBatchResult(
            jsd_in_batch_loss(h_t, h_s, config.tau_c), None, None)
    else:
        raise ConfigurationError(
            "unknown objective '{}'".format(config.objective))
    return result, h_t, h_s


def _grad_norm(parameters):
    grads = [p.grad.detach().flatten() for p in parameters
             if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.cat(grads).norm())


def _similarity_summary(h_t, h_s):
    if h_t is None:
        return None, None
    with torch.no_grad():
        sim = h_t.vectors @ h_s.vectors.T
        b = sim.shape[0]
        pos = float(sim.diagonal().mean())
        neg = float((sim.sum() - sim.diagonal().sum()) / (b * (b - 1)))
    return pos, neg


def _numerical_failure(what, epoch, step, indices):
    message = "non-finite {} at epoch {}, step {}; batch indices {}".format(
        what, epoch, step, indices.tolist())
    log.error(message)
    raise NumericalFailure(message)


def train_step(state, batch, config):
    """One optimization step on ``batch = (indices, images, labels)``.

    :return: tuple ``(state, StepMetrics)``.
    :raises NumericalFailure: if the loss is not finite.
    """
    indices, images, labels = batch
    if images.shape[0] != config.batch_size:
        raise ValueError("batch of {} instances, expected {}".format(
            images.shape[0], config.batch_size))
    indices = indices.to(config.device)
    images = images.to(config.device)
    labels = labels.to(config.device)
    epoch = state.epoch + 1

    state.student.train()
    with torch.no_grad():
        teacher_out = state.teacher(images)
    student_out = state.student(images)
    if not (torch.isfinite(student_out.logits).all()
            and torch.isfinite(student_out.features).all()):
        _numerical_failure("student outputs", epoch, state.step + 1, indices)

    ce = F.cross_entropy(student_out.logits, labels)
    kd = vanilla_kd_loss(
        PredictionBatch.from_logits(student_out.logits, config.tau_kd),
        PredictionBatch.from_logits(teacher_out.logits, config.tau_kd))
    hol, h_t, h_s = holistic_loss(
        state, config, teacher_out, student_out, indices)
    loss = total_loss(ce, kd, hol.loss, config.lambda_kd, config.beta)

    if not torch.isfinite(loss):
        log.error("ce=%s, kd=%s, hol=%s", float(ce), float(kd),
                  float(hol.loss))
        _numerical_failure("loss", epoch, state.step + 1, indices)

    lr = state.lr
    state.optimizer.zero_grad()
    loss.backward()
    grad_norms = [
        _grad_norm(module.parameters()) for module in (
            state.student, state.teacher_encoder, state.student_encoder)]
    state.optimizer.step()

    if config.objective == 'graph_bank':
        bank_update(state.teacher_bank, indices, h_t)
        bank_update(state.student_bank, indices, h_s)
    else:
        bank_update(state.teacher_bank, indices, teacher_out.features)
        bank_update(state.student_bank, indices, student_out.features)

    state.step += 1
    pos, neg = _similarity_summary(h_t, h_s)
    # logged terms are recombined in python floats
    terms = float(ce), float(kd), float(hol.loss)
    metrics = StepMetrics(
        epoch=epoch, step=state.step,
        ce=terms[0], kd=terms[1], hol=terms[2],
        total=total_loss(*terms, config.lambda_kd, config.beta),
        lr=lr, train_acc=accuracy(student_out.logits.detach(), labels),
        grad_norm_student=grad_norms[0],
        grad_norm_teacher_encoder=grad_norms[1],
        grad_norm_student_encoder=grad_norms[2],
        pos_sim=pos, neg_sim=neg,
        mi_estimate=hol.mi_lower_bound_estimate)
    return state, metrics


def predict(model, split, device='cpu'):
    """Logits of ``model`` on every instance of ``split``, in order."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        logits = torch.cat([
            model(images.to(device)).logits.cpu()
            for images, _ in ordered_batches(split)])
    model.train(was_training)
    return logits


def evaluate_accuracy(model, split, device='cpu'):
    return accuracy(predict(model, split, device), split.labels)


class MetricsLog:
    """Append-only JSON-lines file."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, record):
        with self.path.open('a', encoding='utf-8') as f:
            f.write(json.dumps(record) + '\n')

    def read(self):
        if not self.path.exists():
            return []
        with self.path.open(encoding='utf-8') as f:
            return [json.loads(line) for line in f if line.strip()]

    def truncate_after(self, epoch):
        """Drop records of epochs later than ``epoch``."""
        kept = [r for r in self.read() if r['epoch'] <= epoch]
        with self.path.open('w', encoding='utf-8') as f:
            for record in kept:
                f.write(json.dumps(record) + '\n')


def _epoch_summary(epoch, records, lr, test_acc):
    def mean(key):
        return sum(r[key] for r in records) / len(records)

    return {
        'kind': 'epoch', 'epoch': epoch, 'steps': len(records),
        'ce': mean('ce'), 'kd': mean('kd'), 'hol': mean('hol'),
        'total': mean('total'), 'lr': lr,
        'train_acc': mean('train_acc'), 'test_acc': test_acc}


def checkpoint_payload(state, config, dataset, test_acc=None):
    return dict(
        networks={
            'teacher': network_entry(
                state.teacher, config.teacher_arch, state.channels,
                state.image_size),
            'student': network_entry(
                state.student, config.student_arch, state.channels,
                state.image_size)},
        encoders={
            'teacher': state.teacher_encoder.state_dict(),
            'student': state.student_encoder.state_dict()},
        banks={
            'teacher': state.teacher_bank.entries,
            'student': state.student_bank.entries},
        optimizer=state.optimizer.state_dict(),
        scheduler=state.scheduler.state_dict(),
        rng={'negatives': state.negatives.get_state(),
             'graph': state.graph_rng.get_state()},
        n_negatives=state.n_negatives,
        epoch=state.epoch, step=state.step,
        config=config.to_dict(), dataset=dataset.to_dict(),
        config_hash=config_hash(config, dataset),
        test_accuracy=test_acc)


def restore_train_state(state, container):
    """Load everything a ``distill`` checkpoint holds into ``state``."""
    state.student.load_state_dict(container['networks']['student']
                                  ['state_dict'])
    state.teacher_encoder.load_state_dict(container['encoders']['teacher'])
    state.student_encoder.load_state_dict(container['encoders']['student'])
    state.teacher_bank.entries.copy_(container['banks']['teacher'])
    state.student_bank.entries.copy_(container['banks']['student'])
    state.optimizer.load_state_dict(container['optimizer'])
    state.scheduler.load_state_dict(container['scheduler'])
    state.negatives.set_state(container['rng']['negatives'])
    state.graph_rng.set_state(container['rng']['graph'])
    state.n_negatives = container['n_negatives']
    state.epoch = container['epoch']
    state.step = container['step']
    return state


def load_teacher(path, config, dataset):
    """Frozen teacher from a ``teacher`` checkpoint.

    :raises ConfigurationError: if the checkpoint is missing or does not fit
        the configuration.
    """
    if path is None:
        raise ConfigurationError(
            "distillation needs a teacher checkpoint; run pretrain-teacher")
    container = load_checkpoint(path, kind='teacher')
    entry = container['networks']['teacher']
    if entry['arch'] != config.teacher_arch:
        raise ConfigurationError(
            "teacher checkpoint holds '{}', config asks for '{}'".format(
                entry['arch'], config.teacher_arch))
    if entry['num_classes'] != dataset.num_classes \
            or entry['channels'] != dataset.channels:
        raise ConfigurationError(
            "teacher checkpoint was trained for {} classes x {} channels, "
            "dataset has {} x {}".format(
                entry['num_classes'], entry['channels'],
                dataset.num_classes, dataset.channels))
    return freeze(backbone_from_checkpoint(container, 'teacher', config.dtype))


def train(config, dataset, teacher_checkpoint, output_dir, resume=None):
    """Distill the teacher stored in ``teacher_checkpoint`` into a fresh
    student for ``config.epochs`` epochs.

    Every step and epoch is appended to ``output_dir/metrics.jsonl``;
    ``checkpoint-epoch{NNN}.pt`` and ``checkpoint-last.pt`` are written after
    each epoch.

    :param dataset: :py:class:`DatasetSpec`.
    :param resume: optional ``distill`` checkpoint to continue from.
    :return: the final :py:class:`TrainState`.
    """

    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    teacher = load_teacher(teacher_checkpoint, config, dataset)
    train_split, test_split = load_dataset(dataset, config.dtype)
    if len(train_split) < config.batch_size:
        raise ConfigurationError(
            "batch size {} exceeds the {} training instances".format(
                config.batch_size, len(train_split)))

    state = init_train_state(
        config, teacher, len(train_split), dataset.num_classes,
        dataset.channels, dataset.image_size)
    metrics_log = MetricsLog(output_dir / 'metrics.jsonl')

    if resume is not None:
        container = load_checkpoint(resume, kind='distill')
        if container['config_hash'] != config_hash(config, dataset):
            raise ConfigurationError(
                "checkpoint {} belongs to a different configuration".format(
                    resume))
        restore_train_state(state, container)
        metrics_log.truncate_after(state.epoch)
        log.info("resumed from %s at epoch %d", resume, state.epoch)

    for epoch in range(state.epoch + 1, config.epochs + 1):
        lr = state.lr
        records = []
        for batch in iterate_batches(
                train_split, config.batch_size, config.seed, epoch):
            state, metrics = train_step(state, batch, config)
            record = metrics.to_record()
            log.debug("step %d: ce=%.4f kd=%.4f hol=%.4f total=%.4f",
                      metrics.step, metrics.ce, metrics.kd, metrics.hol,
                      metrics.total)
            metrics_log.append(record)
            records.append(record)
        state.scheduler.step()
        state.epoch = epoch

        test_acc = evaluate_accuracy(state.student, test_split, config.device)
        summary = _epoch_summary(epoch, records, lr, test_acc)
        metrics_log.append(summary)
        state.history.append(summary)
        log.info("epoch %d/%d: total=%.4f train_acc=%.2f test_acc=%.2f",
                 epoch, config.epochs, summary['total'],
                 summary['train_acc'], test_acc)

        payload = checkpoint_payload(state, config, dataset, test_acc)
        save_checkpoint(output_dir / 'checkpoint-epoch{:03d}.pt'.format(
            epoch), 'distill', **payload)
        save_checkpoint(output_dir / 'checkpoint-last.pt', 'distill',
                        **payload)

    return state


def fit_supervised(model, train_split, epochs, lr, milestones, config,
                   test_split=None, metrics_log=None):
    """Plain cross-entropy training with the distillation schedule; used
    for the teacher and as the reference student trainer.

    :return: list of per-epoch summaries.
    """
    optimizer, scheduler = _optimizer(
        model.parameters(), lr, milestones, config)
    history = []
    for epoch in range(1, epochs + 1):
        model.train()
        current_lr = optimizer.param_groups[0]['lr']
        losses, accs = [], []
        for _, images, labels in iterate_batches(
                train_split, config.batch_size, config.seed, epoch):
            images = images.to(config.device)
            labels = labels.to(config.device)
            logits = model(images).logits
            loss = F.cross_entropy(logits, labels)
            if not torch.isfinite(loss):
                raise NumericalFailure(
                    "non-finite loss in supervised epoch {}".format(epoch))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss))
            accs.append(accuracy(logits.detach(), labels))
        scheduler.step()

        summary = {
            'kind': 'epoch', 'epoch': epoch, 'steps': len(losses),
            'ce': sum(losses) / max(len(losses), 1), 'lr': current_lr,
            'train_acc': sum(accs) / max(len(accs), 1),
            'test_acc': None if test_split is None
            else evaluate_accuracy(model, test_split, config.device)}
        if metrics_log is not None:
            metrics_log.append(summary)
        history.append(summary)
        log.info("supervised epoch %d/%d: ce=%.4f train_acc=%.2f",
                 epoch, epochs, summary['ce'], summary['train_acc'])
    return history


def train_plain_student(config, dataset, output_dir=None):
    """Reference student trained with cross-entropy only, from the same
    initialization the distilled student starts from. With ``output_dir``
    the student is saved as a ``plain`` checkpoint ``student.pt``."""
    train_split, test_split = load_dataset(dataset, config.dtype)
    student = build_backbone(
        config.student_arch, dataset.num_classes,
        seed=derive_seed(config.seed, 'student_init'),
        channels=dataset.channels, dtype=config.dtype).to(config.device)
    metrics_log = None
    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        metrics_log = MetricsLog(Path(output_dir) / 'metrics.jsonl')
    history = fit_supervised(
        student, train_split, config.epochs, config.learning_rate(),
        config.milestones(), config, test_split, metrics_log)
    if output_dir is not None:
        save_checkpoint(
            Path(output_dir) / 'student.pt', 'plain',
            networks={'student': network_entry(
                student, config.student_arch, dataset.channels,
                dataset.image_size)},
            epoch=config.epochs, test_accuracy=history[-1]['test_acc'],
            config=config.to_dict(), dataset=dataset.to_dict(),
            config_hash=config_hash(config, dataset))
    return student, history


def pretrain_teacher(config, dataset, output_dir):
    """Train the teacher architecture with cross-entropy and save it as a
    frozen ``teacher`` checkpoint.

    :return: :py:class:`Path` of ``output_dir/teacher.pt``.
    """

    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    train_split, test_split = load_dataset(dataset, config.dtype)
    teacher = build_backbone(
        config.teacher_arch, dataset.num_classes,
        seed=derive_seed(config.seed, 'teacher_init'),
        channels=dataset.channels, dtype=config.dtype).to(config.device)

    lr = config.teacher_lr or config.learning_rate(config.teacher_arch)
    history = fit_supervised(
        teacher, train_split, config.teacher_epochs, lr,
        config.milestones(config.teacher_epochs), config, test_split,
        MetricsLog(output_dir / 'metrics.jsonl'))
    freeze(teacher)

    test_acc = history[-1]['test_acc']
    log.info("teacher %s reached %.2f%% test accuracy",
             config.teacher_arch, test_acc)
    return save_checkpoint(
        output_dir / 'teacher.pt', 'teacher',
        networks={'teacher': network_entry(
            teacher, config.teacher_arch, dataset.channels,
            dataset.image_size)},
        digest=state_digest(teacher.state_dict()),
        epoch=config.teacher_epochs, test_accuracy=test_acc,
        config=config.to_dict(), dataset=dataset.to_dict(),
        config_hash=config_hash(config, dataset))
