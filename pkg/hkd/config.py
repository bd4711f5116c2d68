"""
Experiment configuration: the :py:class:`DistillConfig` record, YAML
loading with flag overrides, the configuration hash and the run manifest.

A configuration file is a flat YAML mapping of :py:class:`DistillConfig`
fields with an optional nested ``dataset`` mapping of
:py:class:`hkd.data.DatasetSpec` fields::

    teacher_arch: resnet-32x4-like
    student_arch: resnet-8x4-like
    k: 8
    beta: 1.0
    dataset:
      name: synthetic-clusters
      num_classes: 10
"""

import hashlib
import json
import logging
from dataclasses import dataclass, asdict, fields, replace
from pathlib import Path
from typing import Optional, Tuple

import torch
import yaml

from . import __version__
from .contrastive import OBJECTIVES
from .data.data_set import DatasetSpec, DATASET_NAMES
from .encoder import ENCODER_MODES
from .errors import ConfigurationError
from .graph import GRAPH_MODES, KNN_METRICS, EDGE_WEIGHTINGS
from .models import ARCHITECTURES

log = logging.getLogger(__name__)

FULL_EPOCHS = 240
FULL_MILESTONES = (150, 180, 210)
PRECISIONS = {'float32': torch.float32, 'float64': torch.float64}


@dataclass(frozen=True)
class DistillConfig:
    """Everything that determines a distillation run except the data.

    ``lr`` and ``lr_decay_epochs`` left at ``None`` resolve to the
    published schedule: 0.05 (0.01 for lightweight students), decayed by
    ``lr_decay_rate`` at epochs 150/180/210 of 240, scaled to ``epochs``."""
    teacher_arch: str = 'resnet-32x4-like'
    student_arch: str = 'resnet-8x4-like'
    k: int = 8
    L: int = 1
    g: int = 128
    beta: float = 1.0
    lambda_kd: float = 1.0
    tau_kd: float = 4.0
    tau_c: float = 0.1
    momentum: float = 0.5
    n_negatives: int = 4096
    batch_size: int = 64
    lr: Optional[float] = None
    lr_decay_rate: float = 0.1
    lr_decay_epochs: Optional[Tuple[int, ...]] = None
    epochs: int = 30
    teacher_epochs: int = 30
    teacher_lr: Optional[float] = None
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    graph_mode: str = 'knn'
    encoder_mode: str = 'gnn'
    objective: str = 'infonce_bank'
    knn_metric: str = 'cosine'
    knn_source: str = 'soft_targets'
    edge_weighting: str = 'binary'
    seed: int = 0
    precision: str = 'float32'
    device: str = 'cpu'

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def learning_rate(self, arch=None):
        """Base learning rate for ``arch`` (the student by default)."""
        if self.lr is not None:
            return self.lr
        return 0.01 if ARCHITECTURES[arch or self.student_arch].lightweight \
            else 0.05

    def milestones(self, epochs=None):
        """Epochs at which the learning rate decays."""
        if self.lr_decay_epochs is not None:
            return list(self.lr_decay_epochs)
        epochs = self.epochs if epochs is None else epochs
        scaled = {max(1, round(m * epochs / FULL_EPOCHS))
                  for m in FULL_MILESTONES}
        return sorted(scaled)

    def validate(self):
        """Check every field; raise :py:class:`ConfigurationError` listing
        all violations."""
        problems = []

        def need(ok, name, message):
            if not ok:
                problems.append("{}: {} (got {!r})".format(
                    name, message, getattr(self, name)))

        for name in ('teacher_arch', 'student_arch'):
            need(getattr(self, name) in ARCHITECTURES, name,
                 "unknown architecture")
        need(self.batch_size >= 2, 'batch_size', "must be at least 2")
        need(1 <= self.k < self.batch_size, 'k', "must satisfy 1 <= k < b")
        need(0 <= self.L <= 2, 'L', "must lie in [0, 2]")
        need(self.g >= 1, 'g', "must be positive")
        need(self.beta >= 0, 'beta', "must be non-negative")
        need(self.lambda_kd >= 0, 'lambda_kd', "must be non-negative")
        need(self.tau_kd > 0, 'tau_kd', "must be positive")
        need(self.tau_c > 0, 'tau_c', "must be positive")
        need(0 <= self.momentum <= 1, 'momentum', "must lie in [0, 1]")
        need(self.n_negatives >= 0, 'n_negatives', "must be non-negative")
        need(self.epochs >= 1, 'epochs', "must be at least 1")
        need(self.teacher_epochs >= 1, 'teacher_epochs',
             "must be at least 1")
        need(self.lr is None or self.lr > 0, 'lr', "must be positive")
        need(self.teacher_lr is None or self.teacher_lr > 0, 'teacher_lr',
             "must be positive")
        need(0 < self.lr_decay_rate <= 1, 'lr_decay_rate',
             "must lie in (0, 1]")
        need(self.graph_mode in GRAPH_MODES, 'graph_mode',
             "expected one of {}".format(GRAPH_MODES))
        need(self.encoder_mode in ENCODER_MODES, 'encoder_mode',
             "expected one of {}".format(ENCODER_MODES))
        need(self.objective in OBJECTIVES, 'objective',
             "expected one of {}".format(OBJECTIVES))
        need(self.knn_metric in KNN_METRICS, 'knn_metric',
             "expected one of {}".format(KNN_METRICS))
        need(self.knn_source in ('soft_targets', 'logits'), 'knn_source',
             "expected 'soft_targets' or 'logits'")
        need(self.edge_weighting in EDGE_WEIGHTINGS, 'edge_weighting',
             "expected one of {}".format(EDGE_WEIGHTINGS))
        need(self.precision in PRECISIONS, 'precision',
             "expected one of {}".format(tuple(PRECISIONS)))

        if problems:
            raise ConfigurationError(
                "invalid configuration:\n  " + "\n  ".join(problems))
        return self

    def to_dict(self):
        d = asdict(self)
        if d['lr_decay_epochs'] is not None:
            d['lr_decay_epochs'] = list(d['lr_decay_epochs'])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(
                "unknown configuration keys: {}".format(', '.join(unknown)))
        d = dict(d)
        if d.get('lr_decay_epochs') is not None:
            d['lr_decay_epochs'] = tuple(int(e) for e in d['lr_decay_epochs'])
        return cls(**d)

    def replace(self, **changes):
        return replace(self, **changes)


def read_config_file(path):
    """Read a YAML configuration file.

    :return: tuple ``(config_values, dataset_values)`` of plain dicts.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError("config file {} not found".format(path))
    with path.open(encoding='utf-8') as f:
        try:
            values = yaml.safe_load(f) or {}
        except yaml.YAMLError as err:
            raise ConfigurationError(
                "cannot parse {}: {}".format(path, err)) from None
    if not isinstance(values, dict):
        raise ConfigurationError("{} must hold a mapping".format(path))
    dataset = values.pop('dataset', None) or {}
    return values, dataset


def merge_overrides(file_values, flag_values, section='config'):
    """Flags take precedence over file values; every conflict is logged."""
    merged = dict(file_values)
    for key, value in flag_values.items():
        if value is None:
            continue
        if key in file_values and file_values[key] != value:
            log.info("%s.%s: flag value %r overrides file value %r",
                     section, key, value, file_values[key])
        merged[key] = value
    return merged


def build_dataset_spec(values):
    known = {f.name for f in fields(DatasetSpec)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(
            "unknown dataset keys: {}".format(', '.join(unknown)))
    spec = DatasetSpec.from_dict(values)
    if spec.name not in DATASET_NAMES:
        raise ConfigurationError(
            "dataset.name: expected one of {} (got {!r})".format(
                DATASET_NAMES, spec.name))
    return spec


def resolve(config_file=None, config_flags=None, dataset_flags=None):
    """Combine a config file with flag overrides into validated records.

    :return: tuple ``(DistillConfig, DatasetSpec)``.
    """
    file_config, file_dataset = ({}, {}) if config_file is None \
        else read_config_file(config_file)
    config_values = merge_overrides(file_config, config_flags or {})
    dataset_values = merge_overrides(
        file_dataset, dataset_flags or {}, 'dataset')
    try:
        config = DistillConfig.from_dict(config_values)
    except TypeError as err:
        raise ConfigurationError(str(err)) from None
    return config.validate(), build_dataset_spec(dataset_values)


def config_hash(config, dataset):
    """SHA-256 of every result-affecting field."""
    canonical = json.dumps(
        {'config': config.to_dict(), 'dataset': dataset.to_dict()},
        sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class ExperimentManifest:
    config: DistillConfig
    dataset: DatasetSpec
    output_dir: str
    config_hash: str
    tool_version: str = __version__
    command: str = 'distill'

    @classmethod
    def create(cls, config, dataset, output_dir, command='distill'):
        return cls(config, dataset, str(output_dir),
                   config_hash(config, dataset), __version__, command)

    def write(self, path=None):
        path = Path(path or Path(self.output_dir) / 'manifest.yaml')
        record = {
            'command': self.command,
            'tool_version': self.tool_version,
            'config_hash': self.config_hash,
            'output_dir': self.output_dir,
            'config': self.config.to_dict(),
            'dataset': self.dataset.to_dict()}
        with path.open('w', encoding='utf-8') as f:
            yaml.safe_dump(record, f, sort_keys=False)
        return path

    @classmethod
    def read(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / 'manifest.yaml'
        if not path.exists():
            raise ConfigurationError("no manifest at {}".format(path))
        with path.open(encoding='utf-8') as f:
            record = yaml.safe_load(f)
        manifest = cls(
            DistillConfig.from_dict(record['config']),
            DatasetSpec.from_dict(record['dataset']),
            record['output_dir'], record['config_hash'],
            record.get('tool_version', __version__),
            record.get('command', 'distill'))
        if config_hash(manifest.config, manifest.dataset) \
                != manifest.config_hash:
            raise ConfigurationError(
                "manifest {} does not match its config hash".format(path))
        return manifest
