"""
Datasets: a deterministic synthetic image set, a CIFAR subset and image
folders, all channel-normalized and delivered as in-memory tensors.
"""

import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset

from ..errors import DataValidationError
from ..seeds import derive_seed, make_generator
from .file import read_cifar, list_image_folder, read_image

log = logging.getLogger(__name__)

DATASET_NAMES = ('synthetic-clusters', 'cifar-like-subset', 'custom-dir')


@dataclass(frozen=True)
class DatasetSpec:
    """Description of a dataset.

    ``train_per_class``/``test_per_class`` cap the number of images per
    class (``None`` keeps all of them for on-disk data). ``mean`` and
    ``std`` are per-channel normalization statistics; when absent they are
    computed from the training split. ``noise`` and ``signal`` shape the
    synthetic clusters only."""
    name: str = 'synthetic-clusters'
    num_classes: int = 10
    image_size: int = 16
    channels: int = 3
    train_per_class: Optional[int] = 100
    test_per_class: Optional[int] = 20
    mean: Optional[Tuple[float, ...]] = None
    std: Optional[Tuple[float, ...]] = None
    seed: int = 0
    root: Optional[str] = None
    noise: float = 1.0
    signal: float = 1.0

    def to_dict(self):
        d = asdict(self)
        for key in ('mean', 'std'):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ('mean', 'std'):
            if d.get(key) is not None:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


@dataclass
class Split:
    """Images ``[n, C, H, W]`` and labels ``[n]`` of one split."""
    images: torch.Tensor
    labels: torch.Tensor
    name: str = 'train'
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return self.labels.shape[0]

    def to(self, dtype):
        return Split(self.images.to(dtype), self.labels, self.name,
                     self.stats)


def class_templates(spec, generator):
    """One pattern per class: a coloured Gaussian blob whose position
    rotates with the class index, plus a fixed random texture."""
    size = spec.image_size
    axis = torch.linspace(-1.0, 1.0, size, dtype=torch.float64)
    yy, xx = torch.meshgrid(axis, axis, indexing='ij')
    templates = []
    for c in range(spec.num_classes):
        angle = 2 * math.pi * c / spec.num_classes
        cx, cy = 0.5 * math.cos(angle), 0.5 * math.sin(angle)
        blob = torch.exp(-((xx - cx)**2 + (yy - cy)**2) / (2 * 0.3**2))
        colour = 0.2 + 0.8 * torch.rand(
            spec.channels, generator=generator, dtype=torch.float64)
        texture = 0.3 * torch.randn(
            spec.channels, size, size, generator=generator,
            dtype=torch.float64)
        templates.append(colour[:, None, None] * blob + texture)
    return spec.signal * torch.stack(templates)


def _sample_clusters(spec, templates, per_class, generator):
    labels = torch.arange(spec.num_classes).repeat_interleave(per_class)
    noise = torch.randn(
        (labels.shape[0],) + tuple(templates.shape[1:]),
        generator=generator, dtype=torch.float64)
    return templates[labels] + spec.noise * noise, labels


def synthetic_clusters(spec):
    """Linearly separable image clusters, generated from ``spec.seed``."""
    generator = make_generator(spec.seed, 'synthetic')
    templates = class_templates(spec, generator)
    train = _sample_clusters(spec, templates, spec.train_per_class,
                             generator)
    test = _sample_clusters(spec, templates, spec.test_per_class, generator)
    return train, test


def _take_per_class(images, labels, per_class, num_classes, generator):
    check_labels(labels, num_classes, 'source')
    order = torch.randperm(labels.shape[0], generator=generator)
    if per_class is None:
        return images[order], labels[order]
    keep, counts = [], [0] * num_classes
    for i in order.tolist():
        label = int(labels[i])
        if counts[label] < per_class:
            counts[label] += 1
            keep.append(i)
    keep = torch.tensor(keep, dtype=torch.long)
    return images[keep], labels[keep]


def resize_images(images, size):
    if images.shape[-1] == size and images.shape[-2] == size:
        return images
    return F.interpolate(images, size=(size, size), mode='bilinear',
                         align_corners=False)


def cifar_subset(spec):
    if spec.root is None:
        raise DataValidationError("cifar-like-subset needs a 'root' folder")
    x_train, y_train, x_test, y_test = read_cifar(spec.root)
    generator = make_generator(spec.seed, 'subset')
    train = _take_per_class(
        torch.from_numpy(x_train).double() / 255.0,
        torch.from_numpy(y_train), spec.train_per_class, spec.num_classes,
        generator)
    test = _take_per_class(
        torch.from_numpy(x_test).double() / 255.0,
        torch.from_numpy(y_test), spec.test_per_class, spec.num_classes,
        generator)
    return ((resize_images(train[0], spec.image_size), train[1]),
            (resize_images(test[0], spec.image_size), test[1]))


def _read_folder(spec, split, per_class, generator):
    items, class_names = list_image_folder(spec.root, split)
    if len(class_names) > spec.num_classes:
        raise DataValidationError(
            "{} holds {} classes, spec allows {}".format(
                split, len(class_names), spec.num_classes))
    images = torch.stack([
        resize_images(torch.from_numpy(read_image(path))[None],
                spec.image_size)[0]
        for path, _ in items])
    labels = torch.tensor([label for _, label in items], dtype=torch.long)
    if images.shape[1] != spec.channels:
        raise DataValidationError(
            "images in {} have {} channels, expected {}".format(
                split, images.shape[1], spec.channels))
    return _take_per_class(images, labels, per_class, spec.num_classes,
                           generator), {path for path, _ in items}


def image_folders(spec):
    if spec.root is None:
        raise DataValidationError("custom-dir needs a 'root' folder")
    generator = make_generator(spec.seed, 'subset')
    train, train_paths = _read_folder(
        spec, 'train', spec.train_per_class, generator)
    test, test_paths = _read_folder(
        spec, 'test', spec.test_per_class, generator)
    if train_paths & test_paths:
        raise DataValidationError("train and test share image files")
    return train, test


def channel_stats(images):
    """Per-channel mean and (population) standard deviation."""
    images = images.double()
    return (images.mean(dim=(0, 2, 3)),
            images.std(dim=(0, 2, 3), unbiased=False))


def check_labels(labels, num_classes, split):
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataValidationError(
            "{} labels must lie in [0, {}), found range [{}, {}]".format(
                split, num_classes, int(labels.min()), int(labels.max())))


def load_dataset(spec, dtype=torch.float32):
    """Load (or generate) the dataset described by ``spec``.

    The training split is shuffled deterministically under ``spec.seed``;
    both splits are normalized with the training statistics unless the spec
    carries its own.

    :return: tuple ``(train, test)`` of :py:class:`Split`.
    """
    if spec.name == 'synthetic-clusters':
        (x_train, y_train), (x_test, y_test) = synthetic_clusters(spec)
    elif spec.name == 'cifar-like-subset':
        (x_train, y_train), (x_test, y_test) = cifar_subset(spec)
    elif spec.name == 'custom-dir':
        (x_train, y_train), (x_test, y_test) = image_folders(spec)
    else:
        raise DataValidationError(
            "unknown dataset '{}', expected one of {}".format(
                spec.name, DATASET_NAMES))

    check_labels(y_train, spec.num_classes, 'train')
    check_labels(y_test, spec.num_classes, 'test')

    order = torch.randperm(
        y_train.shape[0], generator=make_generator(spec.seed, 'order'))
    x_train, y_train = x_train[order], y_train[order]

    if spec.mean is not None and spec.std is not None:
        mean = torch.tensor(spec.mean, dtype=torch.float64)
        std = torch.tensor(spec.std, dtype=torch.float64)
    else:
        mean, std = channel_stats(x_train)
    std = torch.where(std > 0, std, torch.ones_like(std))

    def normalize(x):
        return ((x.double() - mean[:, None, None]) / std[:, None, None]) \
            .to(dtype)

    stats = {'mean': mean.tolist(), 'std': std.tolist()}
    log.info("loaded %s: %d train / %d test images of %s",
             spec.name, len(y_train), len(y_test),
             tuple(x_train.shape[1:]))
    return (Split(normalize(x_train), y_train, 'train', stats),
            Split(normalize(x_test), y_test, 'test', stats))


def iterate_batches(split, batch_size, seed, epoch):
    """Shuffled mini-batches ``(indices, images, labels)`` covering the split
    once; the last partial batch is dropped. The order depends only on
    ``(seed, epoch)``."""
    dataset = TensorDataset(
        torch.arange(len(split)), split.images, split.labels)
    generator = torch.Generator()
    generator.manual_seed(derive_seed(seed, 'epoch-{}'.format(epoch)))
    return DataLoader(dataset, batch_size=batch_size, shuffle=True,
                      drop_last=True, generator=generator)


def ordered_batches(split, batch_size=256):
    """Unshuffled batches over the whole split, for evaluation."""
    for start in range(0, len(split), batch_size):
        yield (split.images[start:start + batch_size],
               split.labels[start:start + batch_size])


def label_histogram(labels, num_classes):
    return np.bincount(labels.cpu().numpy(), minlength=num_classes)
