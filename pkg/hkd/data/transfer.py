"""
Frozen-representation datasets for transfer experiments: images of a target
dataset are resized to the source input size and passed through a trained
student.
"""

import logging
from dataclasses import dataclass

import torch

from ..checkpoint import load_checkpoint, backbone_from_checkpoint
from ..errors import ConfigurationError
from ..models import freeze
from .data_set import load_dataset, ordered_batches, resize_images

log = logging.getLogger(__name__)


@dataclass
class FeatureSet:
    features: torch.Tensor
    labels: torch.Tensor

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class TransferSplit:
    train: FeatureSet
    test: FeatureSet
    num_classes: int
    feature_dim: int


def extract_features(model, split, batch_size=256):
    """Penultimate features of ``model`` for every instance of ``split``."""
    model.eval()
    with torch.no_grad():
        features = torch.cat([
            model.features(images)
            for images, _ in ordered_batches(split, batch_size)])
    return FeatureSet(features, split.labels.clone())


def make_transfer_split(spec_source, spec_target, checkpoint_path,
                        role='student', dtype=torch.float64):
    """Frozen student features of the ``spec_target`` images.

    :param spec_source: dataset the network was trained on; fixes the input
        size and channel count.
    :param checkpoint_path: ``distill`` or ``teacher`` checkpoint.
    :raises ConfigurationError: if the checkpoint does not fit the source
        dataset or the target images.
    """
    container = load_checkpoint(checkpoint_path)
    model = freeze(backbone_from_checkpoint(container, role, dtype))
    entry = container['networks'][role]
    if entry['channels'] != spec_source.channels \
            or entry['image_size'] != spec_source.image_size:
        raise ConfigurationError(
            "checkpoint network takes {}x{}px images with {} channels, "
            "source dataset has {}x{}px with {}".format(
                entry['image_size'], entry['image_size'], entry['channels'],
                spec_source.image_size, spec_source.image_size,
                spec_source.channels))
    if spec_target.channels != spec_source.channels:
        raise ConfigurationError(
            "target images have {} channels, the network expects {}".format(
                spec_target.channels, spec_source.channels))

    train, test = load_dataset(spec_target, dtype)
    size = spec_source.image_size
    for split in (train, test):
        split.images = resize_images(split.images, size)

    result = TransferSplit(
        extract_features(model, train), extract_features(model, test),
        spec_target.num_classes, model.feature_dim)
    log.info("extracted %d/%d frozen %s features of width %d",
             len(result.train), len(result.test), role, result.feature_dim)
    return result
