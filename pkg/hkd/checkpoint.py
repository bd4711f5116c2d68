"""
Versioned checkpoint container.

A checkpoint is a dictionary written with :py:func:`torch.save`::

    {
        'format': 'hkd-checkpoint', 'version': 1,
        'kind': 'teacher' | 'distill' | 'plain',
        'networks': {<role>: {'arch', 'num_classes', 'channels',
                              'image_size', 'state_dict'}},
        'config', 'config_hash', 'dataset', 'epoch', 'step',
        ... training state for 'distill' checkpoints ...
    }
"""

import hashlib
import logging
from pathlib import Path

import torch

from .errors import ConfigurationError
from .models import build_backbone

log = logging.getLogger(__name__)

FORMAT = 'hkd-checkpoint'
VERSION = 1


def network_entry(model, arch, channels, image_size):
    return {
        'arch': arch,
        'num_classes': model.num_classes,
        'channels': channels,
        'image_size': image_size,
        'state_dict': model.state_dict()}


def save_checkpoint(path, kind, **payload):
    """Write a checkpoint of the given ``kind`` to ``path``.

    :return: :py:class:`Path` of the written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    container = {'format': FORMAT, 'version': VERSION, 'kind': kind}
    container.update(payload)
    # atomic replace
    tmp = path.with_suffix(path.suffix + '.tmp')
    torch.save(container, tmp)
    tmp.replace(path)
    log.debug("saved %s checkpoint to %s", kind, path)
    return path


def load_checkpoint(path, kind=None):
    """Read and validate a checkpoint.

    :raises ConfigurationError: if the file is missing, not an HKD
        checkpoint, of an unsupported version or of the wrong kind.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError("checkpoint {} does not exist".format(path))
    container = torch.load(path, map_location='cpu', weights_only=False)
    if not isinstance(container, dict) or container.get('format') != FORMAT:
        raise ConfigurationError("{} is not an HKD checkpoint".format(path))
    if container.get('version') != VERSION:
        raise ConfigurationError(
            "{} has checkpoint version {}, expected {}".format(
                path, container.get('version'), VERSION))
    if kind is not None and container.get('kind') != kind:
        raise ConfigurationError(
            "{} holds a '{}' checkpoint, expected '{}'".format(
                path, container.get('kind'), kind))
    return container


def backbone_from_checkpoint(container, role, dtype=torch.float32):
    """Rebuild the backbone stored under ``role`` with its weights."""
    try:
        entry = container['networks'][role]
    except KeyError:
        raise ConfigurationError(
            "checkpoint holds no '{}' network".format(role)) from None
    model = build_backbone(entry['arch'], entry['num_classes'],
                           channels=entry['channels'], dtype=dtype)
    try:
        model.load_state_dict(entry['state_dict'])
    except RuntimeError as err:
        raise ConfigurationError(
            "checkpoint weights do not fit architecture '{}': {}".format(
                entry['arch'], err)) from None
    return model.to(dtype)


def state_digest(state_dict):
    """SHA-256 over the names, shapes, dtypes and bytes of every tensor of a
    state dict, in key order."""
    sha = hashlib.sha256()
    for key in sorted(state_dict):
        value = state_dict[key]
        sha.update(key.encode())
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().contiguous()
            sha.update(str((tuple(value.shape), value.dtype)).encode())
            sha.update(value.reshape(-1).view(torch.uint8).numpy().tobytes())
        else:
            sha.update(repr(value).encode())
    return sha.hexdigest()
