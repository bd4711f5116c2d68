"""
Readers for image data stored on disk.

Two layouts are understood:

* the python version of CIFAR-10 (``data_batch_1`` … ``data_batch_5``,
  ``test_batch``) or CIFAR-100 (``train``, ``test``), as unpacked from the
  official archives;
* a directory tree ``<root>/<split>/<class name>/<image>.png`` where class
  names are sorted alphabetically to obtain label indices.
"""

import pickle
from pathlib import Path

import numpy as np
from matplotlib import image as mpimg

from ..errors import DataValidationError

IMAGE_SUFFIXES = ('.png', '.jpg', '.jpeg')


def _unpickle(path):
    if not path.exists():
        raise FileNotFoundError(str(path))
    with path.open('rb') as f:
        return pickle.load(f, encoding='bytes')


def _cifar_arrays(batches, label_key):
    images = np.concatenate([b[b'data'] for b in batches])
    labels = np.concatenate([np.asarray(b[label_key]) for b in batches])
    return images.reshape(-1, 3, 32, 32), labels.astype('int64')


def read_cifar(root):
    """Read CIFAR python batches from ``root``.

    :return: tuple ``(train_images, train_labels, test_images, test_labels)``
        with uint8 images of shape ``[n, 3, 32, 32]``.
    """
    root = Path(root)
    if (root / 'train').exists():
        train = [_unpickle(root / 'train')]
        test = [_unpickle(root / 'test')]
        label_key = b'fine_labels'
    else:
        train = [_unpickle(root / 'data_batch_{}'.format(i))
                 for i in range(1, 6)]
        test = [_unpickle(root / 'test_batch')]
        label_key = b'labels'
    return _cifar_arrays(train, label_key) + _cifar_arrays(test, label_key)


def read_image(path):
    """Read an image as float array ``[C, H, W]`` with values in [0, 1];
    an alpha channel is dropped, grey-scale images get one channel."""
    image = mpimg.imread(str(path))
    if image.dtype == np.uint8:
        image = image / 255.0
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[2] == 4:
        image = image[:, :, :3]
    return np.ascontiguousarray(image.transpose(2, 0, 1), dtype='float64')


def list_image_folder(root, split):
    """List ``(path, label)`` pairs of ``<root>/<split>/<class>/*``.

    :return: tuple ``(items, class_names)``.
    """
    folder = Path(root) / split
    if not folder.is_dir():
        raise FileNotFoundError(str(folder))

    class_names = sorted(p.name for p in folder.iterdir() if p.is_dir())
    if not class_names:
        raise DataValidationError(
            "no class directories found in {}".format(folder))

    items = []
    for label, name in enumerate(class_names):
        for path in sorted((folder / name).iterdir()):
            if path.suffix.lower() in IMAGE_SUFFIXES:
                items.append((path, label))
    return items, class_names
