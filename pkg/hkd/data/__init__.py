from .data_set import DatasetSpec, Split, load_dataset, iterate_batches
from .file import read_cifar, read_image, list_image_folder
from .transfer import FeatureSet, TransferSplit, make_transfer_split

__all__ = [
    'DatasetSpec', 'Split', 'load_dataset', 'iterate_batches',
    'read_cifar', 'read_image', 'list_image_folder',
    'FeatureSet', 'TransferSplit', 'make_transfer_split'
]
