"""
Implements serialisers for classes being used in the HKD workflows.
"""

from pathlib import Path

from noodles import serial

from .config import DistillConfig
from .data.data_set import DatasetSpec


class SerDistillConfig(serial.Serialiser):
    """Serialise a :py:class:`DistillConfig` as its field dictionary."""
    def __init__(self):
        super().__init__(DistillConfig)

    def encode(self, obj, make_rec):
        return make_rec(obj.to_dict())

    def decode(self, cls, data):
        return cls.from_dict(data)


class SerDatasetSpec(serial.Serialiser):
    def __init__(self):
        super().__init__(DatasetSpec)

    def encode(self, obj, make_rec):
        return make_rec(obj.to_dict())

    def decode(self, cls, data):
        return cls.from_dict(data)


class SerPath(serial.Serialiser):
    """Serialise a `pathlib.Path` as a string."""
    def __init__(self):
        super().__init__('<pathlib.Path>')

    def encode(self, obj, make_rec):
        return make_rec(str(obj))

    def decode(self, cls, data):
        return Path(data)


def path_hook(obj):
    """Concrete path classes differ per platform, so paths are caught with
    a hook instead of by type."""
    if isinstance(obj, Path):
        return '<pathlib.Path>'
    else:
        return None


def registry():
    return serial.Registry(
        parent=serial.pickle() + serial.base(),
        types={
            DistillConfig: SerDistillConfig(),
            DatasetSpec: SerDatasetSpec()
        },
        hooks={
            '<pathlib.Path>': SerPath()
        },
        hook_fn=path_hook)
