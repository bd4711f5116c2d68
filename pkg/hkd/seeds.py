"""
Named random sub-streams. One master seed fans out to independent streams
(data, initialization, negative sampling, ...) so that changing how one
component draws random numbers leaves every other component untouched.
"""

import hashlib
import threading
from contextlib import contextmanager

import torch

STREAMS = (
    'data', 'teacher_init', 'student_init', 'encoder_init', 'bank_init',
    'negatives', 'ablation_graph', 'probe')

_GLOBAL_RNG_LOCK = threading.Lock()


def derive_seed(seed, stream):
    """Deterministic 63-bit seed for ``stream`` under master ``seed``."""
    digest = hashlib.sha256('{}:{}'.format(seed, stream).encode()).digest()
    return int.from_bytes(digest[:8], 'little') & (2**63 - 1)


def make_generator(seed, stream=None):
    """CPU :py:class:`torch.Generator` seeded with ``seed`` itself, or with
    the derived seed of ``stream`` when one is named."""
    generator = torch.Generator()
    generator.manual_seed(
        seed if stream is None else derive_seed(seed, stream))
    return generator


@contextmanager
def seeded_global_rng(seed):
    """Run a block with torch's global CPU generator seeded to ``seed``; the
    previous state is restored afterwards. Blocks running in concurrent
    threads are serialized."""
    with _GLOBAL_RNG_LOCK, torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield
