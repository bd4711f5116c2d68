import pytest
import torch

from hkd.config import DistillConfig
from hkd.data.data_set import DatasetSpec
from hkd.distill import pretrain_teacher


def tiny_dataset(**changes):
    settings = dict(
        name='synthetic-clusters', num_classes=4, image_size=8, channels=3,
        train_per_class=16, test_per_class=8, seed=0)
    settings.update(changes)
    return DatasetSpec(**settings)


def tiny_config(**changes):
    settings = dict(
        teacher_arch='small-convnet-T', student_arch='small-convnet-S',
        k=3, L=1, g=16, batch_size=16, n_negatives=32, epochs=2,
        teacher_epochs=10, precision='float64', seed=0)
    settings.update(changes)
    return DistillConfig(**settings)


@pytest.fixture
def generator():
    g = torch.Generator()
    g.manual_seed(20240501)
    return g


@pytest.fixture
def dataset():
    return tiny_dataset()


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture(scope='session')
def teacher_checkpoint(tmp_path_factory):
    """Teacher trained once for the whole session."""
    path = tmp_path_factory.mktemp('teacher')
    return pretrain_teacher(
        tiny_config(), tiny_dataset(train_per_class=32), path)


@pytest.fixture
def make_config():
    return tiny_config


@pytest.fixture
def make_dataset():
    return tiny_dataset


RESULTS_CSV = """\
Method,resnet32x4/resnet8x4,wrn40-2/wrn16-2,vgg13/vgg8,resnet50/mobilenetv2,resnet32x4/shufflenetv1
Teacher,79.42,79.42,74.64,79.34,79.34
Student,72.79,72.63,65.33,70.56,65.33
KD,73.55,75.38,68.08,73.76,67.83
CRD+KD,75.64,76.41,69.82,74.41,69.86
SSKD+KD,75.80,76.36,69.12,74.68,69.53
HKD,75.63,76.31,69.97,74.86,69.83
HKD+KD,76.13,76.92,70.48,74.88,70.72
"""


@pytest.fixture
def results_table(tmp_path):
    """Top-1 accuracies of published CIFAR-100 teacher/student pairs."""
    path = tmp_path / 'results.csv'
    path.write_text(RESULTS_CSV)
    return path
