import pytest
import torch

from hkd.errors import ConfigurationError
from hkd.models import (
    ARCHITECTURES, build_backbone, count_parameters, freeze)


@pytest.mark.parametrize('name', list(ARCHITECTURES))
def test_backbone_shapes(name):
    model = build_backbone(name, 7, seed=0)
    out = model(torch.randn(2, 3, 16, 16))
    assert out.features.shape == (2, ARCHITECTURES[name].feature_dim)
    assert out.logits.shape == (2, 7)
    assert model.feature_dim == ARCHITECTURES[name].feature_dim
    assert count_parameters(model) <= 2_000_000


def test_backbone_on_grey_images():
    model = build_backbone('small-convnet-S', 3, channels=1,
                           dtype=torch.float64)
    out = model(torch.randn(4, 1, 8, 8, dtype=torch.float64))
    assert out.logits.shape == (4, 3)
    assert out.logits.dtype == torch.float64


def test_backbone_init_is_seeded():
    a = build_backbone('resnet-8x4-like', 10, seed=3)
    b = build_backbone('resnet-8x4-like', 10, seed=3)
    c = build_backbone('resnet-8x4-like', 10, seed=4)
    for (_, x), (_, y) in zip(a.state_dict().items(),
                              b.state_dict().items()):
        assert torch.equal(x, y)
    assert not torch.equal(a.classifier.weight, c.classifier.weight)


def test_backbone_leaves_global_rng_alone():
    torch.manual_seed(11)
    expected = torch.rand(3)
    torch.manual_seed(11)
    build_backbone('small-convnet-T', 10, seed=5)
    assert torch.equal(torch.rand(3), expected)


def test_num_classes_only_changes_the_classifier():
    small = build_backbone('vgg-8-like', 10, seed=1)
    large = build_backbone('vgg-8-like', 100, seed=1)
    assert large.classifier.out_features == 100
    body = dict(small.body.state_dict())
    for key, value in large.body.state_dict().items():
        assert torch.equal(value, body[key])


def test_unknown_architecture():
    with pytest.raises(ConfigurationError, match='unknown architecture'):
        build_backbone('resnet-1000', 10)


def test_freeze():
    model = freeze(build_backbone('small-convnet-S', 4))
    assert not model.training
    assert not any(p.requires_grad for p in model.parameters())


def test_lightweight_flag():
    assert ARCHITECTURES['mobilenet-v2-like'].lightweight
    assert not ARCHITECTURES['resnet-8x4-like'].lightweight
