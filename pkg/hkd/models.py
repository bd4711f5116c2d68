"""
Desk-scale backbone zoo. Every backbone returns the pooled penultimate
features ``f`` and the logits ``z`` of its linear classifier.

Registry names map onto the published architectures they stand in for:

==================== ===================== ================================
name                 stands in for          shape
==================== ===================== ================================
small-convnet-T      generic teacher        3 conv layers, d = 128
small-convnet-S      generic student        2 conv layers, d = 32
resnet-32x4-like     ResNet32x4             basic blocks (3, 3, 3), d = 128
resnet-8x4-like      ResNet8x4              basic blocks (1, 1, 1), d = 128
vgg-8-like           VGG8                   5 conv layers, d = 256
mobilenet-v2-like    MobileNetV2            inverted residuals, d = 128
==================== ===================== ================================
"""

from collections import namedtuple
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError
from .seeds import seeded_global_rng

BackboneOutput = namedtuple('BackboneOutput', ['features', 'logits'])


def conv_bn(c_in, c_out, stride=1, kernel_size=3, groups=1, relu=True):
    layers = [
        nn.Conv2d(c_in, c_out, kernel_size, stride, kernel_size // 2,
                  groups=groups, bias=False),
        nn.BatchNorm2d(c_out)]
    if relu:
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class Backbone(nn.Module):
    """Feature extractor ``body`` followed by global average pooling and a
    linear ``classifier``."""

    def __init__(self, body, feature_dim, num_classes):
        super().__init__()
        self.body = body
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.classifier = nn.Linear(feature_dim, num_classes)

    def features(self, x):
        return torch.flatten(self.pool(self.body(x)), 1)

    def forward(self, x):
        f = self.features(x)
        return BackboneOutput(f, self.classifier(f))


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = conv_bn(c_in, c_out, stride)
        self.conv2 = conv_bn(c_out, c_out, relu=False)
        if stride != 1 or c_in != c_out:
            self.shortcut = conv_bn(c_in, c_out, stride, 1, relu=False)
        else:
            self.shortcut = nn.Identity()
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.relu(self.conv2(self.conv1(x)) + self.shortcut(x))


class InvertedResidual(nn.Module):
    def __init__(self, c_in, c_out, stride=1, expand=6):
        super().__init__()
        hidden = c_in * expand
        self.residual = stride == 1 and c_in == c_out
        self.block = nn.Sequential(
            conv_bn(c_in, hidden, kernel_size=1),
            conv_bn(hidden, hidden, stride, groups=hidden),
            conv_bn(hidden, c_out, kernel_size=1, relu=False))

    def forward(self, x):
        out = self.block(x)
        return x + out if self.residual else out


def small_convnet(widths, channels=3):
    layers, c_in = [], channels
    for i, width in enumerate(widths):
        layers.append(conv_bn(c_in, width, stride=1 if i == 0 else 2))
        c_in = width
    return nn.Sequential(*layers), c_in


def resnet(blocks, widths=(32, 64, 128), channels=3):
    layers, c_in = [conv_bn(channels, widths[0])], widths[0]
    for stage, (n, width) in enumerate(zip(blocks, widths)):
        for i in range(n):
            stride = 2 if stage > 0 and i == 0 else 1
            layers.append(BasicBlock(c_in, width, stride))
            c_in = width
    return nn.Sequential(*layers), c_in


def vgg(cfg=(32, 'M', 64, 'M', 128, 128, 'M', 256), channels=3):
    layers, c_in = [], channels
    for v in cfg:
        if v == 'M':
            layers.append(nn.MaxPool2d(2, ceil_mode=True))
        else:
            layers.append(conv_bn(c_in, v))
            c_in = v
    return nn.Sequential(*layers), c_in


def mobilenet_v2(channels=3):
    settings = [(16, 1), (24, 2), (24, 1), (32, 2), (32, 1), (64, 1)]
    layers, c_in = [conv_bn(channels, 16)], 16
    for c_out, stride in settings:
        layers.append(InvertedResidual(c_in, c_out, stride))
        c_in = c_out
    layers.append(conv_bn(c_in, 128, kernel_size=1))
    return nn.Sequential(*layers), 128


@dataclass(frozen=True)
class Architecture:
    make_body: object
    feature_dim: int
    full_scale_name: str
    lightweight: bool = False


ARCHITECTURES = {
    'small-convnet-T': Architecture(
        lambda c: small_convnet((32, 64, 128), c), 128, 'generic teacher'),
    'small-convnet-S': Architecture(
        lambda c: small_convnet((16, 32), c), 32, 'generic student'),
    'resnet-32x4-like': Architecture(
        lambda c: resnet((3, 3, 3), channels=c), 128, 'ResNet32x4'),
    'resnet-8x4-like': Architecture(
        lambda c: resnet((1, 1, 1), channels=c), 128, 'ResNet8x4'),
    'vgg-8-like': Architecture(
        lambda c: vgg(channels=c), 256, 'VGG8'),
    'mobilenet-v2-like': Architecture(
        mobilenet_v2, 128, 'MobileNetV2', lightweight=True),
}


def get_architecture(name):
    try:
        return ARCHITECTURES[name]
    except KeyError:
        raise ConfigurationError(
            "unknown architecture '{}', choose from: {}".format(
                name, ', '.join(ARCHITECTURES))) from None


def build_backbone(name, num_classes, seed=0, channels=3,
                   dtype=torch.float32):
    """Instantiate a registered backbone with weights drawn under ``seed``;
    the global torch RNG is left untouched."""
    arch = get_architecture(name)
    with seeded_global_rng(seed):
        body, feature_dim = arch.make_body(channels)
        assert feature_dim == arch.feature_dim
        model = Backbone(body, feature_dim, num_classes)
    return model.to(dtype)


def freeze(model):
    """Put ``model`` in evaluation mode and stop all gradients."""
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())
