"""Small deterministic torch models for demos and protocol tests."""

import torch
from torch import nn


def tiny_conv(seed: int = 0) -> nn.Module:
    """8x8 single-channel conv net: conv (4 channels) -> relu -> pooled
    linear head with 3 classes."""
    torch.manual_seed(seed)
    model = nn.Sequential()
    model.add_module("conv", nn.Conv2d(1, 4, kernel_size=3, padding=1))
    model.add_module("act", nn.ReLU())
    model.add_module("pool", nn.AdaptiveAvgPool2d(1))
    model.add_module("flatten", nn.Flatten())
    model.add_module("fc", nn.Linear(4, 3))
    return model


def identity_linear(dim: int = 4) -> nn.Module:
    """Linear layer frozen to the identity map."""
    model = nn.Sequential()
    layer = nn.Linear(dim, dim, bias=True)
    with torch.no_grad():
        layer.weight.copy_(torch.eye(dim))
        layer.bias.zero_()
    model.add_module("fc", layer)
    return model
