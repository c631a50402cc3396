"""ResNet-18/50/101 classifiers built from residual blocks.

Each block computes y = relu(F(x) + shortcut(x)) where F is a stack of
convolutions with batch normalization; the shortcut is the identity when
shapes match and a 1x1 projection otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, ShapeError

STAGE_BLOCKS = {18: (2, 2, 2, 2), 50: (3, 4, 6, 3), 101: (3, 4, 23, 3)}
BOTTLENECK_VARIANTS = (50, 101)


@dataclass(frozen=True)
class ResNetConfig:
    variant: int = 18
    input_channels: int = 1
    num_classes: int = 5

    def __post_init__(self):
        if self.variant not in STAGE_BLOCKS:
            raise ConfigError(f"unknown ResNet variant {self.variant}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.input_channels < 1:
            raise ConfigError("input_channels must be >= 1")

    @property
    def stage_blocks(self) -> tuple[int, ...]:
        return STAGE_BLOCKS[self.variant]

    @property
    def bottleneck(self) -> bool:
        return self.variant in BOTTLENECK_VARIANTS

    @property
    def embed_dim(self) -> int:
        return 512 * (4 if self.bottleneck else 1)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "input_channels": self.input_channels,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResNetConfig":
        return cls(**d)


def _conv_bn(in_ch: int, out_ch: int, kernel: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride, kernel // 2, bias=False),
        nn.BatchNorm2d(out_ch),
    )


class BasicBlock(nn.Module):
    """Two 3x3 conv-bn pairs; used by ResNet-18."""

    expansion = 1

    def __init__(self, in_ch: int, width: int, stride: int = 1):
        super().__init__()
        out_ch = width * self.expansion
        self.residual = nn.Sequential(
            _conv_bn(in_ch, width, 3, stride),
            nn.ReLU(inplace=True),
            _conv_bn(width, out_ch, 3),
        )
        self.shortcut = (
            nn.Identity()
            if stride == 1 and in_ch == out_ch
            else _conv_bn(in_ch, out_ch, 1, stride)
        )
        self.activation = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.activation(self.residual(x) + self.shortcut(x))


class BottleneckBlock(nn.Module):
    """1x1 reduce, 3x3, 1x1 expand (x4); used by ResNet-50/101."""

    expansion = 4

    def __init__(self, in_ch: int, width: int, stride: int = 1):
        super().__init__()
        out_ch = width * self.expansion
        self.residual = nn.Sequential(
            _conv_bn(in_ch, width, 1),
            nn.ReLU(inplace=True),
            _conv_bn(width, width, 3, stride),
            nn.ReLU(inplace=True),
            _conv_bn(width, out_ch, 1),
        )
        self.shortcut = (
            nn.Identity()
            if stride == 1 and in_ch == out_ch
            else _conv_bn(in_ch, out_ch, 1, stride)
        )
        self.activation = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.activation(self.residual(x) + self.shortcut(x))


class ResNet(nn.Module):
    def __init__(self, config: ResNetConfig):
        super().__init__()
        self.config = config
        block = BottleneckBlock if config.bottleneck else BasicBlock

        self.stem = nn.Sequential(
            nn.Conv2d(config.input_channels, 64, 7, 2, 3, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        stages = []
        in_ch = 64
        for stage_idx, n_blocks in enumerate(config.stage_blocks):
            width = 64 * 2**stage_idx
            blocks = []
            for b in range(n_blocks):
                stride = 2 if stage_idx > 0 and b == 0 else 1
                blocks.append(block(in_ch, width, stride))
                in_ch = width * block.expansion
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(config.embed_dim, config.num_classes)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Post-global-pool, pre-head features [batch x embed_dim]."""
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return self.pool(x).flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(x))


def _he_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)


def build_resnet(config: ResNetConfig, seed: int = 0) -> ResNet:
    """Construct and He-initialize a ResNet, deterministic per seed."""
    torch.manual_seed(seed)
    model = ResNet(config)
    _he_init(model)
    return model


def replace_head(model: ResNet, new_num_classes: int, seed: int = 0) -> ResNet:
    """Swap the classifier head in place; body parameters are untouched."""
    if new_num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    torch.manual_seed(seed)
    head = nn.Linear(model.config.embed_dim, new_num_classes)
    nn.init.kaiming_normal_(head.weight, nonlinearity="relu")
    nn.init.zeros_(head.bias)
    model.head = head
    model.config = ResNetConfig(
        model.config.variant, model.config.input_channels, new_num_classes
    )
    return model


def _check_batch(model: ResNet, batch: torch.Tensor) -> torch.Tensor:
    if batch.ndim != 4:
        raise ShapeError(f"expected [batch x C x H x W], got shape {tuple(batch.shape)}")
    if batch.shape[1] != model.config.input_channels:
        raise ShapeError(
            f"batch has {batch.shape[1]} channels, model expects "
            f"{model.config.input_channels}"
        )
    return batch.float()


def forward(model: ResNet, batch: torch.Tensor) -> torch.Tensor:
    """Inference-mode logits (batch norm in eval, no grad)."""
    batch = _check_batch(model, batch)
    if batch.shape[0] == 0:
        return torch.empty(0, model.config.num_classes)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        logits = model(batch)
    model.train(was_training)
    return logits


def extract_embedding(model: ResNet, batch: torch.Tensor) -> torch.Tensor:
    """Inference-mode embeddings [batch x embed_dim]."""
    batch = _check_batch(model, batch)
    if batch.shape[0] == 0:
        return torch.empty(0, model.config.embed_dim)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        emb = model.embed(batch)
    model.train(was_training)
    return emb
