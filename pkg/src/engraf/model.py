"""The multi-branch classifier with a grafted sub-network.

Layout: a shared trunk (stem plus all but the last two residual stages)
feeds up to three branches, each owning private copies of the last two
stages. The fine and coarse branches end in global average pooling and a
linear head each. The graft branch taps its mid-stage output into a chain
of graft blocks (3x3 conv preserving channels, batch norm, ReLU) ending in
adaptive max pooling and a coarse head, while its main path continues
through the final stage to a fine head. All branch feature vectors are
concatenated, in the fixed order [f1|f2|f3|f4], into the head z0.

Variants:
    resnet      trunk + one branch, single head z0 over fine classes
    two_branch  fine + coarse branches, heads z0, z1, z2
    graft       graft branch only, heads z0, z3, z4
    engraf      everything, heads z0..z4
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfigError, ShapeMismatchError
from .loss import VARIANT_HEADS

__all__ = [
    "EngrafConfig",
    "HeadLogits",
    "BranchOutputs",
    "EngrafNet",
    "build_model",
    "param_count",
    "DEPTH_PLANS",
    "BRANCH_NAMES",
]

# depth -> (block kind, blocks per stage)
DEPTH_PLANS = {
    18: ("basic", (2, 2, 2, 2)),
    50: ("bottleneck", (3, 4, 6, 3)),
    101: ("bottleneck", (3, 4, 23, 3)),
    152: ("bottleneck", (3, 8, 36, 3)),
}
_EXPANSION = {"basic": 1, "bottleneck": 4}
_DEFAULT_WIDTHS = (64, 128, 256, 512)

BRANCH_NAMES = ("fine", "coarse", "graft-main", "graft-sub")


@dataclass(frozen=True)
class EngrafConfig:
    """Architecture description; see module docstring for the wiring.

    stage_widths / blocks_per_stage override the standard ResNet stage plan
    for micro-scale models (both or neither; at least two stages). The
    trunk owns all stages except the last two, which belong to branches.
    """

    variant: str
    num_fine: int
    num_coarse: int
    backbone_depth: int = 18
    graft_size: int = 4
    hierarchy_depth: int = 1
    input_size: int = 32
    stem: str = "cifar"
    stage_widths: tuple[int, ...] | None = None
    blocks_per_stage: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.variant not in VARIANT_HEADS:
            raise InvalidConfigError(f"unknown variant {self.variant!r}")
        if self.backbone_depth not in DEPTH_PLANS:
            raise InvalidConfigError(f"backbone_depth must be one of {sorted(DEPTH_PLANS)}")
        if self.stem not in ("cifar", "imagenet"):
            raise InvalidConfigError(f"stem must be 'cifar' or 'imagenet', got {self.stem!r}")
        if self.hierarchy_depth != 1:
            raise InvalidConfigError("only hierarchy_depth == 1 is supported")
        if self.variant in ("graft", "engraf") and self.graft_size < 1:
            raise InvalidConfigError(f"variant {self.variant!r} needs graft_size >= 1")
        if not 1 <= self.num_coarse < self.num_fine:
            raise InvalidConfigError(
                f"need 1 <= num_coarse < num_fine, got {self.num_coarse}/{self.num_fine}")
        if (self.stage_widths is None) != (self.blocks_per_stage is None):
            raise InvalidConfigError("stage_widths and blocks_per_stage go together")
        if self.stage_widths is not None:
            object.__setattr__(self, "stage_widths", tuple(self.stage_widths))
            object.__setattr__(self, "blocks_per_stage", tuple(self.blocks_per_stage))
            if len(self.stage_widths) < 2:
                raise InvalidConfigError("need at least two stages")
            if len(self.stage_widths) != len(self.blocks_per_stage):
                raise InvalidConfigError("stage_widths and blocks_per_stage lengths differ")
            if any(w < 1 for w in self.stage_widths) or any(b < 1 for b in self.blocks_per_stage):
                raise InvalidConfigError("stage widths and block counts must be positive")

    @property
    def block_kind(self) -> str:
        return DEPTH_PLANS[self.backbone_depth][0]

    @property
    def expansion(self) -> int:
        return _EXPANSION[self.block_kind]

    @property
    def widths(self) -> tuple[int, ...]:
        return self.stage_widths if self.stage_widths is not None else _DEFAULT_WIDTHS

    @property
    def blocks(self) -> tuple[int, ...]:
        if self.blocks_per_stage is not None:
            return self.blocks_per_stage
        return DEPTH_PLANS[self.backbone_depth][1]

    @property
    def feature_dim(self) -> int:
        """Per-branch feature width after global pooling (f1/f2/f3)."""
        return self.widths[-1] * self.expansion

    @property
    def graft_dim(self) -> int:
        """Graft sub-network feature width (f4)."""
        return self.widths[-2] * self.expansion

    @property
    def heads(self) -> tuple[str, ...]:
        return VARIANT_HEADS[self.variant]

    @property
    def min_input_size(self) -> int:
        stem_stride = 1 if self.stem == "cifar" else 4
        return stem_stride * (2 ** (len(self.widths) - 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["stage_widths"] is not None:
            d["stage_widths"] = list(d["stage_widths"])
            d["blocks_per_stage"] = list(d["blocks_per_stage"])
        return d

    @staticmethod
    def from_dict(d: dict) -> "EngrafConfig":
        d = dict(d)
        if d.get("stage_widths") is not None:
            d["stage_widths"] = tuple(d["stage_widths"])
        if d.get("blocks_per_stage") is not None:
            d["blocks_per_stage"] = tuple(d["blocks_per_stage"])
        return EngrafConfig(**d)


@dataclass
class HeadLogits:
    """Logit matrices per head; heads absent from the variant are None."""

    z0: torch.Tensor | None = None
    z1: torch.Tensor | None = None
    z2: torch.Tensor | None = None
    z3: torch.Tensor | None = None
    z4: torch.Tensor | None = None

    def present(self) -> dict:
        return {k: v for k, v in
                (("z0", self.z0), ("z1", self.z1), ("z2", self.z2),
                 ("z3", self.z3), ("z4", self.z4)) if v is not None}


@dataclass
class BranchOutputs:
    """Pooled branch features plus retained pre-pool activation maps."""

    f1: torch.Tensor | None = None  # fine branch, feature_dim
    f2: torch.Tensor | None = None  # coarse branch, feature_dim
    f3: torch.Tensor | None = None  # graft branch main path, feature_dim
    f4: torch.Tensor | None = None  # graft sub-network, graft_dim
    activations: dict = field(default_factory=dict)  # branch name -> (B,C,h,w)

    def concat(self) -> torch.Tensor:
        parts = [f for f in (self.f1, self.f2, self.f3, self.f4) if f is not None]
        return torch.cat(parts, dim=1)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_ch: int, width: int, stride: int = 1):
        super().__init__()
        out_ch = width * self.expansion
        self.conv1 = nn.Conv2d(in_ch, width, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.downsample is None else self.downsample(x)
        return F.relu(out + skip)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch: int, width: int, stride: int = 1):
        super().__init__()
        out_ch = width * self.expansion
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        skip = x if self.downsample is None else self.downsample(x)
        return F.relu(out + skip)


class GraftBlock(nn.Module):
    """3x3 conv preserving channel count and spatial size, then BN and ReLU."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, 1, 1, bias=False)
        self.bn = nn.BatchNorm2d(channels)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


def _make_stage(block_cls, in_ch: int, width: int, blocks: int, stride: int) -> nn.Sequential:
    layers = [block_cls(in_ch, width, stride)]
    ch = width * block_cls.expansion
    for _ in range(blocks - 1):
        layers.append(block_cls(ch, width, 1))
    return nn.Sequential(*layers)


class EngrafNet(nn.Module):
    """See module docstring. Build via :func:`build_model` for seeded init."""

    def __init__(self, config: EngrafConfig):
        super().__init__()
        self.config = config
        block_cls = BasicBlock if config.block_kind == "basic" else Bottleneck
        widths, blocks = config.widths, config.blocks
        exp = config.expansion

        stem_width = widths[0]
        if config.stem == "cifar":
            self.stem = nn.Sequential(
                nn.Conv2d(3, stem_width, 3, 1, 1, bias=False),
                nn.BatchNorm2d(stem_width),
                nn.ReLU(inplace=True),
            )
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(3, stem_width, 7, 2, 3, bias=False),
                nn.BatchNorm2d(stem_width),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(3, 2, 1),
            )

        # trunk: all stages except the last two (may be empty)
        trunk = []
        ch = stem_width
        for i in range(len(widths) - 2):
            trunk.append(_make_stage(block_cls, ch, widths[i], blocks[i],
                                     stride=1 if i == 0 else 2))
            ch = widths[i] * exp
        self.trunk = nn.Sequential(*trunk)
        self._trunk_out = ch
        self._branch_widths = widths[-2:]
        self._branch_blocks = blocks[-2:]
        self._branch_strides = (1 if len(widths) == 2 else 2, 2)

        def branch_stages():
            s3 = _make_stage(block_cls, self._trunk_out, self._branch_widths[0],
                             self._branch_blocks[0], self._branch_strides[0])
            s4 = _make_stage(block_cls, self._branch_widths[0] * exp,
                             self._branch_widths[1], self._branch_blocks[1],
                             self._branch_strides[1])
            return s3, s4

        v = config.variant
        d_f, d_g = config.feature_dim, config.graft_dim
        concat_dim = 0
        if v in ("resnet", "two_branch", "engraf"):
            self.fine_branch = nn.Sequential(*branch_stages())
            concat_dim += d_f
        if v in ("two_branch", "engraf"):
            self.coarse_branch = nn.Sequential(*branch_stages())
            concat_dim += d_f
        if v in ("graft", "engraf"):
            s3, s4 = branch_stages()
            self.graft_pre = s3
            self.graft_post = s4
            self.graft_blocks = nn.Sequential(
                *[GraftBlock(d_g) for _ in range(config.graft_size)])
            concat_dim += d_f + d_g

        self.fc0 = nn.Linear(concat_dim, config.num_fine)
        if v in ("two_branch", "engraf"):
            self.fc1 = nn.Linear(d_f, config.num_fine)
            self.fc2 = nn.Linear(d_f, config.num_coarse)
        if v in ("graft", "engraf"):
            self.fc3 = nn.Linear(d_f, config.num_fine)
            self.fc4 = nn.Linear(d_g, config.num_coarse)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4:
            raise ShapeMismatchError(f"expected (B, 3, H, W), got shape {tuple(x.shape)}")
        if x.shape[1] != 3:
            raise ShapeMismatchError(f"expected 3 input channels, got {x.shape[1]}")
        lo = self.config.min_input_size
        if x.shape[2] < lo or x.shape[3] < lo:
            raise ShapeMismatchError(
                f"spatial size {x.shape[2]}x{x.shape[3]} below minimum {lo}")

    def forward(self, x: torch.Tensor, return_features: bool = False):
        self._check_input(x)
        t = self.trunk(self.stem(x))
        feats = BranchOutputs()
        v = self.config.variant
        logits = HeadLogits()

        if v in ("resnet", "two_branch", "engraf"):
            a = self.fine_branch(t)
            feats.activations["fine"] = a
            feats.f1 = a.mean(dim=(2, 3))
        if v in ("two_branch", "engraf"):
            a = self.coarse_branch(t)
            feats.activations["coarse"] = a
            feats.f2 = a.mean(dim=(2, 3))
            logits.z1 = self.fc1(feats.f1)
            logits.z2 = self.fc2(feats.f2)
        if v in ("graft", "engraf"):
            mid = self.graft_pre(t)
            sub = self.graft_blocks(mid)
            feats.activations["graft-sub"] = sub
            feats.f4 = F.adaptive_max_pool2d(sub, 1).flatten(1)
            a = self.graft_post(mid)
            feats.activations["graft-main"] = a
            feats.f3 = a.mean(dim=(2, 3))
            logits.z3 = self.fc3(feats.f3)
            logits.z4 = self.fc4(feats.f4)

        logits.z0 = self.fc0(feats.concat())
        if return_features:
            return logits, feats
        return logits


def build_model(config: EngrafConfig, init_seed: int) -> EngrafNet:
    """Construct and initialize a model deterministically from the seed.

    Convolutions get fan-in-scaled normal init, linear layers fan-in-scaled
    uniform init, batch norm starts at identity (scale 1, shift 0).
    """
    model = EngrafNet(config)
    gen = torch.Generator().manual_seed(init_seed & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        for _, mod in model.named_modules():
            if isinstance(mod, nn.Conv2d):
                fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
                mod.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
            elif isinstance(mod, nn.Linear):
                bound = 1.0 / math.sqrt(mod.in_features)
                mod.weight.uniform_(-bound, bound, generator=gen)
                mod.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(mod, nn.BatchNorm2d):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
                mod.running_mean.zero_()
                mod.running_var.fill_(1.0)
                mod.num_batches_tracked.zero_()
    return model


def param_count(model: nn.Module) -> int:
    """Exact number of scalar learnable parameters."""
    return sum(p.numel() for p in model.parameters())
