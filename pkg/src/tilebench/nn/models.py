"""Architecture specs and the classifiers assembled from :mod:`blocks`."""

from __future__ import annotations

import copy
import enum
import json
from dataclasses import dataclass, field
from typing import Any

import torch
from torch import nn

from ..errors import UnsupportedSpec
from . import tensor as T
from .blocks import (BasicBlock, Bottleneck, CMTStage, CMTStem, InvertedResidual,
                     MBConv, MobileViTBlock, PatchEmbed, Sequencer2DBlock, SwinStage, ViTEncoder)
from .layers import BatchNorm2d, ClassifierHead, Conv2d, ConvNormAct, LayerNorm, Linear


class Family(str, enum.Enum):
    RESNET18 = "ResNet18"
    RESNET50 = "ResNet50"
    MOBILENETV2 = "MobileNetV2"
    EFFICIENTNET = "EfficientNet"
    VIT = "ViT"
    SWINT = "SwinT"
    MOBILEVIT = "MobileViT"
    CMT = "CMT"
    SEQUENCER2D = "Sequencer2D"


class Scale(str, enum.Enum):
    TOY = "toy"
    REFERENCE = "reference"


@dataclass(frozen=True)
class ArchitectureSpec:
    family: Family
    scale: Scale
    num_classes: int = 2
    input_px: int = 224
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "scale", Scale(self.scale))
        if self.num_classes < 2:
            raise UnsupportedSpec("num_classes must be >= 2")

    @property
    def name(self) -> str:
        return f"{self.family.value}-{self.scale.value}"

    def to_dict(self) -> dict:
        return {"family": self.family.value, "scale": self.scale.value,
                "num_classes": self.num_classes, "input_px": self.input_px,
                "params": copy.deepcopy(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        try:
            return cls(Family(d["family"]), Scale(d["scale"]), int(d.get("num_classes", 2)),
                       int(d.get("input_px", 224)), _lists(d.get("params", {})))
        except (KeyError, ValueError) as exc:
            raise UnsupportedSpec(f"bad architecture spec: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _lists(obj):
    """JSON round-trips tuples as lists; normalise nested sequences to lists."""
    if isinstance(obj, dict):
        return {k: _lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_lists(v) for v in obj]
    return obj


# Reference stage tables.  Each is count-only.
REFERENCE_PARAMS: dict[Family, dict[str, Any]] = {
    Family.RESNET18: dict(block="basic", stem=64, widths=[64, 128, 256, 512], depths=[2, 2, 2, 2]),
    Family.RESNET50: dict(block="bottleneck", stem=64, widths=[64, 128, 256, 512], depths=[3, 4, 6, 3]),
    Family.MOBILENETV2: dict(
        stem=32, last=1280,
        # expand ratio t, out channels c, repeats n, first stride s
        stages=[[1, 16, 1, 1], [6, 24, 2, 2], [6, 32, 3, 2], [6, 64, 4, 2],
                [6, 96, 3, 1], [6, 160, 3, 2], [6, 320, 1, 1]]),
    Family.EFFICIENTNET: dict(
        stem=32, last=1280, se_ratio=0.25,
        # expand, kernel, stride, out channels, repeats (B0)
        stages=[[1, 3, 1, 16, 1], [6, 3, 2, 24, 2], [6, 5, 2, 40, 2], [6, 3, 2, 80, 3],
                [6, 5, 1, 112, 3], [6, 5, 2, 192, 4], [6, 3, 1, 320, 1]]),
    Family.VIT: dict(patch=16, dim=768, depth=12, heads=12, mlp=3072),
    Family.SWINT: dict(patch=4, dim=96, depths=[2, 2, 18, 2], heads=[3, 6, 12, 24], window=7, mlp_ratio=4.0),
    Family.MOBILEVIT: dict(
        stem=16, last=640,
        # per stage: inverted residual blocks [out, stride, expand], then an
        # optional transformer block [d_model, depth, patch, heads, mlp_ratio]
        stages=[
            dict(mv2=[[32, 1, 4]]),
            dict(mv2=[[64, 2, 4], [64, 1, 4], [64, 1, 4]]),
            dict(mv2=[[96, 2, 4]], vit=[144, 2, 2, 4, 2.0]),
            dict(mv2=[[128, 2, 4]], vit=[192, 4, 2, 4, 2.0]),
            dict(mv2=[[160, 2, 4]], vit=[240, 3, 2, 4, 2.0]),
        ]),
    Family.CMT: dict(stem=32, dims=[64, 128, 256, 512], depths=[3, 3, 16, 3], heads=[1, 2, 4, 8],
                     reductions=[8, 4, 2, 1], mlp_ratio=4.0, last=1280),
    Family.SEQUENCER2D: dict(patches=[7, 2, 1, 1], dims=[192, 384, 384, 384], hidden=[48, 96, 96, 96],
                             depths=[4, 3, 8, 3], mlp_ratio=3.0),
}

# Toy tables: two stages, widths <= 64, depths <= 2.
TOY_PARAMS: dict[Family, dict[str, Any]] = {
    Family.RESNET18: dict(block="basic", stem=16, widths=[16, 32], depths=[2, 2]),
    Family.RESNET50: dict(block="bottleneck", stem=16, widths=[8, 16], depths=[1, 1]),
    Family.MOBILENETV2: dict(stem=16, last=64, stages=[[1, 16, 1, 2], [4, 32, 2, 2]]),
    Family.EFFICIENTNET: dict(stem=16, last=64, se_ratio=0.25, stages=[[1, 3, 2, 16, 1], [4, 5, 2, 32, 2]]),
    Family.VIT: dict(patch=16, dim=32, depth=2, heads=2, mlp=64),
    Family.SWINT: dict(patch=8, dim=16, depths=[2, 2], heads=[1, 2], window=7, mlp_ratio=2.0),
    Family.MOBILEVIT: dict(
        stem=8, last=64,
        stages=[dict(mv2=[[16, 2, 2], [16, 2, 2]]),
                dict(mv2=[[32, 2, 2]], vit=[32, 2, 2, 2, 2.0])]),
    Family.CMT: dict(stem=8, dims=[16, 32], depths=[1, 1], heads=[1, 2], reductions=[8, 4],
                     mlp_ratio=2.0, last=64),
    Family.SEQUENCER2D: dict(patches=[14, 2], dims=[32, 64], hidden=[16, 32], depths=[1, 1], mlp_ratio=2.0),
}


def toy_spec(family: Family | str, num_classes: int = 2) -> ArchitectureSpec:
    family = Family(family)
    px = 256 if family == Family.MOBILEVIT else 224
    return ArchitectureSpec(family, Scale.TOY, num_classes, px, copy.deepcopy(TOY_PARAMS[family]))


def reference_spec(family: Family | str, num_classes: int = 2) -> ArchitectureSpec:
    family = Family(family)
    px = 256 if family == Family.MOBILEVIT else 224
    return ArchitectureSpec(family, Scale.REFERENCE, num_classes, px, copy.deepcopy(REFERENCE_PARAMS[family]))


# --- classifiers -----------------------------------------------------------------

class ResNet(nn.Module):
    def __init__(self, p: dict, num_classes: int):
        super().__init__()
        block = {"basic": BasicBlock, "bottleneck": Bottleneck}[p["block"]]
        self.stem = ConvNormAct(3, p["stem"], 7, 2, act="relu")
        layers, c = [], p["stem"]
        for i, (w, d) in enumerate(zip(p["widths"], p["depths"])):
            for j in range(d):
                layers.append(block(c, w, 2 if (i > 0 and j == 0) else 1))
                c = w * block.expansion
        self.layers = nn.Sequential(*layers)
        self.head = ClassifierHead(c, num_classes)

    def forward(self, x):
        x = T.maxpool(self.stem(x), 3, 2, 1)
        return self.head(self.layers(x))


class MobileNetV2(nn.Module):
    def __init__(self, p: dict, num_classes: int):
        super().__init__()
        self.stem = ConvNormAct(3, p["stem"], 3, 2, act="relu6")
        blocks, c = [], p["stem"]
        for t, out, n, s in p["stages"]:
            for j in range(n):
                blocks.append(InvertedResidual(c, out, s if j == 0 else 1, t))
                c = out
        self.blocks = nn.Sequential(*blocks)
        self.last = ConvNormAct(c, p["last"], 1, act="relu6")
        self.head = ClassifierHead(p["last"], num_classes)

    def forward(self, x):
        return self.head(self.last(self.blocks(self.stem(x))))


class EfficientNet(nn.Module):
    def __init__(self, p: dict, num_classes: int):
        super().__init__()
        self.stem = ConvNormAct(3, p["stem"], 3, 2, act="silu")
        blocks, c = [], p["stem"]
        for e, k, s, out, n in p["stages"]:
            for j in range(n):
                blocks.append(MBConv(c, out, s if j == 0 else 1, e, k, p["se_ratio"]))
                c = out
        self.blocks = nn.Sequential(*blocks)
        self.last = ConvNormAct(c, p["last"], 1, act="silu")
        self.head = ClassifierHead(p["last"], num_classes)

    def forward(self, x):
        return self.head(self.last(self.blocks(self.stem(x))))


class ViT(nn.Module):
    def __init__(self, p: dict, num_classes: int, input_px: int):
        super().__init__()
        self.encoder = ViTEncoder(input_px, p["patch"], p["dim"], p["depth"], p["heads"], p["mlp"])
        self.head = Linear(p["dim"], num_classes)

    def forward(self, x):
        return self.head(self.encoder(x)[:, 0])


class Swin(nn.Module):
    def __init__(self, p: dict, num_classes: int, input_px: int):
        super().__init__()
        self.patch_embed = PatchEmbed(3, p["dim"], p["patch"], norm=True)
        res, dim, n = input_px // p["patch"], p["dim"], len(p["depths"])
        stages = []
        for i, (d, h) in enumerate(zip(p["depths"], p["heads"])):
            stages.append(SwinStage(dim, d, h, p["window"], res, p["mlp_ratio"], merge=i < n - 1))
            if i < n - 1:
                dim, res = dim * 2, res // 2
        self.stages = nn.Sequential(*stages)
        self.norm = LayerNorm(dim)
        self.head = Linear(dim, num_classes)

    def forward(self, x):
        x = T.permute(self.patch_embed(x), 0, 2, 3, 1)
        x = self.norm(self.stages(x))
        return self.head(x.mean(dim=(1, 2)))


class MobileViT(nn.Module):
    def __init__(self, p: dict, num_classes: int):
        super().__init__()
        self.stem = ConvNormAct(3, p["stem"], 3, 2, act="silu")
        mods, c = [], p["stem"]
        for stage in p["stages"]:
            for out, stride, expand in stage["mv2"]:
                mods.append(InvertedResidual(c, out, stride, expand, act="silu"))
                c = out
            if "vit" in stage:
                d, depth, patch, heads, ratio = stage["vit"]
                mods.append(MobileViTBlock(c, d, depth, patch, heads, ratio))
        self.stages = nn.Sequential(*mods)
        self.last = ConvNormAct(c, p["last"], 1, act="silu")
        self.head = ClassifierHead(p["last"], num_classes)

    def forward(self, x):
        return self.head(self.last(self.stages(self.stem(x))))


class CMT(nn.Module):
    def __init__(self, p: dict, num_classes: int, input_px: int):
        super().__init__()
        self.stem = CMTStem(p["stem"])
        res = input_px // self.stem.downsample
        stages, c = [], p["stem"]
        for dim, depth, heads, r in zip(p["dims"], p["depths"], p["heads"], p["reductions"]):
            res //= 2
            stages.append(CMTStage(c, dim, depth, heads, r, res, p["mlp_ratio"]))
            c = dim
        self.stages = nn.Sequential(*stages)
        self.fc = Conv2d(c, p["last"], 1, bias=True)
        self.fc_bn = BatchNorm2d(p["last"])
        self.head = ClassifierHead(p["last"], num_classes)

    def forward(self, x):
        x = self.stages(self.stem(x))
        return self.head(T.silu(self.fc_bn(self.fc(x))))


class Sequencer2D(nn.Module):
    def __init__(self, p: dict, num_classes: int):
        super().__init__()
        embeds, stages, c = [], [], 3
        for patch, dim, hidden, depth in zip(p["patches"], p["dims"], p["hidden"], p["depths"]):
            embeds.append(PatchEmbed(c, dim, patch))
            stages.append(nn.Sequential(*(Sequencer2DBlock(dim, hidden, p["mlp_ratio"]) for _ in range(depth))))
            c = dim
        self.embeds = nn.ModuleList(embeds)
        self.stages = nn.ModuleList(stages)
        self.norm = LayerNorm(c, 1e-6)
        self.head = Linear(c, num_classes)

    def forward(self, x):
        for embed, stage in zip(self.embeds, self.stages):
            x = T.permute(stage(T.permute(embed(x), 0, 2, 3, 1)), 0, 3, 1, 2)
        x = self.norm(T.permute(x, 0, 2, 3, 1))
        return self.head(x.mean(dim=(1, 2)))


def _instantiate(spec: ArchitectureSpec) -> nn.Module:
    p, k = spec.params, spec.num_classes
    f = spec.family
    try:
        if f in (Family.RESNET18, Family.RESNET50):
            return ResNet(p, k)
        if f == Family.MOBILENETV2:
            return MobileNetV2(p, k)
        if f == Family.EFFICIENTNET:
            return EfficientNet(p, k)
        if f == Family.VIT:
            return ViT(p, k, spec.input_px)
        if f == Family.SWINT:
            return Swin(p, k, spec.input_px)
        if f == Family.MOBILEVIT:
            return MobileViT(p, k)
        if f == Family.CMT:
            return CMT(p, k, spec.input_px)
        if f == Family.SEQUENCER2D:
            return Sequencer2D(p, k)
    except (KeyError, TypeError) as exc:
        raise UnsupportedSpec(f"{spec.name}: incomplete stage parameters ({exc})") from None
    raise UnsupportedSpec(f"unknown family {f}")


def build_model(spec: ArchitectureSpec, seed: int | None = 0) -> nn.Module:
    """Runnable classifier for a toy spec (float32, training mode)."""
    if spec.scale != Scale.TOY:
        raise UnsupportedSpec(f"{spec.name}: reference specs are count-only")
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return _instantiate(spec)
    return _instantiate(spec)


def build_skeleton(spec: ArchitectureSpec) -> nn.Module:
    """Allocation-free instance on the meta device, for enumerating reference-scale weights."""
    with torch.device("meta"):
        return _instantiate(spec)


def enumerate_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
