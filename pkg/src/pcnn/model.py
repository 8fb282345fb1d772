"""The perception CNN: global and local backbones, registration-based fusion, two heads.

Data flow for one batch of N x 1 x H x W images::

    o_g   = gfieb(images)                                  # whole face
    o_l   = stitch(backbone_k(crop_k(images)) for k)       # per-region
    theta = locnet(o_l)                                    # N x 2 x 3
    o_reg = grid_sample(o_l, grid_generate(theta, o_g's spatial shape))
    o_m   = o_reg * o_l + o_g
    loss  = alpha * CE(gpn(o_m)) + beta * CE(lpn(o_l))
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels as K
from .errors import InvalidConfig, InvalidShape
from .regions import RegionSet, RegionSpec, compute_regions, layout_regions, stitch_features
from .tensor import Tensor, add, mul, relu, reshape, scale

NUM_CLASSES = 7
IDENTITY_THETA = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


class Module:
    """Minimal parameter container; children are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield from m.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, K.RunningStats]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, K.RunningStats):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield from m.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
    return Tensor(w, requires_grad=True)


class Conv(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1, bias: bool = False,
                 dtype=np.float32):
        self.spec = K.ConvSpec(cin, cout, (k, k), (stride, stride), (k // 2, k // 2))
        self.weight = _he_normal(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return K.conv2d(x, self.weight, self.bias, self.spec.stride, self.spec.padding)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.stats = K.RunningStats(channels, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return K.batch_norm(x, self.gamma, self.beta, self.stats, training)


class Linear(Module):
    def __init__(self, rng, din: int, dout: int, dtype=np.float32):
        self.weight = _he_normal(rng, (dout, din), din, dtype)
        self.bias = Tensor(np.zeros(dout, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return K.fully_connected(x, self.weight, self.bias)


class ResidualBlock(Module):
    def __init__(self, rng, cin: int, cout: int, stride: int = 1, dtype=np.float32):
        self.conv1 = Conv(rng, cin, cout, 3, stride, dtype=dtype)
        self.bn1 = BatchNorm(cout, dtype)
        self.conv2 = Conv(rng, cout, cout, 3, 1, dtype=dtype)
        self.bn2 = BatchNorm(cout, dtype)
        if stride != 1 or cin != cout:
            self.proj = Conv(rng, cin, cout, 1, stride, dtype=dtype)
            self.proj_bn = BatchNorm(cout, dtype)
        else:
            self.proj = None
            self.proj_bn = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = relu(self.bn1(self.conv1(x), training))
        y = self.bn2(self.conv2(y), training)
        short = x if self.proj is None else self.proj_bn(self.proj(x), training)
        return relu(add(y, short))


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: Tuple[int, ...] = (16, 32, 64)
    stage_strides: Tuple[int, ...] = (1, 2, 2)

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "stage_strides", tuple(int(s) for s in self.stage_strides))
        if len(self.stage_channels) != len(self.stage_strides) or not self.stage_channels:
            raise InvalidConfig("stage_channels and stage_strides must be non-empty and of equal length")
        if self.stem_channels < 1 or min(self.stage_channels) < 1 or min(self.stage_strides) < 1:
            raise InvalidConfig(f"backbone extents must be >= 1: {self}")

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        for s in self.stage_strides:
            h, w = (h - 1) // s + 1, (w - 1) // s + 1
        return h, w


class Backbone(Module):
    """3x3 stem followed by one residual block per stage."""

    def __init__(self, rng, cfg: BackboneConfig, in_channels: int = 1, dtype=np.float32):
        self.stem = Conv(rng, in_channels, cfg.stem_channels, 3, 1, dtype=dtype)
        self.stem_bn = BatchNorm(cfg.stem_channels, dtype)
        blocks, cin = [], cfg.stem_channels
        for cout, s in zip(cfg.stage_channels, cfg.stage_strides):
            blocks.append(ResidualBlock(rng, cin, cout, s, dtype))
            cin = cout
        self.stages = blocks

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = relu(self.stem_bn(self.stem(x), training))
        for block in self.stages:
            y = block(y, training)
        return y


class Refine(Module):
    """Two stride-1 residual blocks (four convolutions) at constant width."""

    def __init__(self, rng, channels: int, blocks: int = 2, dtype=np.float32):
        self.blocks = [ResidualBlock(rng, channels, channels, 1, dtype) for _ in range(blocks)]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for b in self.blocks:
            x = b(x, training)
        return x


class LocNet(Module):
    """Predicts one affine transform per sample; starts at the identity."""

    def __init__(self, rng, channels: int, dtype=np.float32):
        self.refine = Refine(rng, channels, 2, dtype)
        self.fc = Linear(rng, channels, 6, dtype)
        self.fc.weight.data[...] = 0
        self.fc.bias.data[...] = np.asarray(IDENTITY_THETA, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        t = self.fc(K.global_avg_pool(self.refine(x, training)))
        return reshape(t, (x.shape[0], 2, 3))


class Head(Module):
    """Optional refinement, global max pooling, then a fully connected classifier."""

    def __init__(self, rng, channels: int, classes: int, refine: bool, dtype=np.float32):
        self.refine = Refine(rng, channels, 2, dtype) if refine else None
        self.fc = Linear(rng, channels, classes, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if self.refine is not None:
            x = self.refine(x, training)
        return self.fc(K.global_max_pool(x))


VARIANT_TAGS = ("full", "no_crop", "two_random_crop", "three_crop", "four_crop", "gfieb_only", "no_mdim",
                "custom_alpha_beta")


@dataclass(frozen=True)
class Variant:
    tag: str = "full"
    alpha: Optional[float] = None
    beta: Optional[float] = None

    def __post_init__(self):
        if self.tag not in VARIANT_TAGS:
            raise InvalidConfig(f"unknown variant {self.tag!r}")
        if self.tag == "custom_alpha_beta":
            if self.alpha is None or self.beta is None or self.alpha <= 0 or self.beta <= 0:
                raise InvalidConfig("custom_alpha_beta needs alpha > 0 and beta > 0")

    @classmethod
    def parse(cls, text: str) -> "Variant":
        """Parse ``full`` or ``custom_alpha_beta(12,8)``."""
        text = text.strip()
        m = re.fullmatch(r"custom_alpha_beta\(\s*([^,\s]+)\s*,\s*([^)\s]+)\s*\)", text)
        if m:
            return cls("custom_alpha_beta", float(m.group(1)), float(m.group(2)))
        return cls(text)

    def __str__(self) -> str:
        if self.tag == "custom_alpha_beta":
            return f"custom_alpha_beta({self.alpha:g},{self.beta:g})"
        return self.tag


def variant_layout(variant: Variant, regions: RegionSpec, seed: int) -> Optional[List[tuple]]:
    """Fractional rectangles fed to the local branch, or None when there is no local branch."""
    tag = variant.tag
    if tag == "gfieb_only":
        return None
    if tag == "no_crop":
        return [(0.0, 1.0, 0.0, 1.0)]
    if tag == "three_crop":
        return [(0.0, 1 / 3, 0.0, 1.0), (1 / 3, 2 / 3, 0.0, 1.0), (2 / 3, 1.0, 0.0, 1.0)]
    if tag == "four_crop":
        return [(0.0, 0.5, 0.0, 0.5), (0.0, 0.5, 0.5, 1.0), (0.5, 1.0, 0.0, 0.5), (0.5, 1.0, 0.5, 1.0)]
    if tag == "two_random_crop":
        # half-area rectangles on an eighths grid: full height x half width, or half height x full width
        rng = np.random.default_rng([seed, 2])
        rects = []
        for _ in range(2):
            off = int(rng.integers(0, 5)) / 8
            if rng.integers(0, 2):
                rects.append((0.0, 1.0, off, off + 0.5))
            else:
                rects.append((off, off + 0.5, 0.0, 1.0))
        return rects
    return regions.fractions()


class PcnnModel(Module):
    def __init__(self, backbone: BackboneConfig, regions: RegionSpec, variant: Variant, classes: int,
                 seed: int, alpha: float, beta: float, share_lfsieb: bool, dtype):
        rng = np.random.default_rng(seed)
        self.backbone_config = backbone
        self.region_spec = regions
        self.variant = variant
        self.classes = classes
        self.seed = seed
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.share_lfsieb = share_lfsieb
        self.dtype = np.dtype(dtype)
        self.layout = variant_layout(variant, regions, seed)
        c = backbone.out_channels

        self.gfieb = Backbone(rng, backbone, dtype=dtype)
        if self.layout is not None:
            count = 1 if share_lfsieb else len(self.layout)
            self.lfsieb = [Backbone(rng, backbone, dtype=dtype) for _ in range(count)]
            self.locnet = LocNet(rng, c, dtype) if variant.tag != "no_mdim" else None
            self.lpn = Head(rng, c, classes, refine=False, dtype=dtype)
        else:
            self.lfsieb = []
            self.locnet = None
            self.lpn = None
        self.gpn = Head(rng, c, classes, refine=True, dtype=dtype)
        self.training = True

    @property
    def has_local(self) -> bool:
        return self.layout is not None

    def train(self) -> "PcnnModel":
        self.training = True
        return self

    def eval(self) -> "PcnnModel":
        self.training = False
        return self

    def feature_size(self, h: int, w: int) -> Tuple[int, int]:
        return self.backbone_config.output_size(h, w)

    def regions_for(self, h: int, w: int) -> RegionSet:
        if self.variant.tag in ("full", "no_mdim", "custom_alpha_beta"):
            return compute_regions(h, w, self.region_spec)
        regions = layout_regions(h, w, self.layout)
        for r0, r1, c0, c1 in regions:
            if r1 <= r0 or c1 <= c0:
                raise InvalidShape(f"crop {(r0, r1, c0, c1)} is empty for a {h}x{w} image")
        return regions

    def check_input_size(self, h: int, w: int) -> None:
        """Raise if the branches cannot produce identically shaped outputs for an h x w input."""
        if not self.has_local:
            return
        regions = self.regions_for(h, w)
        hf, wf = self.feature_size(h, w)
        for r0, r1, c0, c1 in regions.scaled(hf, wf):
            if r1 <= r0 or c1 <= c0:
                raise InvalidConfig(f"local branch rectangle {(r0, r1, c0, c1)} vanishes at feature size {hf}x{wf}")


def build_model(backbone: BackboneConfig = BackboneConfig(), regions: RegionSpec = RegionSpec(),
                variant: Variant = Variant(), classes: int = NUM_CLASSES, seed: int = 0,
                alpha: float = 12.0, beta: float = 8.0, share_lfsieb: bool = False, dtype=np.float32,
                input_size: Tuple[int, int] = (32, 32)) -> PcnnModel:
    if variant.tag == "custom_alpha_beta":
        alpha, beta = variant.alpha, variant.beta
    if alpha <= 0 or beta <= 0:
        raise InvalidConfig(f"alpha and beta must be positive, got {alpha}, {beta}")
    if classes < 2:
        raise InvalidConfig("need at least two classes")
    model = PcnnModel(backbone, regions, variant, classes, seed, alpha, beta, share_lfsieb, dtype)
    try:
        model.check_input_size(*input_size)
    except (InvalidShape, ValueError) as exc:
        if isinstance(exc, InvalidConfig):
            raise
        raise InvalidConfig(str(exc)) from exc
    return model


def gfieb_forward(model: PcnnModel, images: Tensor, training: Optional[bool] = None) -> Tensor:
    training = model.training if training is None else training
    if images.data.ndim != 4 or images.shape[1] != 1:
        raise InvalidShape(f"expected N x 1 x H x W images, got {images.shape}")
    return model.gfieb(images, training)


def lfsieb_forward(model: PcnnModel, images: Tensor, training: Optional[bool] = None,
                   fill: float = 0.0) -> Tensor:
    training = model.training if training is None else training
    if not model.has_local:
        raise InvalidConfig(f"variant {model.variant} has no local branch")
    if images.data.ndim != 4 or images.shape[1] != 1:
        raise InvalidShape(f"expected N x 1 x H x W images, got {images.shape}")
    h, w = images.shape[2:]
    regions = model.regions_for(h, w)
    feats = []
    for k, r in enumerate(regions):
        net = model.lfsieb[0 if model.share_lfsieb else k]
        feats.append(net(K.crop(images, r), training))
    return stitch_features(feats, regions, model.feature_size(h, w), fill=fill)


def mdim_forward(model: PcnnModel, o_g: Tensor, o_l: Tensor, training: Optional[bool] = None) -> Tensor:
    """Register o_l with a predicted affine warp, gate it by o_l and add o_g."""
    training = model.training if training is None else training
    if o_g.shape != o_l.shape:
        raise InvalidShape(f"mdim: global {o_g.shape} and local {o_l.shape} differ")
    if model.locnet is None:
        raise InvalidConfig(f"variant {model.variant} has no location network")
    theta = model.locnet(o_l, training)
    grid = K.grid_generate(theta, o_g.shape[2:])
    o_reg = K.grid_sample(o_l, grid)
    return add(mul(o_reg, o_l), o_g)


def heads_forward(model: PcnnModel, o_mdim: Tensor, o_l: Optional[Tensor],
                  training: Optional[bool] = None) -> Tuple[Tensor, Optional[Tensor]]:
    training = model.training if training is None else training
    global_logits = model.gpn(o_mdim, training)
    local_logits = model.lpn(o_l, training) if (o_l is not None and model.lpn is not None) else None
    return global_logits, local_logits


def pcnn_loss(global_logits: Tensor, local_logits: Tensor, labels, alpha: float, beta: float) -> Tensor:
    if alpha <= 0 or beta <= 0:
        raise InvalidConfig(f"alpha and beta must be positive, got {alpha}, {beta}")
    ce_g = K.softmax_cross_entropy(global_logits, labels)
    ce_l = K.softmax_cross_entropy(local_logits, labels)
    return add(scale(ce_g, alpha), scale(ce_l, beta))


@dataclass
class ForwardOutput:
    loss: Tensor
    global_logits: Tensor
    local_logits: Optional[Tensor]
    ce_global: Tensor
    ce_local: Optional[Tensor]

    def __iter__(self):
        yield self.loss
        yield self.global_logits
        yield self.local_logits

    def predictions(self) -> np.ndarray:
        return predict_classes(self.global_logits.data)


def predict_classes(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the smallest class index on ties
    return np.asarray(logits).argmax(axis=1)


def pcnn_forward(model: PcnnModel, images: Tensor, labels, training: Optional[bool] = None) -> ForwardOutput:
    training = model.training if training is None else training
    o_g = gfieb_forward(model, images, training)
    if not model.has_local:
        global_logits, _ = heads_forward(model, o_g, None, training)
        ce_g = K.softmax_cross_entropy(global_logits, labels)
        return ForwardOutput(scale(ce_g, model.alpha), global_logits, None, ce_g, None)

    o_l = lfsieb_forward(model, images, training)
    if o_l.shape != o_g.shape:
        raise InvalidShape(f"branch outputs differ: global {o_g.shape}, local {o_l.shape}")
    if model.variant.tag == "no_mdim":
        fused = add(o_l, o_g)
    else:
        fused = mdim_forward(model, o_g, o_l, training)
    global_logits, local_logits = heads_forward(model, fused, o_l, training)
    ce_g = K.softmax_cross_entropy(global_logits, labels)
    ce_l = K.softmax_cross_entropy(local_logits, labels)
    loss = add(scale(ce_g, model.alpha), scale(ce_l, model.beta))
    return ForwardOutput(loss, global_logits, local_logits, ce_g, ce_l)
