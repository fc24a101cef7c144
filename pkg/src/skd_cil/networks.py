"""Classifier backbones, the knowledge delegator, and checkpoint I/O.

Every classifier is split into a feature extractor and a linear head so the
losses can reach features directly. Normalization layers are enumerated in
module-registration order, which is what the feature-statistic regularizer
relies on.
"""

from __future__ import annotations

import contextlib
import copy
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT_VERSION = 1

ARCHITECTURES = ("desk-cnn", "resnet32", "resnet18")


class ArchitectureError(ValueError):
    """Unknown architecture id or an input shape the architecture can't take."""


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------


class ClassifierModel(nn.Module):
    """Feature extractor followed by a linear classification head."""

    def __init__(self, arch: str, features: nn.Module, feature_dim: int,
                 num_classes: int, input_shape: Tuple[int, int, int]):
        super().__init__()
        self.arch = arch
        self.input_shape = tuple(input_shape)
        self.feature_dim = feature_dim
        self.features = features
        self.head = nn.Linear(feature_dim, num_classes)

    @property
    def num_classes(self) -> int:
        return self.head.out_features

    def extract(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def bn_layers(self) -> List[nn.modules.batchnorm._BatchNorm]:
        return [m for m in self.features.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]

    def bn_stats(self) -> List[Tuple[torch.Tensor, torch.Tensor]]:
        """(running_mean, running_var) for each normalization layer, in order."""
        return [(bn.running_mean, bn.running_var) for bn in self.bn_layers()]


class _Flatten(nn.Module):
    def forward(self, x):
        return torch.flatten(x, 1)


def _desk_cnn(in_channels: int) -> Tuple[nn.Module, int]:
    widths = (32, 64, 128)
    layers: List[nn.Module] = []
    prev = in_channels
    for i, w in enumerate(widths):
        layers += [nn.Conv2d(prev, w, 3, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
        if i < len(widths) - 1:
            layers.append(nn.MaxPool2d(2))
        prev = w
    layers += [nn.AdaptiveAvgPool2d(1), _Flatten()]
    return nn.Sequential(*layers), widths[-1]


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def _make_stage(in_planes: int, planes: int, blocks: int, stride: int) -> Tuple[nn.Sequential, int]:
    layers = []
    for s in [stride] + [1] * (blocks - 1):
        layers.append(BasicBlock(in_planes, planes, s))
        in_planes = planes
    return nn.Sequential(*layers), in_planes


def _resnet32(in_channels: int) -> Tuple[nn.Module, int]:
    # CIFAR-style: 3 stages x 5 basic blocks, 6n+2 = 32 layers
    stem = [nn.Conv2d(in_channels, 16, 3, padding=1, bias=False), nn.BatchNorm2d(16), nn.ReLU(inplace=True)]
    s1, c = _make_stage(16, 16, 5, 1)
    s2, c = _make_stage(c, 32, 5, 2)
    s3, c = _make_stage(c, 64, 5, 2)
    return nn.Sequential(*stem, s1, s2, s3, nn.AdaptiveAvgPool2d(1), _Flatten()), c


def _resnet18(in_channels: int) -> Tuple[nn.Module, int]:
    stem = [
        nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False),
        nn.BatchNorm2d(64),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(3, stride=2, padding=1),
    ]
    stages = []
    c = 64
    for planes, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
        s, c = _make_stage(c, planes, 2, stride)
        stages.append(s)
    return nn.Sequential(*stem, *stages, nn.AdaptiveAvgPool2d(1), _Flatten()), c


def _check_input_shape(arch: str, input_shape: Sequence[int]) -> None:
    if len(input_shape) != 3 or any(int(v) <= 0 for v in input_shape):
        raise ArchitectureError(f"input_shape must be (C, H, W) with positive entries, got {input_shape}")
    _, h, w = input_shape
    if arch == "desk-cnn":
        ok = h % 4 == 0 and w % 4 == 0 and h >= 8 and w >= 8
    elif arch == "resnet32":
        ok = h % 4 == 0 and w % 4 == 0 and 8 <= h <= 64 and 8 <= w <= 64
    else:
        ok = h % 32 == 0 and w % 32 == 0 and h >= 64 and w >= 64
    if not ok:
        raise ArchitectureError(f"input shape {tuple(input_shape)} is not compatible with {arch}")


_BUILDERS = {"desk-cnn": _desk_cnn, "resnet32": _resnet32, "resnet18": _resnet18}


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.reset_running_stats()
            if m.affine:
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            m.reset_parameters()


def build_classifier(arch: str, num_classes: int, input_shape: Sequence[int],
                     seed: Optional[int] = None) -> ClassifierModel:
    if arch not in _BUILDERS:
        raise ArchitectureError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    _check_input_shape(arch, input_shape)
    with _seeded(seed):
        features, dim = _BUILDERS[arch](int(input_shape[0]))
        model = ClassifierModel(arch, features, dim, num_classes, tuple(int(v) for v in input_shape))
        _init_weights(model)
    return model


@dataclass(frozen=True)
class HeadExtension:
    old_class_count: int
    new_class_count: int

    def __post_init__(self):
        if self.old_class_count < 0 or self.new_class_count < 0:
            raise ValueError("class counts must be nonnegative")


def extend_head(model: ClassifierModel, ext: HeadExtension, seed: int = 0) -> ClassifierModel:
    """Copy of ``model`` whose head has ``ext.new_class_count`` extra outputs.

    Old rows are copied verbatim; new rows are drawn from U(-1/sqrt(d), 1/sqrt(d)).
    """
    if model.num_classes != ext.old_class_count:
        raise ValueError(
            f"head has {model.num_classes} outputs but extension expects {ext.old_class_count}"
        )
    out = copy.deepcopy(model)
    if ext.new_class_count == 0:
        return out
    old = model.head
    d = old.in_features
    head = nn.Linear(d, ext.old_class_count + ext.new_class_count)
    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(d)
    with torch.no_grad():
        head.weight.copy_(torch.empty_like(head.weight).uniform_(-bound, bound, generator=gen))
        head.bias.copy_(torch.empty_like(head.bias).uniform_(-bound, bound, generator=gen))
        head.weight[: ext.old_class_count] = old.weight
        head.bias[: ext.old_class_count] = old.bias
    head.to(old.weight.device, old.weight.dtype)
    out.head = head
    return out


def clone_reinit(model: nn.Module, seed: int) -> nn.Module:
    """Same architecture as ``model``, every parameter and running statistic re-drawn."""
    out = copy.deepcopy(model)
    with _seeded(seed):
        _init_weights(out)
    return out


# ---------------------------------------------------------------------------
# Delegator
# ---------------------------------------------------------------------------


class Delegator(nn.Module):
    """Unconditional latent-to-image generator with a trainable helper BN on its output."""

    def __init__(self, input_shape: Sequence[int], latent_dim: int = 256, width: Optional[int] = None,
                 helper_bn: bool = True):
        super().__init__()
        c, h, w = (int(v) for v in input_shape)
        self.input_shape = (c, h, w)
        self.latent_dim = int(latent_dim)
        self.high_res = h > 64
        factor = 16 if self.high_res else 4
        if h % factor or w % factor:
            raise ArchitectureError(
                f"input {h}x{w} is not divisible by the generator's upsampling factor {factor}"
            )
        if latent_dim < 1:
            raise ValueError("latent_dim must be positive")
        self.init_hw = (h // factor, w // factor)
        if self.high_res:
            width = width or 64
            stem = 8 * width
            self.fc = nn.Linear(latent_dim, stem * self.init_hw[0] * self.init_hw[1])
            self.stem_channels = stem
            blocks: List[nn.Module] = [nn.BatchNorm2d(stem)]
            prev = stem
            for mult in (8, 4, 2, 1):
                out = mult * width
                blocks += [
                    nn.ConvTranspose2d(prev, out, 3, stride=2, padding=1, output_padding=1),
                    nn.BatchNorm2d(out),
                    nn.LeakyReLU(0.2, inplace=True),
                ]
                prev = out
        else:
            width = width or 128
            self.fc = nn.Linear(latent_dim, width * self.init_hw[0] * self.init_hw[1])
            self.stem_channels = width
            half = max(width // 2, 1)
            blocks = [
                nn.BatchNorm2d(width),
                nn.Upsample(scale_factor=2),
                nn.Conv2d(width, width, 3, padding=1),
                nn.BatchNorm2d(width),
                nn.LeakyReLU(0.2, inplace=True),
                nn.Upsample(scale_factor=2),
                nn.Conv2d(width, half, 3, padding=1),
                nn.BatchNorm2d(half),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            prev = half
        blocks += [nn.Conv2d(prev, c, 3, padding=1), nn.Tanh()]
        self.width = width
        self.body = nn.Sequential(*blocks)
        self.helper_bn = nn.BatchNorm2d(c) if helper_bn else nn.Identity()

    def generate_raw(self, z: torch.Tensor) -> torch.Tensor:
        """Generator output before the helper BN, bounded in [-1, 1]."""
        out = self.fc(z).view(z.shape[0], self.stem_channels, *self.init_hw)
        return self.body(out)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.helper_bn(self.generate_raw(z))


def build_delegator(input_shape: Sequence[int], latent_dim: int = 256, width: Optional[int] = None,
                    helper_bn: bool = True, seed: Optional[int] = None) -> Delegator:
    with _seeded(seed):
        return Delegator(input_shape, latent_dim, width=width, helper_bn=helper_bn)


# ---------------------------------------------------------------------------
# Hooks and helpers
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def _seeded(seed: Optional[int]):
    if seed is None:
        yield
        return
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


@contextlib.contextmanager
def record_bn_inputs(layers: Sequence[nn.Module]) -> Iterator[List[Tuple[torch.Tensor, torch.Tensor]]]:
    """Capture per-channel batch mean and std of the input to each given BN layer.

    The yielded list is filled during forward passes run inside the block, one
    (mean, std) pair per layer in the order given.
    """
    records: List[Optional[Tuple[torch.Tensor, torch.Tensor]]] = [None] * len(layers)

    def make_hook(i):
        def hook(module, inputs, output):
            x = inputs[0]
            dims = [0] + list(range(2, x.dim()))
            mean = x.mean(dim=dims)
            var = x.var(dim=dims, unbiased=False)
            records[i] = (mean, torch.sqrt(var + module.eps))
        return hook

    handles = [layer.register_forward_hook(make_hook(i)) for i, layer in enumerate(layers)]
    try:
        yield records  # type: ignore[misc]
    finally:
        for h in handles:
            h.remove()


@contextlib.contextmanager
def frozen_bn_stats(module: nn.Module):
    """Run in train mode (batch statistics) without touching running statistics."""
    bns = [m for m in module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [(m.momentum, m.num_batches_tracked.clone() if m.num_batches_tracked is not None else None)
             for m in bns]
    for m in bns:
        m.momentum = 0.0
    try:
        yield module
    finally:
        for m, (momentum, tracked) in zip(bns, saved):
            m.momentum = momentum
            if tracked is not None:
                m.num_batches_tracked.copy_(tracked)


def set_requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    set_requires_grad(model, False)
    return model


def state_digest(module: nn.Module, params_only: bool = False) -> str:
    """sha256 over parameters (and buffers unless ``params_only``) in registration order."""
    h = hashlib.sha256()
    items = module.named_parameters() if params_only else module.state_dict().items()
    for name, t in items:
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class HeadSwapped(nn.Module):
    """Features from one model, head from another (e.g. student features + teacher head)."""

    def __init__(self, features_from: ClassifierModel, head_from: ClassifierModel):
        super().__init__()
        if features_from.feature_dim != head_from.feature_dim:
            raise ValueError(
                f"feature dims differ: {features_from.feature_dim} vs {head_from.feature_dim}"
            )
        self.features = features_from.features
        self.head = head_from.head

    def forward(self, x):
        return self.head(self.features(x))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_classifier(model: ClassifierModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "classifier",
        "arch": model.arch,
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "state_dict": model.state_dict(),
    }, path)
    return path


def load_classifier(path) -> ClassifierModel:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    _check_ckpt(ckpt, "classifier")
    model = build_classifier(ckpt["arch"], ckpt["num_classes"], ckpt["input_shape"])
    model.load_state_dict(ckpt["state_dict"])
    return model


def save_delegator(delegator: Delegator, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "delegator",
        "input_shape": list(delegator.input_shape),
        "latent_dim": delegator.latent_dim,
        "width": delegator.width,
        "helper_bn": isinstance(delegator.helper_bn, nn.BatchNorm2d),
        "state_dict": delegator.state_dict(),
    }, path)
    return path


def load_delegator(path) -> Delegator:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    _check_ckpt(ckpt, "delegator")
    d = Delegator(ckpt["input_shape"], ckpt["latent_dim"], width=ckpt["width"], helper_bn=ckpt["helper_bn"])
    d.load_state_dict(ckpt["state_dict"])
    return d


def _check_ckpt(ckpt, kind):
    if not isinstance(ckpt, dict) or ckpt.get("kind") != kind:
        raise ValueError(f"not a {kind} checkpoint")
    if ckpt.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {ckpt.get('format_version')}")
