"""Residual generators and PatchGAN discriminators.

Both families are fully convolutional. Generators downsample by 4, run a stack
of residual blocks, upsample with transposed convolutions and squash to
``(-1, 1)`` with tanh. Discriminators emit an unbounded patch score map.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .serialization import FormatError, pack, unpack, write_atomic

ROLES = ("G_A", "G_I", "D_A", "D_I")
NETWORK_FORMAT = "toolseg-network"
NETWORK_VERSION = 1


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int
    out_channels: int
    base_width: int = 64
    n_residual_blocks: int = 9
    n_down: int = 2

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "base_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_residual_blocks < 0:
            raise ValueError("n_residual_blocks must be >= 0")
        if self.n_down != 2:
            raise ValueError("n_down is fixed at 2")

    @property
    def multiple(self) -> int:
        return 2 ** self.n_down


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int
    base_width: int = 64
    n_layers: int = 3

    def __post_init__(self):
        for name in ("in_channels", "base_width", "n_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


def _check_role(role: str) -> str:
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}; expected one of {ROLES}")
    return role


class ResidualBlock(nn.Module):
    """Two reflection-padded 3x3 convolutions with an additive skip."""

    def __init__(self, width: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, kernel_size=3),
            nn.InstanceNorm2d(width),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, kernel_size=3),
            nn.InstanceNorm2d(width),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec, role: str = "G_A"):
        super().__init__()
        self.spec = spec
        self.role = _check_role(role)
        w = spec.base_width
        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(spec.in_channels, w, kernel_size=7),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
        ]
        for k in range(spec.n_down):
            c = w * 2 ** k
            layers += [
                nn.Conv2d(c, 2 * c, kernel_size=3, stride=2, padding=1),
                nn.InstanceNorm2d(2 * c),
                nn.ReLU(inplace=True),
            ]
        width = w * 2 ** spec.n_down
        layers += [ResidualBlock(width) for _ in range(spec.n_residual_blocks)]
        for k in range(spec.n_down):
            c = width // 2 ** k
            layers += [
                nn.ConvTranspose2d(c, c // 2, kernel_size=3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(c // 2),
                nn.ReLU(inplace=True),
            ]
        layers += [
            nn.ReflectionPad2d(3),
            nn.Conv2d(w, spec.out_channels, kernel_size=7),
            nn.Tanh(),
        ]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"{self.role} expects (N, {self.spec.in_channels}, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        m = self.spec.multiple
        if h % m or w % m:
            raise ValueError(f"input dims {h}x{w} must be divisible by {m}")
        return self.model(x)


class PatchDiscriminator(nn.Module):
    """PatchGAN: strided 4x4 convolutions, then a stride-1 layer and a 1-channel head."""

    def __init__(self, spec: DiscriminatorSpec, role: str = "D_A"):
        super().__init__()
        self.spec = spec
        self.role = _check_role(role)
        w = spec.base_width
        layers = [
            nn.Conv2d(spec.in_channels, w, kernel_size=4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        mult = 1
        for n in range(1, spec.n_layers):
            prev, mult = mult, min(2 ** n, 8)
            layers += [
                nn.Conv2d(w * prev, w * mult, kernel_size=4, stride=2, padding=1),
                nn.InstanceNorm2d(w * mult),
                nn.LeakyReLU(0.2, inplace=True),
            ]
        prev, mult = mult, min(2 ** spec.n_layers, 8)
        layers += [
            nn.Conv2d(w * prev, w * mult, kernel_size=4, stride=1, padding=1),
            nn.InstanceNorm2d(w * mult),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w * mult, 1, kernel_size=4, stride=1, padding=1),
        ]
        self.model = nn.Sequential(*layers)

    def output_size(self, n: int) -> int:
        for _ in range(self.spec.n_layers):
            n = (n + 2 - 4) // 2 + 1
        for _ in range(2):
            n = n + 2 - 4 + 1
        return n

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"{self.role} expects (N, {self.spec.in_channels}, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if self.output_size(h) < 1 or self.output_size(w) < 1:
            raise ValueError(f"input dims {h}x{w} are too small for a {self.spec.n_layers}-layer PatchGAN")
        return self.model(x)


class IdentitySegmenter(nn.Module):
    """Channel mean of the input; an oracle stand-in for ``G_A`` when the input already is a mask."""

    def __init__(self, spec: GeneratorSpec | None = None, role: str = "G_A"):
        super().__init__()
        self.spec = spec or GeneratorSpec(3, 1, base_width=1, n_residual_blocks=0)
        self.role = _check_role(role)

    def forward(self, x):
        return x.mean(dim=1, keepdim=True)


def init_weights(net: nn.Module, seed: int, std: float = 0.02) -> nn.Module:
    """Zero-mean Gaussian convolution weights (``std``) and zero biases, drawn from ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                module.weight.copy_(torch.randn(module.weight.shape, generator=gen) * std)
                if module.bias is not None:
                    module.bias.zero_()
    return net


def build_generator(spec: GeneratorSpec, rng_seed: int, role: str = "G_A",
                    init_std: float = 0.02) -> ResnetGenerator:
    return init_weights(ResnetGenerator(spec, role), rng_seed, init_std)


def build_discriminator(spec: DiscriminatorSpec, rng_seed: int, role: str = "D_A",
                        init_std: float = 0.02) -> PatchDiscriminator:
    return init_weights(PatchDiscriminator(spec, role), rng_seed, init_std)


def forward(net: nn.Module, grid: torch.Tensor) -> torch.Tensor:
    return net(grid)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


_ARCHS = {
    "resnet": (ResnetGenerator, GeneratorSpec),
    "patchgan": (PatchDiscriminator, DiscriminatorSpec),
    "identity": (IdentitySegmenter, GeneratorSpec),
}


def _arch_name(net: nn.Module) -> str:
    for name, (cls, _) in _ARCHS.items():
        if type(net) is cls:
            return name
    raise TypeError(f"cannot serialize {type(net).__name__}")


def network_payload(net: nn.Module) -> tuple[dict, dict]:
    """``(tensors, meta)`` describing ``net``: named parameter arrays plus arch, role and spec."""
    meta = {"arch": _arch_name(net), "role": net.role, "spec": asdict(net.spec)}
    return dict(net.state_dict()), meta


def network_from_payload(tensors: dict, meta: dict) -> nn.Module:
    cls, spec_cls = _ARCHS[meta["arch"]]
    net = cls(spec_cls(**meta["spec"]), meta["role"])
    net.load_state_dict(tensors)
    return net


def save_network(net: nn.Module, path) -> None:
    """Write a single-network checkpoint: role tag, spec and named parameter arrays."""
    tensors, meta = network_payload(net)
    write_atomic(path, pack(tensors, {"format": NETWORK_FORMAT, "version": NETWORK_VERSION, **meta}))


def load_network(path) -> nn.Module:
    tensors, meta = unpack(Path(path).read_bytes())
    if meta.get("format") != NETWORK_FORMAT:
        raise FormatError(f"{path} is not a network checkpoint")
    if meta.get("version") != NETWORK_VERSION:
        raise FormatError(f"{path} has network format version {meta.get('version')}, "
                          f"expected {NETWORK_VERSION}")
    return network_from_payload(tensors, meta)
