"""Loss terms for cycle-consistent segmentation training.

All functions are pure and operate on torch tensors so they can sit inside the
autograd graph. Grids are ``(N, C, H, W)``; 2-D ``(H, W)`` inputs are accepted
where a single-channel field makes sense.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import torch
import torch.nn.functional as F

LEAST_SQUARES = "least-squares"
LOG_LIKELIHOOD = "log-likelihood"
ADV_MODES = (LEAST_SQUARES, LOG_LIKELIHOOD)

EPS = 1e-6

# 3x3 Sobel, scaled by 1/8 so a unit ramp has unit derivative.
_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0
_SOBEL_Y = _SOBEL_X.t().contiguous()


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite generator objective."""

    lambda_cycle: float = 10.0
    mu_edge: float = 1.0
    adv_mode: str = LEAST_SQUARES

    def __post_init__(self):
        for name in ("lambda_cycle", "mu_edge"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        check_adv_mode(self.adv_mode)


@dataclass
class LossRecord:
    """The six scalar losses reported by one training step."""

    adv_GA: float = 0.0
    adv_GI: float = 0.0
    d_A: float = 0.0
    d_I: float = 0.0
    cyc: float = 0.0
    edge: float = 0.0

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


class GradientField(NamedTuple):
    gx: torch.Tensor
    gy: torch.Tensor
    mag: torch.Tensor


def check_adv_mode(mode: str) -> str:
    if mode not in ADV_MODES:
        raise ValueError(f"unknown adversarial mode {mode!r}; expected one of {ADV_MODES}")
    return mode


def _check_scores(scores: torch.Tensor) -> None:
    if scores.numel() == 0:
        raise ValueError("empty score map")


def discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor,
                       adv_mode: str = LEAST_SQUARES) -> torch.Tensor:
    """Half the discriminator's real/fake classification loss.

    Least-squares targets are 1 for real patches and 0 for generated ones. The
    log-likelihood form treats scores as logits.
    """
    _check_scores(real_scores)
    _check_scores(fake_scores)
    check_adv_mode(adv_mode)
    if adv_mode == LEAST_SQUARES:
        return 0.5 * (((real_scores - 1.0) ** 2).mean() + (fake_scores ** 2).mean())
    # log(1 - sigmoid(x)) == logsigmoid(-x), stable for large |x|
    return -0.5 * (F.logsigmoid(real_scores).mean() + F.logsigmoid(-fake_scores).mean())


def generator_adversarial_loss(fake_scores: torch.Tensor,
                               adv_mode: str = LEAST_SQUARES) -> torch.Tensor:
    """Loss the generator minimizes to make its outputs score as real."""
    _check_scores(fake_scores)
    check_adv_mode(adv_mode)
    if adv_mode == LEAST_SQUARES:
        return ((fake_scores - 1.0) ** 2).mean()
    return -F.logsigmoid(fake_scores).mean()


def cycle_consistency_loss(original: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    """Element-mean absolute reconstruction error."""
    if original.shape != reconstructed.shape:
        raise ValueError(
            f"shape mismatch: {tuple(original.shape)} vs {tuple(reconstructed.shape)}")
    return (reconstructed - original).abs().mean()


def _as_nchw(grid: torch.Tensor) -> torch.Tensor:
    if grid.dim() == 2:
        return grid[None, None]
    if grid.dim() == 3:
        return grid[None]
    if grid.dim() == 4:
        return grid
    raise ValueError(f"expected a 2-D, 3-D or 4-D grid, got shape {tuple(grid.shape)}")


def luminance(image: torch.Tensor) -> torch.Tensor:
    """Equal-weight channel mean of an ``(N, C, H, W)`` image, keeping the channel axis."""
    return _as_nchw(image).mean(dim=1, keepdim=True)


def sobel(grid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Horizontal and vertical Sobel derivatives with replicate borders.

    ``grid`` is ``(H, W)`` or ``(N, 1, H, W)``; outputs have the same shape.
    """
    x = _as_nchw(grid)
    if x.shape[1] != 1:
        raise ValueError(f"sobel expects a single-channel grid, got {x.shape[1]} channels")
    h, w = x.shape[-2:]
    if h < 3 or w < 3:
        raise ValueError(f"grid {h}x{w} is smaller than the 3x3 gradient kernel")
    kernel = torch.stack([_SOBEL_X, _SOBEL_Y])[:, None].to(dtype=x.dtype, device=x.device)
    out = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), kernel)
    dx, dy = out[:, :1], out[:, 1:]
    if grid.dim() == 2:
        return dx[0, 0], dy[0, 0]
    return dx, dy


def normalized_gradients(grid: torch.Tensor, eps: float = EPS) -> GradientField:
    """Unit gradient directions and gradient magnitude of a single-channel grid.

    Directions are zero wherever the magnitude is at most ``eps``. Both the
    square root and the division are guarded so autograd stays finite on flat
    regions.
    """
    dx, dy = sobel(grid)
    sq = dx * dx + dy * dy
    nonzero = sq > 0
    mag = torch.where(nonzero, torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq))),
                      torch.zeros_like(sq))
    strong = mag > eps
    safe = torch.where(strong, mag, torch.ones_like(mag))
    zero = torch.zeros_like(dx)
    return GradientField(torch.where(strong, dx / safe, zero),
                         torch.where(strong, dy / safe, zero), mag)


def edge_consistency_loss(annotation: torch.Tensor, image: torch.Tensor,
                          eps: float = EPS) -> torch.Tensor:
    """Magnitude-weighted misalignment between annotation and image edges.

    Per sample this is ``sum(A_mag * (1 - (I . A)^2)) / max(sum(A_mag), eps)``
    with ``I`` and ``A`` the unit gradient directions; the batch result is the
    sample mean. Multi-channel images are reduced to luminance first.
    """
    ann = _as_nchw(annotation)
    img = _as_nchw(image)
    if ann.shape[-2:] != img.shape[-2:]:
        raise ValueError(
            f"spatial dims differ: annotation {tuple(ann.shape[-2:])}, image {tuple(img.shape[-2:])}")
    if ann.shape[0] != img.shape[0]:
        raise ValueError(f"batch sizes differ: {ann.shape[0]} vs {img.shape[0]}")
    a = normalized_gradients(luminance(ann), eps)
    i = normalized_gradients(luminance(img), eps)
    dot = i.gx * a.gx + i.gy * a.gy
    num = (a.mag * (1.0 - dot * dot)).sum(dim=(1, 2, 3))
    den = a.mag.sum(dim=(1, 2, 3)).clamp_min(eps)
    return (num / den).mean()


def full_objective(adv_GA, adv_GI, cyc, edge, weights: LossWeights):
    """Generator-side composite objective: both adversarial terms plus weighted cycle and edge terms."""
    if weights.lambda_cycle < 0 or weights.mu_edge < 0:
        raise ValueError("loss weights must be non-negative")
    return adv_GA + adv_GI + weights.lambda_cycle * cyc + weights.mu_edge * edge
