import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from toolseg.losses import (LOG_LIKELIHOOD, LossWeights, cycle_consistency_loss,
                            discriminator_loss, edge_consistency_loss, full_objective,
                            generator_adversarial_loss, normalized_gradients, sobel)

torch.set_default_dtype(torch.float32)


def full(value, shape=(1, 1, 6, 6)):
    return torch.full(shape, float(value))


def ramp(h=16, w=16, axis="x"):
    yy, xx = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64),
                            indexing="ij")
    return (xx if axis == "x" else yy)[None, None]


# ---------------------------------------------------------------- adversarial


@pytest.mark.parametrize("real,fake,expected", [(1.0, 0.0, 0.0), (0.0, 1.0, 1.0), (0.5, 0.5, 0.25)])
def test_discriminator_least_squares_canonical(real, fake, expected):
    assert float(discriminator_loss(full(real), full(fake))) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("fake,expected", [(1.0, 0.0), (0.0, 1.0), (0.5, 0.25)])
def test_generator_least_squares_canonical(fake, expected):
    assert float(generator_adversarial_loss(full(fake))) == pytest.approx(expected, abs=1e-12)


def test_log_mode_matches_direct_formula():
    g = torch.Generator().manual_seed(0)
    real, fake = torch.randn(1, 1, 5, 7, generator=g), torch.randn(1, 1, 3, 3, generator=g)
    sig = torch.sigmoid
    expected_d = -0.5 * (torch.log(sig(real)).mean() + torch.log(1 - sig(fake)).mean())
    expected_g = -torch.log(sig(fake)).mean()
    assert float(discriminator_loss(real, fake, LOG_LIKELIHOOD)) == pytest.approx(float(expected_d), rel=1e-5)
    assert float(generator_adversarial_loss(fake, LOG_LIKELIHOOD)) == pytest.approx(float(expected_g), rel=1e-5)


def test_log_mode_stable_for_large_scores():
    big = full(200.0)
    assert math.isfinite(float(discriminator_loss(big, -big, LOG_LIKELIHOOD)))
    assert math.isfinite(float(generator_adversarial_loss(-big, LOG_LIKELIHOOD)))


def test_empty_score_map_rejected():
    empty = torch.empty(1, 1, 0, 0)
    with pytest.raises(ValueError, match="empty score map"):
        discriminator_loss(empty, full(0))
    with pytest.raises(ValueError, match="empty score map"):
        generator_adversarial_loss(empty)


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        generator_adversarial_loss(full(0), "wasserstein")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_adversarial_losses_permutation_invariant(seed):
    g = torch.Generator().manual_seed(seed)
    real, fake = torch.randn(1, 1, 4, 5, generator=g), torch.randn(1, 1, 4, 5, generator=g)
    perm = torch.randperm(20, generator=g)
    shuffle = lambda t: t.reshape(-1)[perm].reshape(t.shape)
    for mode in ("least-squares", LOG_LIKELIHOOD):
        assert float(discriminator_loss(real, fake, mode)) == pytest.approx(
            float(discriminator_loss(shuffle(real), shuffle(fake), mode)), rel=1e-6)
        assert float(generator_adversarial_loss(fake, mode)) == pytest.approx(
            float(generator_adversarial_loss(shuffle(fake), mode)), rel=1e-6)
        assert float(discriminator_loss(real, fake, mode)) >= 0


# ---------------------------------------------------------------- cycle


def test_cycle_identity_and_unit_difference():
    x = torch.randn(1, 3, 8, 8)
    assert float(cycle_consistency_loss(x, x)) == 0.0
    assert float(cycle_consistency_loss(torch.ones(1, 1, 4, 4), torch.zeros(1, 1, 4, 4))) == 1.0


def test_cycle_matches_scalar_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(1, 2, 5, 6)), rng.normal(size=(1, 2, 5, 6))
    total, count = 0.0, 0
    for idx in np.ndindex(a.shape):
        total += abs(a[idx] - b[idx])
        count += 1
    got = float(cycle_consistency_loss(torch.from_numpy(a), torch.from_numpy(b)))
    assert got == pytest.approx(total / count, rel=1e-12)


def test_cycle_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        cycle_consistency_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_cycle_symmetric_and_zero_iff_equal(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(1, 1, 3, 4, generator=g), torch.randn(1, 1, 3, 4, generator=g)
    assert float(cycle_consistency_loss(a, b)) == float(cycle_consistency_loss(b, a))
    assert float(cycle_consistency_loss(a, b)) > 0
    assert float(cycle_consistency_loss(a, a.clone())) == 0


# ---------------------------------------------------------------- gradients


def loop_sobel(grid):
    """Per-pixel Sobel with clamped (replicate) indexing."""
    h, w = grid.shape
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    dx, dy = np.zeros((h, w)), np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            for j in range(3):
                for i in range(3):
                    v = grid[min(max(y + j - 1, 0), h - 1), min(max(x + i - 1, 0), w - 1)]
                    dx[y, x] += kx[j][i] * v / 8
                    dy[y, x] += kx[i][j] * v / 8
    return dx, dy


def test_sobel_matches_loop_oracle():
    g = np.random.default_rng(0).normal(size=(7, 9))
    dx, dy = sobel(torch.from_numpy(g))
    ox, oy = loop_sobel(g)
    np.testing.assert_allclose(dx.numpy(), ox, atol=1e-12)
    np.testing.assert_allclose(dy.numpy(), oy, atol=1e-12)


def test_horizontal_ramp_direction():
    f = normalized_gradients(ramp(axis="x"))
    inner = (..., slice(1, -1), slice(1, -1))
    assert torch.allclose(f.gx[inner], torch.ones_like(f.gx[inner]))
    assert torch.allclose(f.gy[inner], torch.zeros_like(f.gy[inner]))


def test_constant_grid_has_no_gradient():
    f = normalized_gradients(torch.full((1, 1, 8, 8), 0.3))
    for t in f:
        assert torch.count_nonzero(t) == 0


def test_diagonal_ramp_direction():
    f = normalized_gradients(ramp(axis="x") + ramp(axis="y"))
    inner = (..., slice(1, -1), slice(1, -1))
    s = 1 / math.sqrt(2)
    assert torch.allclose(f.gx[inner], torch.full_like(f.gx[inner], s), atol=1e-5)
    assert torch.allclose(f.gy[inner], torch.full_like(f.gy[inner], s), atol=1e-5)


def test_gradient_field_invariants():
    g = torch.randn(1, 1, 12, 12, generator=torch.Generator().manual_seed(1))
    g[..., :4, :4] = 0.5  # a flat patch
    f = normalized_gradients(g)
    strong = f.mag > 1e-6
    norm = f.gx ** 2 + f.gy ** 2
    assert torch.allclose(norm[strong], torch.ones_like(norm[strong]), atol=1e-5)
    assert torch.count_nonzero(f.gx[~strong]) == 0 and torch.count_nonzero(f.gy[~strong]) == 0
    assert (f.mag >= 0).all()


def test_too_small_grid():
    with pytest.raises(ValueError, match="smaller than"):
        normalized_gradients(torch.zeros(2, 5))


# ---------------------------------------------------------------- edge


def test_edge_aligned_ramps_zero():
    r = ramp(axis="x")
    assert float(edge_consistency_loss(r, r)) == pytest.approx(0.0, abs=1e-6)


def test_edge_orthogonal_ramps_one():
    assert float(edge_consistency_loss(ramp(axis="y"), ramp(axis="x"))) == pytest.approx(1.0, abs=1e-6)


def test_edge_constant_annotation_zero():
    loss = edge_consistency_loss(torch.full((1, 1, 16, 16), -1.0), ramp(axis="x"))
    assert float(loss) == 0.0


def test_edge_reduces_color_image_to_luminance():
    r = ramp(axis="x")
    rgb = torch.cat([r, 2 * r, 0.5 * r], dim=1)
    assert float(edge_consistency_loss(r, rgb)) == pytest.approx(0.0, abs=1e-6)


def test_edge_dim_mismatch():
    with pytest.raises(ValueError, match="spatial dims"):
        edge_consistency_loss(torch.zeros(1, 1, 8, 8), torch.zeros(1, 3, 8, 9))


def test_edge_constant_annotation_gradient_finite():
    a = torch.full((1, 1, 8, 8), 0.2, requires_grad=True)
    edge_consistency_loss(a, torch.randn(1, 3, 8, 8)).backward()
    assert torch.isfinite(a.grad).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([(8, 8), (9, 13), (16, 5)]))
def test_edge_loss_in_unit_interval(seed, shape):
    g = torch.Generator().manual_seed(seed)
    a = torch.tanh(3 * torch.randn(1, 1, *shape, generator=g))
    i = torch.rand(1, 3, *shape, generator=g) * 2 - 1
    value = float(edge_consistency_loss(a, i))
    assert 0.0 <= value <= 1.0 + 1e-7


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_edge_self_consistency(seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(1, 1, 10, 10, generator=g, dtype=torch.float64)
    assert float(edge_consistency_loss(a, a)) == pytest.approx(0.0, abs=1e-6)


def smooth_field(seed, h=20, w=20, channels=1):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    out = np.zeros((channels, h, w))
    for c in range(channels):
        for _ in range(3):
            fy, fx, ph = rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0, 2 * np.pi)
            out[c] += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
    return torch.from_numpy(out)[None]


def central_difference_check(fn, x, n_points=100, h=1e-3, seed=0):
    """Compare autograd with central differences at random interior points; returns relative errors."""
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.clone()
    rng = np.random.default_rng(seed)
    _, _, hh, ww = x.shape
    errs = []
    with torch.no_grad():
        for _ in range(n_points):
            y, z = rng.integers(1, hh - 1), rng.integers(1, ww - 1)
            xp, xm = x.detach().clone(), x.detach().clone()
            xp[0, 0, y, z] += h
            xm[0, 0, y, z] -= h
            fd = (float(fn(xp)) - float(fn(xm))) / (2 * h)
            ad = float(grad[0, 0, y, z])
            errs.append(abs(fd - ad) / max(abs(fd), abs(ad), 1e-8))
    return np.array(errs)


def test_edge_gradient_matches_finite_differences():
    ann, img = smooth_field(1), smooth_field(2, channels=3)
    errs = central_difference_check(lambda a: edge_consistency_loss(a, img), ann)
    assert errs.max() < 1e-3


def test_cycle_gradient_matches_finite_differences():
    a = smooth_field(3)
    b = a + 0.5 + smooth_field(4)  # keep |a - b| well away from the kink at 0
    errs = central_difference_check(lambda x: cycle_consistency_loss(b, x), a)
    assert errs.max() < 1e-3


# ---------------------------------------------------------------- objective


def test_full_objective_examples():
    w = LossWeights(10.0, 1.0)
    assert full_objective(0.0, 0.0, 0.0, 0.0, w) == 0.0
    assert full_objective(0.0, 0.0, 0.2, 0.1, w) == pytest.approx(2.1, abs=1e-12)
    off = LossWeights(10.0, 0.0)
    assert full_objective(0.3, 0.4, 0.2, 123.0, off) == pytest.approx(0.3 + 0.4 + 10.0 * 0.2)


def test_full_objective_zero_weights_is_adversarial_sum():
    w = LossWeights(0.0, 0.0)
    assert full_objective(0.37, 0.91, 5.0, 7.0, w) == 0.37 + 0.91


@pytest.mark.parametrize("kw", [{"lambda_cycle": -1.0}, {"mu_edge": -0.1}, {"mu_edge": float("inf")}])
def test_negative_weights_rejected(kw):
    with pytest.raises(ValueError):
        LossWeights(**kw)
