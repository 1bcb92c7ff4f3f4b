import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sketchcolor.config import LossConfig
from sketchcolor.errors import InvalidInputError
from sketchcolor.imaging import InstanceMask, compute_edge_weight_map
from sketchcolor.losses import (IdentityStack, PerceptualFeatureStack, hint_consistency_loss, ldm_loss,
                                perceptual_loss, total_loss)
from sketchcolor.matching import ColorHints


def random_hints(rng, h, w, k):
    flat = rng.choice(h * w, size=k, replace=False)
    return ColorHints(rows=flat // w, cols=flat % w, colors=rng.random((k, 3)), shape=(h, w))


def loss_fn(cfg, stack, eps, hints, z):
    """Total loss as a function of (eps_hat, z_hat, decoded) packed in one vector."""
    def f(x):
        eh, zh, dec = x[:32].reshape(1, 2, 4, 4), x[32:64].reshape(1, 2, 4, 4), x[64:].reshape(3, 4, 4)
        weights = torch.ones(4, 4, dtype=x.dtype)
        weights[1:3, 1:3] = 2.0
        return total_loss(ldm_loss(eps, eh, weights), perceptual_loss(z, zh, stack),
                          hint_consistency_loss(dec, hints), cfg)[0]
    return f


def finite_difference_check(seed, h=1e-4):
    """Relative error between autograd and central differences for all three terms."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    cfg = LossConfig(lambda_perceptual=0.1, lambda_hint=0.05)
    stack = PerceptualFeatureStack(2, (4, 4), seed=seed).double()
    eps = torch.from_numpy(rng.normal(size=(1, 2, 4, 4)))
    z = torch.from_numpy(rng.normal(size=(1, 2, 4, 4)))
    hints = random_hints(rng, 4, 4, 6)
    f = loss_fn(cfg, stack, eps, hints, z)
    x = torch.from_numpy(rng.normal(size=32 + 32 + 48)).requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    fd = torch.zeros_like(x)
    with torch.no_grad():
        for i in range(len(x)):
            e = torch.zeros_like(x)
            e[i] = h
            fd[i] = (f(x + e) - f(x - e)) / (2 * h)
    return float((g - fd).norm() / max(g.norm(), fd.norm()))


def test_ldm_loss_cases():
    eps = torch.randn(1, 2, 2, 2)
    assert float(ldm_loss(eps, eps)) == 0
    a = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]], [[0.5, 0.0], [-1.0, 2.0]]]])
    b = torch.zeros_like(a)
    assert float(ldm_loss(a, b)) == pytest.approx((1 + 4 + 9 + 16 + 0.25 + 0 + 1 + 4) / 8)
    e = torch.full((1, 1, 2, 2), 0.5)
    w = torch.tensor([[2.0, 2.0], [1.0, 1.0]])
    assert float(ldm_loss(e, torch.zeros_like(e), w)) == pytest.approx(1.5 * 0.25)
    with pytest.raises(InvalidInputError):
        ldm_loss(eps, torch.randn(1, 2, 2, 3))
    with pytest.raises(InvalidInputError):
        ldm_loss(eps, eps, torch.ones(3, 3))


def test_ldm_batch_weights():
    eps, eh = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
    w = torch.rand(2, 4, 4) + 1
    manual = (w[:, None] * (eps - eh) ** 2).mean()
    torch.testing.assert_close(ldm_loss(eps, eh, w), manual)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 15), st.floats(0.01, 3))
def test_ldm_monotone_weighting(seed, pos, delta):
    g = torch.Generator().manual_seed(seed)
    eps, eh = torch.randn(1, 2, 4, 4, generator=g), torch.randn(1, 2, 4, 4, generator=g)
    w = torch.rand(4, 4, generator=g) + 1
    w2 = w.clone()
    w2.view(-1)[pos] += delta
    assert float(ldm_loss(eps, eh, w2)) >= float(ldm_loss(eps, eh, w))
    assert float(ldm_loss(eps, eh, w)) >= 0


def test_beta_zero_equals_unweighted():
    m = np.zeros((32, 32), bool)
    m[8:20, 4:30] = True
    w = torch.from_numpy(compute_edge_weight_map([InstanceMask.from_mask(m)], 0.0, 8))
    eps, eh = torch.randn(1, 4, 4, 4, dtype=torch.float64), torch.randn(1, 4, 4, 4, dtype=torch.float64)
    assert torch.equal(ldm_loss(eps, eh, w), ldm_loss(eps, eh))


def test_perceptual_cases():
    stack = PerceptualFeatureStack(4, (4, 8))
    z = torch.randn(1, 4, 8, 8)
    assert float(perceptual_loss(z, z, stack)) == 0
    z2 = torch.randn(1, 4, 8, 8)
    assert float(perceptual_loss(z, z2, stack)) == pytest.approx(float(perceptual_loss(z2, z, stack)))
    a, b = torch.randn(1, 4, 4, 4, dtype=torch.float64), torch.randn(1, 4, 4, 4, dtype=torch.float64)
    oracle = sum(float((x - y) ** 2) for x, y in zip(a.flatten(), b.flatten())) / 64
    assert float(perceptual_loss(a, b, IdentityStack())) == pytest.approx(oracle, rel=1e-12)
    assert not any(p.requires_grad for p in stack.parameters())
    with pytest.raises(InvalidInputError):
        perceptual_loss(z, z[..., :4], stack)


def test_hint_loss_cases(caplog):
    img = torch.rand(3, 4, 4, dtype=torch.float64)
    rows, cols = np.array([0, 2, 3]), np.array([1, 1, 3])
    exact = ColorHints(rows, cols, img[:, rows, cols].T.numpy(), (4, 4))
    assert float(hint_consistency_loss(img, exact)) == 0
    colors = img[:, [2], [1]].T.numpy().copy()
    colors[0, 0] += 0.1
    one = ColorHints(np.array([2]), np.array([1]), colors, (4, 4))
    assert float(hint_consistency_loss(img[None], one)) == pytest.approx(0.01 / 3)
    empty = ColorHints(np.zeros(0, int), np.zeros(0, int), np.zeros((0, 3)), (4, 4))
    with caplog.at_level("WARNING"):
        assert float(hint_consistency_loss(img, empty)) == 0
    assert "empty hint map" in caplog.text
    rng = np.random.default_rng(0)
    hints = random_hints(rng, 4, 4, 7)
    oracle = np.mean([(img[c, r, k].item() - hints.colors[i, c]) ** 2
                      for i, (r, k) in enumerate(zip(hints.rows, hints.cols)) for c in range(3)])
    assert float(hint_consistency_loss(img, hints)) == pytest.approx(oracle, rel=1e-12)
    with pytest.raises(InvalidInputError):
        hint_consistency_loss(torch.rand(3, 5, 5), hints)


def test_total_loss_arithmetic():
    one, half = torch.tensor(1.0), torch.tensor(0.5)
    t, bd = total_loss(one, half, None, LossConfig(lambda_perceptual=0.1))
    assert float(t) == pytest.approx(1.05)
    assert bd.as_dict() == {"total": pytest.approx(1.05), "ldm": 1.0, "perceptual": 0.5, "hint": 0.0}
    t, _ = total_loss(one, half, half, LossConfig(lambda_perceptual=0, lambda_hint=0))
    assert float(t) == 1.0
    z = torch.tensor(0.0)
    assert float(total_loss(z, z, z, LossConfig())[0]) == 0


@pytest.mark.parametrize("seed", range(5))
def test_total_loss_gradient(seed):
    assert finite_difference_check(seed) < 1e-3
