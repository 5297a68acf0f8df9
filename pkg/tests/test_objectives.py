import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from angiovid.errors import MetricError, ShapeError
from angiovid.objectives import (
    LossWeights,
    PatchSamplingConfig,
    attention_loss,
    gan_loss,
    masked_patchnce_loss,
    patchnce_terms,
    total_loss,
)

DT = torch.float64


def central_grad(fn, x, eps=1e-6):
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        up = fn(x).item()
        flat[i] = old - eps
        down = fn(x).item()
        flat[i] = old
        g.view(-1)[i] = (up - down) / (2 * eps)
    return g


def rel_err(fn, x):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach()
    numeric = central_grad(fn, x.detach().clone())
    return (analytic - numeric).norm().item() / max(analytic.norm().item(), numeric.norm().item(), 1e-12)


# -- attention loss


def test_attention_examples():
    m = torch.tensor([[1.0, 0], [1, 0]])
    assert attention_loss(m, m).item() == 0.0
    assert attention_loss(torch.ones(4, 4), torch.zeros(4, 4)).item() == 1.0
    assert attention_loss(torch.tensor([[0.5, 0], [1, 0]]), m).item() == pytest.approx(0.0625)
    with pytest.raises(ShapeError):
        attention_loss(torch.zeros(2, 2), torch.zeros(3, 3))


def test_attention_gradient():
    rng = np.random.default_rng(0)
    m = torch.from_numpy((rng.random((4, 4)) > 0.5).astype(float))
    A = torch.from_numpy(rng.random((4, 4)))
    assert rel_err(lambda a: attention_loss(a, m), A) < 1e-4


def test_attention_mask_monotone():
    rng = np.random.default_rng(1)
    A = torch.from_numpy(rng.random((8, 8)) * 0.4)
    m = torch.zeros(8, 8, dtype=DT)
    prev = attention_loss(A, m).item()
    for idx in rng.permutation(64)[:20]:
        m.view(-1)[idx] = 1.0
        cur = attention_loss(A, m).item()
        assert cur >= prev
        prev = cur


# -- PatchNCE


def scalar_infonce(real, fake, locs, tau):
    """Plain-python per-location InfoNCE for one image: real/fake (C, H*W) lists."""
    def unit(v):
        n = math.sqrt(sum(x * x for x in v))
        return [x / n for x in v]
    q = [unit([fake[c][i] for c in range(len(fake))]) for i in locs]
    k = [unit([real[c][i] for c in range(len(real))]) for i in locs]
    out = []
    for a in range(len(locs)):
        sims = [sum(x * y for x, y in zip(q[a], k[b])) / tau for b in range(len(locs))]
        pos = math.exp(sims[a])
        out.append(-math.log(pos / sum(math.exp(s) for s in sims)))
    return out


def test_patchnce_identical_matches_scalar_oracle():
    torch.manual_seed(0)
    feats = torch.randn(1, 8, 16, 16, dtype=DT)
    locs = torch.randperm(256, generator=torch.Generator().manual_seed(3))[:64]
    cfg = PatchSamplingConfig(patches_per_image=64, temperature=0.07)
    m = torch.zeros(1, 1, 16, 16, dtype=DT)
    loss = masked_patchnce_loss([feats], [feats.clone()], m, cfg, locations=[locs]).item()
    flat = feats[0].reshape(8, -1).tolist()
    oracle = scalar_infonce(flat, flat, locs.tolist(), 0.07)
    assert loss == pytest.approx(sum(oracle) / len(oracle), rel=1e-10)
    # closed form: -log(e^{1/t} / (e^{1/t} + (K-1) E[e^{sim/t}])) per location
    assert loss >= 0


def test_patchnce_mask_weighting():
    torch.manual_seed(1)
    real, fake = torch.randn(2, 6, 8, 8, dtype=DT), torch.randn(2, 6, 8, 8, dtype=DT)
    locs = [torch.arange(0, 64, 3)]
    ones, zeros = torch.ones(2, 1, 8, 8, dtype=DT), torch.zeros(2, 1, 8, 8, dtype=DT)
    base = masked_patchnce_loss(real, fake, zeros, locations=locs)
    assert masked_patchnce_loss(real, fake, ones, locations=locs).item() == pytest.approx(2 * base.item(), rel=1e-12)
    unweighted = patchnce_terms(real, fake, locs[0], 0.07).mean()
    alpha0 = PatchSamplingConfig(mask_weight_alpha=0.0)
    assert masked_patchnce_loss(real, fake, ones, alpha0, locations=locs).item() == pytest.approx(unweighted.item())


def test_patchnce_needs_negatives():
    x = torch.randn(1, 4, 4, 4)
    with pytest.raises(ShapeError):
        masked_patchnce_loss(x, x, torch.zeros(1, 1, 4, 4), locations=[torch.tensor([0])])


def test_patchnce_gradient():
    torch.manual_seed(2)
    real = torch.randn(1, 3, 4, 4, dtype=DT)
    fake = torch.randn(1, 3, 4, 4, dtype=DT)
    m = torch.from_numpy((np.random.default_rng(2).random((1, 1, 4, 4)) > 0.5).astype(float))
    cfg = PatchSamplingConfig(temperature=0.5)
    locs = [torch.arange(16)]
    assert rel_err(lambda f: masked_patchnce_loss([real], [f], m, cfg, locations=locs), fake) < 1e-4
    cfg = PatchSamplingConfig(temperature=0.07)
    assert rel_err(lambda f: masked_patchnce_loss([real], [f], m, cfg, locations=locs), fake) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_patchnce_nonnegative(seed, tau):
    g = torch.Generator().manual_seed(seed)
    real, fake = torch.randn(2, 4, 6, 6, generator=g), torch.randn(2, 4, 6, 6, generator=g)
    m = torch.rand(2, 1, 12, 12, generator=g)
    cfg = PatchSamplingConfig(patches_per_image=10, temperature=tau)
    assert masked_patchnce_loss(real, fake, m, cfg, generator=g).item() >= 0


# -- adversarial loss


def test_gan_examples():
    m = torch.rand(1, 1, 16, 16)
    assert gan_loss(torch.ones(1, 1, 4, 4), torch.zeros(1, 1, 4, 4), m, "discriminator").item() == 0.0
    assert gan_loss(None, torch.ones(1, 1, 4, 4), m, "generator").item() == 0.0
    one = torch.ones(1, 1, 1, 1)
    assert gan_loss(None, torch.full((1, 1, 1, 1), 0.5), one, "generator").item() == pytest.approx(0.5)
    with pytest.raises(ShapeError):
        gan_loss(torch.ones(2, 1, 4, 4), torch.zeros(2, 1, 4, 4), torch.ones(3, 1, 8, 8), "discriminator")
    with pytest.raises(ValueError):
        gan_loss(None, one, one, "critic")


def test_gan_multiscale_average():
    m = torch.zeros(1, 1, 8, 8)
    s1, s2 = torch.full((1, 1, 4, 4), 0.0), torch.full((1, 1, 2, 2), 0.5)
    assert gan_loss(None, [s1, s2], m, "generator").item() == pytest.approx((1.0 + 0.25) / 2)


@pytest.mark.parametrize("role", ["generator", "discriminator"])
def test_gan_gradient(role):
    rng = np.random.default_rng(5)
    m = torch.from_numpy(rng.random((1, 1, 8, 8)))
    real = torch.from_numpy(rng.normal(size=(1, 1, 4, 4)))
    fake = torch.from_numpy(rng.normal(size=(1, 1, 4, 4)))
    assert rel_err(lambda f: gan_loss(real, f, m, role), fake) < 1e-4
    if role == "discriminator":
        assert rel_err(lambda r: gan_loss(r, fake, m, role), real) < 1e-4


# -- total


def test_total_examples():
    w = LossWeights()
    assert (w.lambda_mask, w.lambda_att, w.lambda_gan) == (1, 4, 2)
    assert total_loss(1, 1, 1).total == 7.0
    assert total_loss(0, 0, 0).total == 0.0
    assert total_loss(0.5, 0.0625, 0.5).total == pytest.approx(1.75)
    with pytest.raises(MetricError, match="l_gan"):
        total_loss(1.0, 1.0, float("nan"))


@settings(max_examples=50, deadline=None)
@given(*[st.floats(0, 100)] * 4)
def test_total_linear(a, b, c, d):
    r1, r2 = total_loss(a, b, c), total_loss(a + d, b, c)
    assert r2.total - r1.total == pytest.approx(d, rel=1e-9, abs=1e-9)
    r3 = total_loss(a, b + d, c)
    assert r3.total - r1.total == pytest.approx(4 * d, rel=1e-9, abs=1e-9)
    r4 = total_loss(a, b, c + d)
    assert r4.total - r1.total == pytest.approx(2 * d, rel=1e-9, abs=1e-9)
