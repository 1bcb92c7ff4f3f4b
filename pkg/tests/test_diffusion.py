import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sketchcolor.data import build_dataset
from sketchcolor.diffusion.autoencoder import Autoencoder, pretrain_autoencoder
from sketchcolor.diffusion.schedule import NoiseSchedule, add_noise, make_schedule, predict_x0
from sketchcolor.diffusion.unet import Attention, Guider, UNet, guider_forward, reference_attention
from sketchcolor.errors import ConfigError, InvalidInputError
from sketchcolor.model import ColorizationModel, ConditionBundle, build_condition, ddim_sample, ddim_timesteps, sample

from conftest import tiny_config


# -- schedules and noising ------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 2000), st.sampled_from(["linear", "cosine"]), st.floats(1e-5, 1e-3), st.floats(5e-3, 0.05))
def test_schedule_monotone(T, layout, b0, b1):
    s = make_schedule(T, layout, b0, b1)
    assert s.T == T
    assert np.all(np.diff(s.alphas) <= 0)
    assert np.all((s.alphas > 0) & (s.alphas <= 1))


@pytest.mark.parametrize("layout", ["linear", "cosine"])
def test_schedule_starts_near_one(layout):
    assert abs(make_schedule(1000, layout).alphas[0] - 1) < 1e-4


def test_schedule_errors():
    with pytest.raises(InvalidInputError):
        make_schedule(10, "quadratic")
    with pytest.raises(InvalidInputError):
        make_schedule(0)


def test_add_noise_extremes():
    s = NoiseSchedule(np.array([1.0, 0.0]), "custom")
    z, eps = torch.randn(2, 3), torch.randn(2, 3)
    assert torch.equal(add_noise(z, eps, torch.tensor([0, 0]), s), z)
    assert torch.equal(add_noise(z, eps, torch.tensor([1, 1]), s), eps)
    with pytest.raises(InvalidInputError):
        add_noise(z, torch.randn(3, 2), 0, s)


def test_add_noise_variance_preserved():
    s = make_schedule(1000)
    gen = torch.Generator().manual_seed(0)
    for t in (0, 100, 500, 900, 999):
        z = torch.randn(100_000, generator=gen, dtype=torch.float64)
        eps = torch.randn(100_000, generator=gen, dtype=torch.float64)
        v = add_noise(z, eps, t, s).var()
        se = np.sqrt(2 / (100_000 - 1))
        assert abs(float(v) - 1) < 3 * se


@settings(max_examples=25, deadline=None)
@given(st.floats(0.001, 0.999), st.floats(-2, 2), st.floats(-2, 2))
def test_add_noise_linear(alpha, a, b):
    s = NoiseSchedule(np.array([alpha]), "custom")
    g = torch.Generator().manual_seed(1)
    z1, z2, e1, e2 = (torch.randn(5, generator=g, dtype=torch.float64) for _ in range(4))
    lhs = add_noise(a * z1 + b * z2, a * e1 + b * e2, 0, s)
    rhs = a * add_noise(z1, e1, 0, s) + b * add_noise(z2, e2, 0, s)
    torch.testing.assert_close(lhs, rhs, atol=1e-12, rtol=0)


def test_predict_x0_inverts_add_noise():
    s = make_schedule(1000)
    z, eps = torch.randn(2, 4, 3, 3, dtype=torch.float64), torch.randn(2, 4, 3, 3, dtype=torch.float64)
    t = torch.tensor([10, 700])
    torch.testing.assert_close(predict_x0(add_noise(z, eps, t, s), eps, t, s), z)
    assert predict_x0(add_noise(z, eps, t, s), -eps, t, s, clamp=3.0).abs().max() <= 3.0


# -- attention ------------------------------------------------------------------

def test_reference_attention_empty_and_mismatch():
    attn = Attention(8, heads=2)
    x = torch.randn(1, 5, 8)
    torch.testing.assert_close(reference_attention(x, None, attn), reference_attention(x, torch.zeros(1, 0, 8), attn))
    with pytest.raises(InvalidInputError):
        reference_attention(x, torch.randn(1, 3, 4), attn)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(0, 6))
def test_attention_rows_stochastic(seed, n, m):
    torch.manual_seed(seed)
    attn = Attention(8, heads=2)
    x = torch.randn(2, n, 8)
    out, w = reference_attention(x, torch.randn(2, m, 8), attn, return_weights=True)
    assert out.shape == x.shape and w.shape == (2, 2, n, n + m)
    torch.testing.assert_close(w.sum(-1), torch.ones(2, 2, n), atol=1e-5, rtol=0)
    out2, w2 = reference_attention(x, x, attn, return_weights=True)
    torch.testing.assert_close(w2.sum(-1), torch.ones(2, 2, n), atol=1e-5, rtol=0)


def test_attention_dominant_reference_token():
    attn = Attention(2, heads=1)
    with torch.no_grad():
        attn.to_q.weight.copy_(torch.eye(2))
        attn.to_k.weight.copy_(torch.eye(2))
        attn.to_v.weight.copy_(torch.eye(2))
        attn.to_out.weight.copy_(torch.eye(2))
        attn.to_out.bias.zero_()
    # identity projections: logits are x.x = 25 and x.r = 100, scaled by 1/sqrt(2)
    x = torch.tensor([[[-5.0, 0.0]]])
    r = torch.tensor([[[-20.0, 1.0]]])
    out, w = reference_attention(x, r, attn, return_weights=True)
    logits = (x @ torch.cat([x, r], 1).transpose(-1, -2)) / np.sqrt(2)
    assert float(logits[0, 0, 1] - logits[0, 0, 0]) >= 20
    torch.testing.assert_close(out, r, atol=1e-3, rtol=0)


# -- networks -------------------------------------------------------------------

@pytest.fixture(scope="module")
def model():
    return ColorizationModel(tiny_config(), seed=1).eval()


def test_reference_net_hidden_states(model):
    z = torch.randn(1, 4, 8, 8)
    a, b = model.reference_hidden(z), model.reference_hidden(z)
    assert len(a) == model.unet.attention_block_count == 5
    for x, y in zip(a, b):
        assert torch.equal(x, y)


def test_reference_net_zero_input_zero_bias():
    net = UNet(tiny_config().model)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias") or name.startswith("time_mlp"):
                p.zero_()
    collect = []
    net(torch.zeros(1, 4, 8, 8), torch.zeros(1, dtype=torch.long), collect=collect)
    assert len(collect) == 5 and all(bool((h == 0).all()) for h in collect)


def test_guider_zero_init_and_shapes(model):
    z = torch.randn(2, 4, 8, 8)
    cond = torch.randn(2, 64, 8, 8)
    res = guider_forward(model.sketch_guider, z, torch.tensor([3, 4]), cond)
    assert len(res) == 4 and all(bool((r == 0).all()) for r in res)
    shapes = [(2, 16, 8, 8), (2, 32, 4, 4), (2, 32, 2, 2), (2, 32, 2, 2)]
    assert [tuple(r.shape) for r in res] == shapes
    with pytest.raises(InvalidInputError):
        model.sketch_guider(z, torch.tensor([1, 1]), torch.randn(2, 64, 4, 4))


def test_guider_gradient_flow():
    cfg = tiny_config().model
    g = Guider(cfg, 5)
    opt = torch.optim.SGD(g.parameters(), lr=0.1)
    out = g(torch.randn(1, 4, 8, 8), torch.tensor([10]), torch.randn(1, 5, 8, 8))
    loss = sum(((o - 1) ** 2).mean() for o in out)
    loss.backward()
    opt.step()
    assert any(bool(m.weight.abs().sum() > 0) for m in list(g.zero_convs) + [g.zero_mid])


def test_guider_copies_unet(model):
    ref = model.unet.state_dict()
    for name, value in model.sketch_guider.state_dict().items():
        if name in ref and not name.startswith("zero"):
            assert torch.equal(value, ref[name])


def test_predict_noise_degenerates_to_unet(model):
    z = torch.randn(1, 4, 8, 8)
    t = torch.tensor([321])
    cond = ConditionBundle(sketch=torch.rand(1, 64, 8, 8), reference_hidden=[],
                           latent_control=torch.randn(1, 16, 8, 8))
    bare = model.unet(z, t)
    assert torch.equal(model.predict_noise(z, t, cond), bare)
    cond2 = ConditionBundle(sketch=cond.sketch, reference_hidden=None, latent_control=2 * cond.latent_control)
    assert torch.equal(model.predict_noise(z, t, cond2), bare)


def test_predict_noise_stage_checks(model):
    z = torch.randn(1, 4, 8, 8)
    cond = ConditionBundle(sketch=torch.rand(1, 64, 8, 8), latent_control=torch.zeros(1, 16, 8, 8))
    with pytest.raises(ConfigError):
        model.predict_noise(z, torch.tensor([1]), cond, stage=1)
    with pytest.raises(ConfigError):
        model.predict_noise(z, torch.tensor([1]), ConditionBundle(sketch=cond.sketch), stage=2)
    with pytest.raises(InvalidInputError):
        model.predict_noise(z, torch.tensor([1]), ConditionBundle(sketch=torch.rand(1, 64, 4, 4)))
    with pytest.raises(InvalidInputError):
        model.unet(z, torch.tensor([1]), ref_hiddens=[torch.zeros(1, 4, 16)])


def test_predict_noise_finite_fuzz(model):
    for seed in range(100):
        g = torch.Generator().manual_seed(seed)
        z = torch.randn(1, 4, 8, 8, generator=g) * 3
        sketch = torch.rand(1, 64, 8, 8, generator=g)
        hidden = model.reference_hidden(torch.randn(1, 4, 8, 8, generator=g))
        cond = ConditionBundle(sketch=sketch, reference_hidden=hidden, latent_control=torch.randn(1, 16, 8, 8, generator=g))
        with torch.no_grad():
            out = model.predict_noise(z, torch.randint(1000, (1,), generator=g), cond)
        assert torch.isfinite(out).all()


# -- sampler --------------------------------------------------------------------

def test_ddim_timesteps():
    np.testing.assert_array_equal(ddim_timesteps(1000, 1), [999])
    ts = ddim_timesteps(1000, 25)
    assert ts[0] == 999 and ts[-1] == 0 and len(ts) == 25 and np.all(np.diff(ts) < 0)
    assert len(ddim_timesteps(10, 10)) == 10
    with pytest.raises(InvalidInputError):
        ddim_timesteps(1000, 0)
    with pytest.raises(InvalidInputError):
        ddim_timesteps(10, 11)


def test_ddim_determinism_and_single_step(model):
    sketch = np.ones((64, 64))
    cond = build_condition(model, sketch, [])
    t1, t2 = [], []
    a = ddim_sample(model, cond, 4, seed=3, trajectory=t1)
    b = ddim_sample(model, cond, 4, seed=3, trajectory=t2)
    assert all(torch.equal(x, y) for x, y in zip(t1, t2)) and torch.equal(a, b)
    one = ddim_sample(model, cond, 1, seed=3)
    x = torch.randn(1, 4, 8, 8, generator=torch.Generator().manual_seed(3))
    with torch.no_grad():
        eps = model.predict_noise(x, torch.tensor([999]), cond)
    want = predict_x0(x, eps, torch.tensor([999]), model.schedule, clamp=model.config.sample.x0_clamp)
    torch.testing.assert_close(one, want, atol=1e-5, rtol=1e-5)


def test_ddim_x0_clamp():
    sketch = np.ones((64, 64))
    free = ColorizationModel(tiny_config(sample={"x0_clamp": None}), seed=0)
    tight = ColorizationModel(tiny_config(sample={"x0_clamp": 0.1}), seed=0)
    cond = build_condition(free, sketch, [])
    x = torch.randn(1, 4, 8, 8, generator=torch.Generator().manual_seed(3))
    with torch.no_grad():
        eps = free.predict_noise(x, torch.tensor([999]), cond)
    raw = predict_x0(x, eps, torch.tensor([999]), free.schedule)
    torch.testing.assert_close(ddim_sample(free, cond, 1, seed=3), raw, atol=1e-5, rtol=1e-5)
    assert raw.abs().max() > 0.1
    for steps in (1, 3):
        assert ddim_sample(tight, cond, steps, seed=3).abs().max() <= 0.1 + 1e-6


def test_sample_with_and_without_refs(model):
    s = build_dataset(tiny_config(), 2, seed=1)[0]
    out = sample(model, s.sketch, s.instances, steps=2, seed=0)
    assert out.shape == (64, 64, 3) and out.min() >= 0 and out.max() <= 1
    np.testing.assert_array_equal(out, sample(model, s.sketch, s.instances, steps=2, seed=0))
    bare = sample(model, s.sketch, [], steps=2, seed=0)
    assert bare.shape == (64, 64, 3) and np.isfinite(bare).all()


# -- autoencoder ----------------------------------------------------------------

def test_autoencoder_shapes_and_pretraining():
    cfg = tiny_config().model
    ae = Autoencoder(cfg)
    x = torch.rand(2, 3, 64, 64)
    z = ae.encode(x)
    assert z.shape == (2, 4, 8, 8) and ae.decode(z).shape == x.shape
    images = np.random.default_rng(0).random((4, 64, 64, 3))
    hist = pretrain_autoencoder(ae, images, steps=30, lr=2e-3, seed=0)
    assert len(hist) == 30 and hist[-1] < hist[0]
    with torch.no_grad():
        lat = ae.encode(torch.from_numpy(images.transpose(0, 3, 1, 2)).float())
    assert abs(float(lat.std()) - 1) < 1e-3
