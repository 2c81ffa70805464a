import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from fairvae.config import ArchConfig
from fairvae.perceptual import stub_extractor, total_training_loss
from fairvae.vae import (
    VAE,
    LatentGaussian,
    NumericError,
    ShapeError,
    elbo,
    images_to_tensor,
    kl_to_standard_normal,
    load_checkpoint,
    reparameterize,
    save_checkpoint,
    tensor_to_images,
)

from conftest import TINY_ARCH, IdentityStub


def test_default_arch_shapes():
    model = VAE().eval()
    x = torch.rand(1, 3, 256, 256)
    g = model.encode(x)
    assert g.mu.shape == g.log_var.shape == (1, 64, 8, 8)
    assert model.decode(g.mu).shape == x.shape


def test_output_in_unit_interval(tiny_arch):
    model = VAE(tiny_arch).eval()
    x_hat, _ = model(torch.rand(5, 3, 16, 16))
    assert x_hat.min() >= 0 and x_hat.max() <= 1


@pytest.mark.parametrize("shape", [(2, 3, 32, 32), (2, 1, 16, 16), (3, 16, 16)])
def test_wrong_image_shape(tiny_arch, shape):
    with pytest.raises(ShapeError):
        VAE(tiny_arch).encode(torch.zeros(shape))


def test_wrong_latent_shape(tiny_arch):
    with pytest.raises(ShapeError):
        VAE(tiny_arch).decode(torch.zeros(1, 4, 3, 3))


def test_encode_is_deterministic(tiny_arch):
    model = VAE(tiny_arch).eval()
    x = torch.rand(3, 3, 16, 16)
    a, b = model.encode(x), model.encode(x)
    assert torch.equal(a.mu, b.mu) and torch.equal(a.log_var, b.log_var)


def test_decoder_continuity(tiny_arch):
    torch.manual_seed(0)
    model = VAE(tiny_arch).eval()
    z = torch.randn(1, *model.latent_shape)
    d = torch.randn_like(z)
    d /= d.norm()
    base = model.decode(z)
    diffs = [(model.decode(z + t * d) - base).abs().max().item() for t in (1e-2, 1e-3, 1e-4)]
    assert diffs[0] > diffs[1] > diffs[2]
    assert diffs[2] < 1e-3


def test_reparameterize_zero_noise_and_degenerate_variance():
    mu = torch.randn(4, 2, 2, 2)
    g = LatentGaussian(mu, torch.randn_like(mu))
    assert torch.equal(reparameterize(g, torch.zeros_like(mu)), mu)
    tight = LatentGaussian(mu, torch.full_like(mu, -60.0))
    assert torch.allclose(reparameterize(tight, torch.randn_like(mu)), mu, atol=1e-12)


def test_reparameterize_linear_in_noise():
    g = LatentGaussian(torch.randn(2, 3, 1, 1), torch.randn(2, 3, 1, 1))
    e1, e2 = torch.randn(2, 3, 1, 1), torch.randn(2, 3, 1, 1)
    lhs = reparameterize(g, 2 * e1 + 3 * e2) - g.mu
    rhs = 2 * (reparameterize(g, e1) - g.mu) + 3 * (reparameterize(g, e2) - g.mu)
    assert torch.allclose(lhs, rhs, atol=1e-5)


def test_reparameterize_moments():
    g = LatentGaussian(torch.tensor([[1.5, -0.5]]), torch.tensor([[0.4, -1.2]]))
    gen = torch.Generator().manual_seed(0)
    z = torch.stack([reparameterize(g, torch.randn(1, 2, generator=gen)) for _ in range(20000)])
    assert torch.allclose(z.mean(0), g.mu, atol=0.03)
    assert torch.allclose(z.std(0), g.std(), rtol=0.03)


def test_reparameterize_rejects_mismatched_noise():
    g = LatentGaussian(torch.zeros(1, 2), torch.zeros(1, 2))
    with pytest.raises(ShapeError):
        reparameterize(g, torch.zeros(1, 3))


def test_kl_known_values():
    zero = LatentGaussian(torch.zeros(2, 4, 2, 2), torch.zeros(2, 4, 2, 2))
    assert torch.equal(kl_to_standard_normal(zero), torch.zeros(2))
    one = LatentGaussian(torch.ones(1, 1), torch.zeros(1, 1))
    assert kl_to_standard_normal(one).item() == pytest.approx(0.5)


@settings(max_examples=200, deadline=None)
@given(
    mu=st.lists(st.floats(-50, 50), min_size=1, max_size=8),
    lv=st.lists(st.floats(-10, 10), min_size=8, max_size=8),
)
def test_kl_nonnegative(mu, lv):
    m = torch.tensor(mu, dtype=torch.float64)[None]
    g = LatentGaussian(m, torch.tensor(lv[: len(mu)], dtype=torch.float64)[None])
    assert kl_to_standard_normal(g).item() >= 0


def test_kl_nonnegative_random_batch():
    gen = torch.Generator().manual_seed(1)
    g = LatentGaussian(torch.randn(1000, 4, 2, 2, generator=gen) * 3, torch.rand(1000, 4, 2, 2, generator=gen) * 20 - 10)
    assert (kl_to_standard_normal(g) >= 0).all()


def test_kl_matches_monte_carlo_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        mu = rng.uniform(-2, 2, size=16)
        lv = rng.uniform(-2, 2, size=16)
        sd = np.exp(0.5 * lv)
        z = mu + sd * rng.standard_normal((100_000, 16))
        mc = (norm.logpdf(z, mu, sd) - norm.logpdf(z)).sum(axis=1).mean()
        g = LatentGaussian(torch.tensor(mu)[None], torch.tensor(lv)[None])
        closed = kl_to_standard_normal(g).item()
        assert abs(closed - mc) / closed < 0.01


def test_kl_non_finite_raises():
    with pytest.raises(NumericError):
        kl_to_standard_normal(LatentGaussian(torch.tensor([[float("nan")]]), torch.zeros(1, 1)))


def test_identity_stub_has_zero_reconstruction_term():
    x = torch.rand(3, 3, 8, 8)
    terms = elbo(IdentityStub(log_var=-60.0), x, torch.randn_like(x))
    assert torch.allclose(terms.recon, torch.zeros(3), atol=1e-10)
    assert torch.allclose(terms.mse, torch.zeros(3), atol=1e-10)


def test_elbo_decomposition():
    x = torch.rand(2, 3, 8, 8)
    eps = torch.zeros_like(x)
    stub = IdentityStub(log_var=0.0)
    terms = elbo(stub, x, eps)
    assert torch.allclose(terms.kl, 0.5 * x.pow(2).flatten(1).sum(1))
    assert torch.allclose(terms.elbo, -terms.recon - terms.kl)


def test_log_var_clamped(tiny_arch):
    model = VAE(tiny_arch).eval()
    with torch.no_grad():
        model.latent_head.bias[tiny_arch.latent_channels :] = 1e4
    assert model.encode(torch.rand(1, 3, 16, 16)).log_var.max().item() == 10.0


def test_fresh_posterior_has_unit_variance(tiny_arch):
    g = VAE(tiny_arch).eval().encode(torch.rand(2, 3, 16, 16))
    assert torch.equal(g.log_var, torch.zeros_like(g.log_var))


def test_gradient_check_against_central_differences():
    torch.manual_seed(0)
    model = VAE(TINY_ARCH).double().train()
    extractor = stub_extractor().double()
    x = torch.rand(4, 3, 16, 16, dtype=torch.float64)
    eps = torch.randn(4, *model.latent_shape, dtype=torch.float64)

    def loss():
        return total_training_loss(model, extractor, x, eps).total.sum()

    model.zero_grad()
    loss().backward()
    entries = [(p, i) for p in model.parameters() for i in range(p.numel())]
    # conv biases feeding batch norm have an identically zero gradient; sample where the loss depends on the entry
    live = [(p, i) for p, i in entries if abs(p.grad.view(-1)[i].item()) > 1e-8]
    rng = np.random.default_rng(0)
    h = 1e-4
    for k in rng.choice(len(live), size=20, replace=False):
        p, i = live[k]
        flat = p.data.view(-1)
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + h
            up = loss().item()
            flat[i] = orig - h
            down = loss().item()
            flat[i] = orig
        numeric = (up - down) / (2 * h)
        analytic = p.grad.view(-1)[i].item()
        assert abs(analytic - numeric) / max(abs(analytic), abs(numeric)) < 1e-3


def test_overfits_single_image():
    torch.manual_seed(0)
    model = VAE(TINY_ARCH).train()
    x = torch.rand(1, 3, 16, 16)
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    gen = torch.Generator().manual_seed(0)
    first = None
    for _ in range(300):
        opt.zero_grad()
        t = elbo(model, x, torch.randn(1, *model.latent_shape, generator=gen))
        t.elbo.neg().sum().backward()
        opt.step()
        first = first if first is not None else t.recon.item()
    assert t.recon.item() < 0.2 * first


def test_image_tensor_round_trip():
    imgs = np.random.default_rng(0).uniform(size=(2, 5, 5, 3)).astype(np.float32)
    t = images_to_tensor(imgs)
    assert t.shape == (2, 3, 5, 5)
    np.testing.assert_array_equal(tensor_to_images(t), imgs)
    assert images_to_tensor(imgs[0]).shape == (1, 3, 5, 5)


def test_checkpoint_round_trip(tmp_path, tiny_arch):
    model = VAE(tiny_arch).eval()
    save_checkpoint(model, tmp_path / "m.pt", config_hash="abc")
    loaded, blob = load_checkpoint(tmp_path / "m.pt")
    x = torch.rand(2, 3, 16, 16)
    assert torch.equal(loaded.encode(x).mu, model.encode(x).mu)
    assert blob["config_hash"] == "abc"
    assert tuple(blob["latent_shape"]) == (4, 2, 2)


def test_arch_rejects_non_power_of_two_ratio():
    with pytest.raises(ValueError):
        ArchConfig(input_side=24, latent_side=4).n_stages
