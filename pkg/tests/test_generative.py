import math

import numpy as np
import pytest
import torch
from scipy import stats

import ugvae.generative as gen
from conftest import small_setup, zero_weights
from ugvae.errors import ContractError
from ugvae.generative import (GenerativeConfig, decode_x, log_joint, log_joint_factors, prior_beta,
                              prior_d, prior_z_given, sample_group)
from ugvae.nets import init_bundle
from ugvae.numerics import RngStream, gaussian_log_density, kl_gaussian_diag

PEAK = -0.5 * math.log(2 * math.pi) - math.log(0.2)  # per-pixel log-density at the mean, sigma_x = 0.2


def test_peak_constant():
    assert PEAK == pytest.approx(0.6904994, abs=1e-7)


def test_prior_beta():
    cfg = GenerativeConfig(g_global=20)
    p = prior_beta(cfg)
    assert not p.mean.any() and not p.log_var.any() and p.dim == 20
    assert float(kl_gaussian_diag(p, p)) == 0.0
    one = prior_beta(GenerativeConfig(g_global=1))
    assert float(gaussian_log_density([0.0], one)) == pytest.approx(-0.9189385, abs=1e-7)


def test_prior_d():
    assert torch.allclose(prior_d(GenerativeConfig(K=10)).probs, torch.full((10,), 0.1, dtype=torch.float64))
    assert prior_d(GenerativeConfig(K=1)).probs.tolist() == [1.0]
    assert float(prior_d(GenerativeConfig(K=7)).entropy()) == pytest.approx(math.log(7), abs=1e-14)


def test_config_validation():
    with pytest.raises(ContractError):
        GenerativeConfig(sigma_x=0.0)
    with pytest.raises(ContractError):
        GenerativeConfig(K=0)


def test_prior_z_zero_weights_and_range():
    b = zero_weights(init_bundle(8, 3, 2, 4, seed=0, dtype=torch.float64))
    for k in range(4):
        p = prior_z_given(k, torch.tensor([0.4, -2.0], dtype=torch.float64), b)
        assert not p.mean.any() and not p.log_var.any()
    with pytest.raises(ContractError):
        prior_z_given(4, torch.zeros(2), b)
    with pytest.raises(ContractError):
        prior_z_given(-1, torch.zeros(2), b)


def test_prior_z_deterministic():
    b, _, _ = small_setup(1)
    beta = torch.tensor([0.3, 0.1], dtype=torch.float64)
    assert torch.equal(prior_z_given(1, beta, b).mean, prior_z_given(1, beta, b).mean)


def test_decode_zero_weights():
    b = zero_weights(init_bundle(784, 10, 20, 10, seed=0, dtype=torch.float64))
    cfg = GenerativeConfig()
    with torch.no_grad():
        px = decode_x(torch.zeros(10), torch.zeros(20), b, cfg)
    assert torch.equal(px.mean, torch.full((784,), 0.5, dtype=torch.float64))
    assert torch.allclose(px.var, torch.full((784,), 0.04, dtype=torch.float64))
    assert float(gaussian_log_density(px.mean, px)) == pytest.approx(784 * PEAK, abs=1e-9)
    assert float(gaussian_log_density(px.mean, px)) == pytest.approx(541.3515, abs=1e-4)


def test_decode_mean_in_unit_interval():
    b, cfg, _ = small_setup(2)
    r = RngStream(0)
    m = decode_x(torch.from_numpy(r.normal((200, 2)) * 5), torch.from_numpy(r.normal((200, 2)) * 5), b, cfg).mean
    assert float(m.min()) > 0 and float(m.max()) < 1


def test_sample_group_shapes_and_k1():
    cfg = GenerativeConfig(D=784, d_local=10, g_global=20, K=1, B=128)
    b = init_bundle(784, 10, 20, 1, seed=0)
    s = sample_group(cfg, b, RngStream(0))
    assert s.X.shape == (128, 784) and s.Z.shape == (128, 10) and s.beta.shape == (20,)
    assert not s.components.any()


def test_sample_group_components_cover_range():
    cfg = GenerativeConfig(D=4, d_local=2, g_global=2, K=3, B=300)
    s = sample_group(cfg, init_bundle(4, 2, 2, 3, seed=0), RngStream(1))
    assert set(s.components.tolist()) == {0, 1, 2}


def test_beta_draws_center_on_zero():
    g, n = 20, 10_000
    cfg = GenerativeConfig(D=2, d_local=1, g_global=g, K=1, B=1)
    b = init_bundle(2, 1, g, 1, seed=0, hidden=4, feature=4, dtype=torch.float64)
    r = RngStream(3)
    betas = np.stack([sample_group(cfg, b, r.substream(i)).beta.numpy() for i in range(n)])
    assert abs(betas.mean()) <= 4 / math.sqrt(n * g)
    assert np.all(np.abs(betas.mean(0)) <= 4 / math.sqrt(n))


def test_zero_weight_z_marginals_standard_normal():
    cfg = GenerativeConfig(D=2, d_local=1, g_global=2, K=3, B=100)
    b = zero_weights(init_bundle(2, 1, 2, 3, seed=0, hidden=4, feature=4, dtype=torch.float64))
    r = RngStream(8)
    zs = np.concatenate([sample_group(cfg, b, r.substream(i)).Z.numpy().ravel() for i in range(100)])
    assert len(zs) == 10_000
    assert stats.kstest(zs, "norm").pvalue > 1e-3


def test_log_joint_is_sum_of_factors():
    b, cfg, _ = small_setup(4, K=3)
    for i in range(5):
        s = sample_group(cfg, b, RngStream(i))
        f = log_joint_factors(s, b, cfg)
        by_hand = 0.0
        for j in range(cfg.B):
            by_hand += float(gaussian_log_density(s.X[j], decode_x(s.Z[j], s.beta, b, cfg)))
            by_hand += float(gaussian_log_density(s.Z[j], prior_z_given(int(s.components[j]), s.beta, b)))
            by_hand += math.log(1.0 / cfg.K)
        by_hand += float(gaussian_log_density(s.beta, prior_beta(cfg)))
        assert float(log_joint(s, b, cfg)) == pytest.approx(by_hand, abs=1e-10)
        assert float(sum(f.values())) == pytest.approx(by_hand, abs=1e-10)


def test_beta_shared_across_group(monkeypatch):
    b, cfg, _ = small_setup(5)
    seen = []
    real = gen.decode_x

    def spy(z, beta, bundle, config):
        seen.append(beta)
        return real(z, beta, bundle, config)

    monkeypatch.setattr(gen, "decode_x", spy)
    s = sample_group(cfg, b, RngStream(0))
    assert len(seen) == cfg.B
    assert all(x is seen[0] for x in seen)
    assert seen[0] is s.beta
