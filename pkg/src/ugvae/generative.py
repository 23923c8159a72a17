"""Generative side of the model: priors, decoder likelihood, ancestral sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError
from .nets import NetworkBundle
from .numerics import (CategoricalDist, DiagGaussian, RngStream, as_tensor,
                       gaussian_log_density, reparameterize, sample_categorical)


@dataclass(frozen=True)
class GenerativeConfig:
    D: int = 784
    d_local: int = 10
    g_global: int = 20
    K: int = 10
    sigma_x: float = 0.2
    B: int = 128

    def __post_init__(self):
        for name in ("D", "d_local", "g_global", "K", "B"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if not self.sigma_x > 0:
            raise ContractError("sigma_x must be > 0")

    @classmethod
    def from_bundle(cls, bundle: NetworkBundle, sigma_x: float = 0.2, B: int = 128):
        return cls(bundle.D, bundle.d, bundle.g, bundle.K, sigma_x, B)


@dataclass
class GroupSample:
    beta: torch.Tensor
    components: np.ndarray
    Z: torch.Tensor
    X: torch.Tensor


def prior_beta(config: GenerativeConfig, dtype=torch.float64) -> DiagGaussian:
    return DiagGaussian.standard(config.g_global, dtype)


def prior_d(config: GenerativeConfig, dtype=torch.float64) -> CategoricalDist:
    return CategoricalDist.uniform(config.K, dtype)


def prior_z_given(k: int, beta, bundle: NetworkBundle) -> DiagGaussian:
    if not 0 <= k < bundle.K:
        raise ContractError(f"component {k} out of range [0, {bundle.K})")
    return bundle.theta_z[k](as_tensor(beta, bundle.dtype))


def prior_z_all(beta, bundle: NetworkBundle) -> DiagGaussian:
    """Stack p(z | d=k, beta) over k; leading axis of the result is k."""
    beta = as_tensor(beta, bundle.dtype)
    heads = [net(beta) for net in bundle.theta_z]
    return DiagGaussian(torch.stack([h.mean for h in heads]), torch.stack([h.log_var for h in heads]))


def decode_x(z, beta, bundle: NetworkBundle, config: GenerativeConfig) -> DiagGaussian:
    z = as_tensor(z, bundle.dtype)
    beta = as_tensor(beta, bundle.dtype)
    if z.shape[-1] != bundle.d or beta.shape[-1] != bundle.g:
        raise ContractError("decode_x: latent widths do not match the bundle")
    if beta.dim() < z.dim():
        beta = beta.expand(*z.shape[:-1], beta.shape[-1])
    mean = bundle.theta_x(torch.cat([z, beta], dim=-1))
    log_var = torch.full_like(mean, 2.0 * math.log(config.sigma_x))
    return DiagGaussian(mean, log_var)


@torch.no_grad()
def sample_group(config: GenerativeConfig, bundle: NetworkBundle, rng: RngStream) -> GroupSample:
    """Ancestral draw: beta, then per sample d_i, z_i | d_i, beta, x_i | z_i, beta."""
    dtype = bundle.dtype
    beta = reparameterize(prior_beta(config, dtype), rng)
    pd = prior_d(config, dtype)
    comps = np.zeros(config.B, dtype=np.int64)
    Z = torch.empty(config.B, config.d_local, dtype=dtype)
    X = torch.empty(config.B, config.D, dtype=dtype)
    for i in range(config.B):
        comps[i] = sample_categorical(pd, rng)
        Z[i] = reparameterize(prior_z_given(int(comps[i]), beta, bundle), rng)
        X[i] = reparameterize(decode_x(Z[i], beta, bundle, config), rng)
    return GroupSample(beta, comps, Z, X)


def log_joint_factors(sample: GroupSample, bundle: NetworkBundle, config: GenerativeConfig) -> dict:
    """The four log-factors of p(X, Z, d, beta) for one group."""
    dtype = bundle.dtype
    beta = sample.beta
    log_px = gaussian_log_density(sample.X, decode_x(sample.Z, beta, bundle, config)).sum()
    priors = prior_z_all(beta, bundle)
    comps = torch.as_tensor(sample.components)
    log_pz = gaussian_log_density(sample.Z, priors[comps]).sum()
    log_pd = torch.log(prior_d(config, dtype).probs[comps]).sum()
    log_pbeta = gaussian_log_density(beta, prior_beta(config, dtype))
    return dict(x=log_px, z=log_pz, d=log_pd, beta=log_pbeta)


def log_joint(sample: GroupSample, bundle: NetworkBundle, config: GenerativeConfig) -> torch.Tensor:
    f = log_joint_factors(sample, bundle, config)
    return f["x"] + f["z"] + f["d"] + f["beta"]
