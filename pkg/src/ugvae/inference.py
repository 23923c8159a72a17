"""Amortized posterior q(Z|X) q(d|Z) q(beta|X,Z) for one group."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ContractError
from .nets import NetworkBundle
from .numerics import (CategoricalDist, DiagGaussian, RngStream, as_tensor,
                       product_of_diag_gaussians)


@dataclass
class GroupPosterior:
    qz: DiagGaussian  # B x d
    z: torch.Tensor  # B x d, one reparameterized draw per sample
    qd: CategoricalDist  # B x K
    contributions: DiagGaussian  # B x g
    qbeta: DiagGaussian  # g
    beta: torch.Tensor  # g, shared by the whole group

    @property
    def size(self) -> int:
        return self.z.shape[0]


def encode_z(x, bundle: NetworkBundle) -> DiagGaussian:
    return bundle.phi_z(bundle.h(as_tensor(x, bundle.dtype)))


def classify_d(z, bundle: NetworkBundle) -> CategoricalDist:
    return bundle.phi_d(as_tensor(z, bundle.dtype))


def _contribution(features: torch.Tensor, pi: torch.Tensor, bundle: NetworkBundle) -> DiagGaussian:
    return bundle.phi_beta(torch.cat([features, pi], dim=-1))


def beta_contribution(x, pi, bundle: NetworkBundle) -> DiagGaussian:
    """Per-sample Gaussian factor of q(beta); input is [h(x), pi]."""
    probs = pi.probs if isinstance(pi, CategoricalDist) else as_tensor(pi, bundle.dtype)
    return _contribution(bundle.h(as_tensor(x, bundle.dtype)), probs.to(bundle.dtype), bundle)


def infer_group(X, bundle: NetworkBundle, rng: RngStream | None = None, *,
                eps_z: torch.Tensor | None = None,
                eps_beta: torch.Tensor | None = None) -> GroupPosterior:
    """Encode a group and aggregate its global posterior.

    Noise comes from ``rng`` substreams "z" and "beta" unless explicit
    ``eps_z`` (B x d) / ``eps_beta`` (g) are passed.
    """
    X = as_tensor(X, bundle.dtype)
    if X.dim() != 2 or X.shape[0] == 0:
        raise ContractError("infer_group needs a non-empty B x D matrix")
    B = X.shape[0]
    if eps_z is None or eps_beta is None:
        if rng is None:
            raise ContractError("infer_group needs an rng or explicit noise")
    if eps_z is None:
        eps_z = torch.from_numpy(rng.substream("z").normal((B, bundle.d)))
    if eps_beta is None:
        eps_beta = torch.from_numpy(rng.substream("beta").normal((bundle.g,)))
    eps_z = as_tensor(eps_z, bundle.dtype)
    eps_beta = as_tensor(eps_beta, bundle.dtype)

    feats = bundle.h(X)
    qz = bundle.phi_z(feats)
    z = qz.mean + torch.exp(0.5 * qz.log_var) * eps_z
    qd = bundle.phi_d(z)
    contribs = _contribution(feats, qd.probs, bundle)
    qbeta = product_of_diag_gaussians(contribs)
    beta = qbeta.mean + torch.exp(0.5 * qbeta.log_var) * eps_beta
    return GroupPosterior(qz, z, qd, contribs, qbeta, beta)
