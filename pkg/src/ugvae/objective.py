"""Group ELBO with the discrete component marginalized analytically."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import TrainingDivergence
from .generative import GenerativeConfig, decode_x, prior_beta, prior_d, prior_z_all
from .inference import GroupPosterior, infer_group
from .nets import LossNode, NetworkBundle
from .numerics import (CategoricalDist, DiagGaussian, RngStream, gaussian_log_density,
                       kl_categorical, kl_gaussian_diag)


@dataclass
class ElboBreakdown:
    recon: torch.Tensor
    kl_z: torch.Tensor
    kl_d: torch.Tensor
    kl_beta: torch.Tensor
    elbo: torch.Tensor
    per_sample: torch.Tensor  # B x 3 columns: recon, kl_z, kl_d
    posterior: GroupPosterior | None = None

    def as_dict(self, scale: float = 1.0) -> dict:
        return {k: float(getattr(self, k).detach()) * scale
                for k in ("elbo", "recon", "kl_z", "kl_d", "kl_beta")}

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_dict().values())


def local_elbo(x, qz: DiagGaussian, z: torch.Tensor, qd: CategoricalDist, beta: torch.Tensor,
               bundle: NetworkBundle, config: GenerativeConfig):
    """Per-sample (recon, kl_z, kl_d); leading batch axes are allowed.

    kl_z is the exact expectation over d ~ q(d|z) of KL(q(z|x) || p(z|d, beta)).
    """
    recon = gaussian_log_density(x, decode_x(z, beta, bundle, config))
    priors = prior_z_all(beta, bundle)  # K x d
    q = DiagGaussian(qz.mean.unsqueeze(-2), qz.log_var.unsqueeze(-2))
    kl_each = kl_gaussian_diag(q, priors)  # ... x K
    kl_z = (qd.probs * kl_each).sum(-1)
    uniform = prior_d(config, qd.probs.dtype)
    kl_d = kl_categorical(qd, uniform)
    return recon, kl_z, kl_d


def group_elbo(X, bundle: NetworkBundle, config: GenerativeConfig, rng: RngStream | None = None,
               **noise) -> ElboBreakdown:
    """ELBO of one group with a single shared beta draw.

    q(beta|X, Z) is a deterministic function of the soft mixture weights, so
    its KL to the prior is evaluated once per group.
    """
    post = infer_group(X, bundle, rng, **noise)
    X = torch.as_tensor(X).to(bundle.dtype)
    recon, kl_z, kl_d = local_elbo(X, post.qz, post.z, post.qd, post.beta, bundle, config)
    kl_beta = kl_gaussian_diag(post.qbeta, prior_beta(config, bundle.dtype))
    r, kz, kd = recon.sum(), kl_z.sum(), kl_d.sum()
    elbo = r - kz - kd - kl_beta
    return ElboBreakdown(r, kz, kd, kl_beta, elbo, torch.stack([recon, kl_z, kl_d], dim=-1), post)


def loss(X, bundle: NetworkBundle, config: GenerativeConfig, rng: RngStream | None = None,
         **noise) -> LossNode:
    """Negative ELBO per sample, ready for ``backward``."""
    br = group_elbo(X, bundle, config, rng, **noise)
    value = -br.elbo / br.per_sample.shape[0]
    if not bool(torch.isfinite(value)):
        raise TrainingDivergence(f"non-finite loss: {br.as_dict()}", breakdown=br)
    return LossNode(value, br)
