"""Closed-form Gaussian / categorical computations and seeded sampling.

Every function works on torch tensors and reduces over the last axis, so the
same code handles one vector or a stack of them.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import ContractError, InfiniteDivergenceError

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype or torch.float64)


@dataclass
class DiagGaussian:
    """Diagonal Gaussian in mean / log-variance form."""

    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.log_var = as_tensor(self.log_var, self.mean.dtype)
        if self.mean.shape != self.log_var.shape:
            raise ContractError(
                f"mean shape {tuple(self.mean.shape)} != log_var shape {tuple(self.log_var.shape)}")

    @classmethod
    def standard(cls, n: int, dtype=torch.float64) -> "DiagGaussian":
        return cls(torch.zeros(n, dtype=dtype), torch.zeros(n, dtype=dtype))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def var(self) -> torch.Tensor:
        return torch.exp(self.log_var)

    @property
    def precision(self) -> torch.Tensor:
        return torch.exp(-self.log_var)

    def clamped(self) -> "DiagGaussian":
        return DiagGaussian(self.mean, self.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX))

    def __getitem__(self, idx) -> "DiagGaussian":
        return DiagGaussian(self.mean[idx], self.log_var[idx])


@dataclass
class CategoricalDist:
    probs: torch.Tensor

    def __post_init__(self):
        self.probs = as_tensor(self.probs)

    @classmethod
    def uniform(cls, k: int, dtype=torch.float64) -> "CategoricalDist":
        return cls(torch.full((k,), 1.0 / k, dtype=dtype))

    @property
    def k(self) -> int:
        return self.probs.shape[-1]

    def entropy(self) -> torch.Tensor:
        return -torch.special.xlogy(self.probs, self.probs).sum(-1)

    def __getitem__(self, idx) -> "CategoricalDist":
        return CategoricalDist(self.probs[idx])


class RngStream:
    """Seeded, counter-based random stream (numpy Philox).

    ``substream`` derives an independent stream from a purpose label and
    integer counters, so draws for e.g. epoch 3's shuffle do not depend on
    how many numbers were consumed before it.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ContractError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def substream(self, *labels) -> "RngStream":
        key = list(self.key)
        for label in labels:
            if isinstance(label, str):
                key.append(zlib.crc32(label.encode("utf-8")))
            else:
                key.append(int(label))
        return RngStream(self.seed, key)

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def normal_like(self, t: torch.Tensor) -> torch.Tensor:
        return torch.from_numpy(self.normal(tuple(t.shape))).to(t.dtype)

    def uniform(self, shape=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size, replace=False):
        return self._gen.choice(a, size=size, replace=replace)


def _check_dims(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape[-1] != b.shape[-1]:
        raise ContractError(f"{what}: dimension mismatch {a.shape[-1]} vs {b.shape[-1]}")


def gaussian_log_density(x, g: DiagGaussian) -> torch.Tensor:
    x = as_tensor(x, g.mean.dtype)
    _check_dims(x, g.mean, "gaussian_log_density")
    sq = (x - g.mean) ** 2 * torch.exp(-g.log_var)
    return (-HALF_LOG_2PI - 0.5 * g.log_var - 0.5 * sq).sum(-1)


def kl_gaussian_diag(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    _check_dims(q.mean, p.mean, "kl_gaussian_diag")
    ratio = torch.exp(q.log_var - p.log_var)
    maha = (q.mean - p.mean) ** 2 * torch.exp(-p.log_var)
    return 0.5 * (p.log_var - q.log_var + ratio + maha - 1.0).sum(-1)


def kl_categorical(q: CategoricalDist, p: CategoricalDist) -> torch.Tensor:
    _check_dims(q.probs, p.probs, "kl_categorical")
    if bool(((p.probs <= 0) & (q.probs > 0)).any()):
        raise InfiniteDivergenceError("q puts mass where p has none")
    return (torch.special.xlogy(q.probs, q.probs) - torch.special.xlogy(q.probs, p.probs)).sum(-1)


def product_of_diag_gaussians(contribs) -> DiagGaussian:
    """Precision-weighted product of diagonal Gaussians.

    ``contribs`` is either a sequence of DiagGaussian or a single DiagGaussian
    whose leading axis indexes the factors.
    """
    if isinstance(contribs, DiagGaussian):
        means, log_vars = contribs.mean, contribs.log_var
        if means.dim() < 2 or means.shape[0] == 0:
            raise ContractError("product needs a stacked, non-empty set of factors")
    else:
        contribs = list(contribs)
        if not contribs:
            raise ContractError("product of an empty sequence of Gaussians")
        dim = contribs[0].dim
        for c in contribs:
            if c.dim != dim:
                raise ContractError("product: factors differ in dimension")
        means = torch.stack([c.mean for c in contribs])
        log_vars = torch.stack([c.log_var for c in contribs])
    prec = torch.exp(-log_vars)
    total = prec.sum(0)
    mean = (prec * means).sum(0) / total
    return DiagGaussian(mean, (-torch.log(total)).clamp(LOG_VAR_MIN, LOG_VAR_MAX))


def reparameterize(g: DiagGaussian, rng: RngStream) -> torch.Tensor:
    eps = rng.normal_like(g.mean)
    return g.mean + torch.exp(0.5 * g.log_var) * eps


def sample_categorical(c: CategoricalDist, rng: RngStream) -> int:
    probs = c.probs.detach().cpu().numpy().astype(np.float64)
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.uniform() * cdf[-1], side="right"))
    return min(idx, len(probs) - 1)
