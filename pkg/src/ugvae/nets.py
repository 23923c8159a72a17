"""MLP building blocks, the UG-VAE network bundle, and the gradient contract.

Reverse-mode differentiation is delegated to torch autograd; ``LossNode``
wraps a scalar so that a trace can only be consumed once, and
``gradient_check`` compares autograd against central finite differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ContractError
from .numerics import LOG_VAR_MAX, LOG_VAR_MIN, CategoricalDist, DiagGaussian, RngStream

HIDDEN_ACTIVATIONS = {"relu": torch.relu, "tanh": torch.tanh}
HEADS = ("linear", "relu", "sigmoid", "softmax", "split-gaussian")


@dataclass
class ParamTensor:
    name: str
    shape: tuple
    values: np.ndarray
    grad: np.ndarray


@dataclass(frozen=True)
class MlpSpec:
    sizes: tuple
    hidden: str = "relu"
    head: str = "linear"

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ContractError("an MLP needs at least input and output sizes")
        if self.hidden not in HIDDEN_ACTIVATIONS:
            raise ContractError(f"unknown hidden activation {self.hidden!r}")
        if self.head not in HEADS:
            raise ContractError(f"unknown output head {self.head!r}")
        if self.head == "split-gaussian" and self.sizes[-1] % 2:
            raise ContractError("split-gaussian head needs an even output width")


class Mlp(nn.Module):
    """Stack of affine layers with a hidden nonlinearity and a typed head.

    A split-gaussian head returns a DiagGaussian whose first half is the mean
    and second half the (clamped) log-variance; a softmax head returns a
    CategoricalDist.
    """

    def __init__(self, spec: MlpSpec):
        super().__init__()
        self.spec = spec
        self.layers = nn.ModuleList(
            nn.Linear(a, b) for a, b in zip(spec.sizes[:-1], spec.sizes[1:]))
        self._act = HIDDEN_ACTIVATIONS[spec.hidden]

    @property
    def in_features(self) -> int:
        return self.spec.sizes[0]

    def forward(self, x: torch.Tensor):
        if x.shape[-1] != self.in_features:
            raise ContractError(f"input width {x.shape[-1]} != expected {self.in_features}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self._act(x)
        head = self.spec.head
        if head == "linear":
            return x
        if head == "relu":
            return torch.relu(x)
        if head == "sigmoid":
            return torch.sigmoid(x)
        if head == "softmax":
            return CategoricalDist(torch.softmax(x, dim=-1))
        half = x.shape[-1] // 2
        return DiagGaussian(x[..., :half], x[..., half:].clamp(LOG_VAR_MIN, LOG_VAR_MAX))


class NetworkBundle(nn.Module):
    """Every learnable function of the model.

    h         pre-encoder, D -> feature (ReLU)
    phi_z     q(z|x) head, feature -> 2d
    phi_d     q(d|z), d -> hidden -> K (tanh, softmax)
    phi_beta  per-sample global contribution, feature + K -> 2g
    theta_z   one prior network per component, g -> hidden -> 2d
    theta_x   decoder mean, d + g -> hidden -> D (ReLU, sigmoid)
    """

    def __init__(self, D: int, d: int, g: int, K: int, hidden: int = 256, feature: int = 256):
        super().__init__()
        for name, v in dict(D=D, d=d, g=g, K=K, hidden=hidden, feature=feature).items():
            if int(v) < 1:
                raise ContractError(f"{name} must be >= 1, got {v}")
        self.D, self.d, self.g, self.K = int(D), int(d), int(g), int(K)
        self.hidden, self.feature = int(hidden), int(feature)
        self.h = Mlp(MlpSpec((D, feature), head="relu"))
        self.phi_z = Mlp(MlpSpec((feature, 2 * d), head="split-gaussian"))
        self.phi_d = Mlp(MlpSpec((d, hidden, K), hidden="tanh", head="softmax"))
        self.phi_beta = Mlp(MlpSpec((feature + K, 2 * g), head="split-gaussian"))
        self.theta_z = nn.ModuleList(
            Mlp(MlpSpec((g, hidden, 2 * d), hidden="relu", head="split-gaussian")) for _ in range(K))
        self.theta_x = Mlp(MlpSpec((d + g, hidden, D), hidden="relu", head="sigmoid"))

    @property
    def dtype(self) -> torch.dtype:
        return self.h.layers[0].weight.dtype

    def dims(self) -> dict:
        return dict(D=self.D, d=self.d, g=self.g, K=self.K, hidden=self.hidden, feature=self.feature)

    def param_tensors(self) -> list[ParamTensor]:
        out = []
        for name, p in self.named_parameters():
            grad = p.grad if p.grad is not None else torch.zeros_like(p)
            out.append(ParamTensor(name, tuple(p.shape), p.detach().cpu().numpy().copy(),
                                   grad.detach().cpu().numpy().copy()))
        return out

    def zero_grad(self, set_to_none: bool = False):
        for p in self.parameters():
            if p.grad is None or set_to_none:
                p.grad = None if set_to_none else torch.zeros_like(p)
            else:
                p.grad.zero_()


def init_bundle(D: int, d: int, g: int, K: int, seed: int | RngStream = 0, *,
                hidden: int = 256, feature: int = 256, dtype=torch.float32) -> NetworkBundle:
    """Glorot-uniform weights and zero biases, drawn from a seeded stream."""
    bundle = NetworkBundle(D, d, g, K, hidden=hidden, feature=feature)
    rng = seed if isinstance(seed, RngStream) else RngStream(seed)
    rng = rng.substream("init")
    with torch.no_grad():
        for name, p in bundle.named_parameters():
            if name.endswith("bias"):
                p.zero_()
                continue
            fan_out, fan_in = p.shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            vals = rng.substream(name).uniform(tuple(p.shape), -bound, bound)
            p.copy_(torch.from_numpy(vals))
    return bundle.to(dtype)


class LossNode:
    """A scalar loss whose trace may be back-propagated exactly once."""

    def __init__(self, value: torch.Tensor, breakdown=None):
        if value.dim() != 0:
            raise ContractError("loss must be a scalar")
        self.value = value
        self.breakdown = breakdown
        self._consumed = False

    def item(self) -> float:
        return float(self.value.detach())

    def backward(self, bundle: nn.Module | None = None):
        if self._consumed:
            raise ContractError("backward called twice on the same loss trace")
        self._consumed = True
        if self.value.requires_grad:
            self.value.backward()
        if bundle is not None:
            for p in bundle.parameters():
                if p.grad is None:
                    p.grad = torch.zeros_like(p)


def backward(loss: LossNode | torch.Tensor, bundle: nn.Module | None = None):
    if isinstance(loss, torch.Tensor):
        loss = LossNode(loss)
    loss.backward(bundle)


@dataclass
class GradCheckReport:
    per_tensor: dict = field(default_factory=dict)  # name -> (max_rel, mean_rel)
    max_rel: float = 0.0
    mean_rel: float = 0.0
    frac_within: float = 1.0
    n_coords: int = 0
    relu_margin: float = float("inf")  # smallest |pre-activation| feeding a ReLU at the base point
    tolerance: float = 0.0
    max_tolerance: float | None = None
    passed: bool = False

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: {self.n_coords} coords, mean rel {self.mean_rel:.3e}, "
                f"max rel {self.max_rel:.3e}, within tol {self.frac_within:.4f}, "
                f"relu margin {self.relu_margin:.2e}")


def _relu_inputs(bundle: nn.Module) -> list[nn.Linear]:
    out = []
    for m in bundle.modules():
        if isinstance(m, Mlp):
            if m.spec.hidden == "relu":
                out.extend(m.layers[:-1])
            if m.spec.head == "relu":
                out.append(m.layers[-1])
    return out


def relu_margin(bundle: nn.Module, fn: Callable[[], object]) -> float:
    """Smallest |pre-activation| entering any ReLU while ``fn()`` runs.

    Central differences with step h are only meaningful when every kink is
    further than h times the local input scale from the evaluation point.
    """
    seen = [float("inf")]

    def hook(_mod, _inp, out):
        seen[0] = min(seen[0], float(out.detach().abs().min()))

    handles = [lin.register_forward_hook(hook) for lin in _relu_inputs(bundle)]
    try:
        fn()
    finally:
        for h in handles:
            h.remove()
    return seen[0]


def _scalar(out) -> torch.Tensor:
    return out.value if isinstance(out, LossNode) else out


def gradient_check(bundle: nn.Module, loss_builder: Callable[[nn.Module], object],
                   tolerance: float = 1e-4, *, max_tolerance: float | None = None,
                   step: float = 1e-4, abs_floor: float = 1e-8,
                   params: Sequence[str] | None = None) -> GradCheckReport:
    """Compare autograd gradients with central finite differences.

    ``loss_builder(bundle)`` must be deterministic (fixed noise). Relative
    error per coordinate is |a - n| / max(|a|, |n|, abs_floor). The check
    passes when the mean relative error is <= ``tolerance`` and, if given,
    the largest one is <= ``max_tolerance``.
    """
    bundle.zero_grad(set_to_none=True)
    report = GradCheckReport(tolerance=tolerance, max_tolerance=max_tolerance)
    with torch.no_grad():
        report.relu_margin = relu_margin(bundle, lambda: loss_builder(bundle))
    loss = loss_builder(bundle)
    if isinstance(loss, LossNode):
        loss.backward(bundle)
    else:
        backward(loss, bundle)
    named = dict(bundle.named_parameters())
    names = list(params) if params is not None else list(named)
    all_err = []
    with torch.no_grad():
        for name in names:
            p = named[name]
            analytic = p.grad.detach().reshape(-1).clone()
            flat = p.data.view(-1)
            numeric = torch.empty_like(analytic)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                up = float(_scalar(loss_builder(bundle)))
                flat[j] = orig - step
                down = float(_scalar(loss_builder(bundle)))
                flat[j] = orig
                numeric[j] = (up - down) / (2 * step)
            a = analytic.double().numpy()
            n = numeric.double().numpy()
            err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), abs_floor)
            report.per_tensor[name] = (float(err.max()), float(err.mean()))
            all_err.append(err)
    errs = np.concatenate(all_err) if all_err else np.zeros(0)
    report.n_coords = int(errs.size)
    if errs.size:
        report.max_rel = float(errs.max())
        report.mean_rel = float(errs.mean())
        report.frac_within = float((errs <= tolerance).mean())
    report.passed = bool(errs.size) and report.mean_rel <= tolerance and (
        max_tolerance is None or report.max_rel <= max_tolerance)
    return report
