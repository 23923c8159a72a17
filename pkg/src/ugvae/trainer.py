"""Stochastic variational training over random groups, plus checkpoint I/O."""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .data import Dataset, random_groups
from .errors import ContractError, FormatError, TrainingDivergence
from .generative import GenerativeConfig
from .nets import NetworkBundle, init_bundle
from .numerics import RngStream
from .objective import loss as elbo_loss

log = logging.getLogger(__name__)

MAGIC = b"UGVAE001"
METRIC_FIELDS = ("step", "epoch", "elbo", "recon", "kl_z", "kl_d", "kl_beta")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    epochs: int = 10
    B: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    D: int = 784
    d: int = 10
    g: int = 20
    K: int = 10
    sigma_x: float = 0.2
    hidden: int = 256
    feature: int = 256
    clip_norm: float = 100.0
    checkpoint_every: int = 0  # epochs; 0 disables intermediate checkpoints
    dtype: str = "float32"

    def __post_init__(self):
        if self.B < 1:
            raise ContractError("group size B must be >= 1")
        if not self.lr > 0:
            raise ContractError("learning rate must be > 0")
        if self.dtype not in DTYPES:
            raise ContractError(f"dtype must be one of {sorted(DTYPES)}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def generative(self) -> GenerativeConfig:
        return GenerativeConfig(self.D, self.d, self.g, self.K, self.sigma_x, self.B)

    def new_bundle(self) -> NetworkBundle:
        return init_bundle(self.D, self.d, self.g, self.K, RngStream(self.seed), hidden=self.hidden,
                           feature=self.feature, dtype=DTYPES[self.dtype])


class Adam:
    """Adaptive-moment optimizer keeping its moments by parameter name."""

    def __init__(self, bundle: NetworkBundle, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(bundle.named_parameters())
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m1 = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.m2 = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.step_count = 0

    @torch.no_grad()
    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m1, m2 = self.m1[name], self.m2[name]
            m1.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            m2.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            p.sub_(self.lr * (m1 / c1) / ((m2 / c2).sqrt() + self.eps))


def clip_grad_norm(bundle: NetworkBundle, max_norm: float) -> float:
    grads = [p.grad for p in bundle.parameters() if p.grad is not None]
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g.mul_(scale)
    return total


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    tensors: dict  # name -> float32 ndarray; parameters, then "<name>.m1", then "<name>.m2"
    step: int = 0
    config: dict = field(default_factory=dict)
    version: int = 1

    def params(self) -> dict:
        return {k: v for k, v in self.tensors.items() if not k.endswith((".m1", ".m2"))}


def make_checkpoint(bundle: NetworkBundle, opt: Adam | None, config: TrainConfig) -> Checkpoint:
    tensors = {}
    for name, p in bundle.named_parameters():
        tensors[name] = p.detach().cpu().numpy().astype("<f4")
    if opt is not None:
        for suffix, moments in ((".m1", opt.m1), (".m2", opt.m2)):
            for name, m in moments.items():
                tensors[name + suffix] = m.detach().cpu().numpy().astype("<f4")
    return Checkpoint(tensors, opt.step_count if opt is not None else 0, asdict(config))


def save_checkpoint(path, ckpt: Checkpoint):
    path = Path(path)
    parts = [MAGIC, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    parts.append(struct.pack("<Q", ckpt.step))
    path.write_bytes(b"".join(parts))
    Path(str(path) + ".json").write_text(json.dumps(ckpt.config, sort_keys=True, indent=2) + "\n")


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.pos, path=self.path)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    magic = r.take(8, "magic")
    if magic != MAGIC:
        if magic[:5] == MAGIC[:5]:
            raise FormatError(f"unsupported checkpoint version {magic[5:]!r}", offset=5, path=path)
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0, path=path)
    tensors = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        rank = r.u32("rank")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * count, f"values of {name}"), dtype="<f4").reshape(shape).copy()
    (step,) = struct.unpack("<Q", r.take(8, "step counter"))
    if r.pos != len(r.raw):
        raise FormatError("trailing bytes after step counter", offset=r.pos, path=path)
    sidecar = Path(str(path) + ".json")
    config = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return Checkpoint(tensors, int(step), config)


def bundle_from_checkpoint(ckpt: Checkpoint, config: TrainConfig | None = None) -> NetworkBundle:
    config = config or TrainConfig.from_dict(ckpt.config)
    bundle = NetworkBundle(config.D, config.d, config.g, config.K, config.hidden, config.feature)
    bundle = bundle.to(DTYPES[config.dtype])
    with torch.no_grad():
        for name, p in bundle.named_parameters():
            if name not in ckpt.tensors:
                raise FormatError(f"checkpoint lacks parameter {name}")
            p.copy_(torch.from_numpy(ckpt.tensors[name]))
    return bundle


def _restore_optimizer(opt: Adam, ckpt: Checkpoint):
    for name in opt.params:
        for suffix, moments in ((".m1", opt.m1), (".m2", opt.m2)):
            if name + suffix in ckpt.tensors:
                moments[name].copy_(torch.from_numpy(ckpt.tensors[name + suffix]))
    opt.step_count = ckpt.step


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    bundle: NetworkBundle
    metrics: list  # dicts keyed by METRIC_FIELDS; values are per-sample
    epoch_elbo: list  # mean per-sample ELBO of each trained epoch
    initial_elbo: float | None = None  # per-sample ELBO at initialization, first epoch's groups


def _to_tensor(X: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(np.asarray(X, dtype=np.float64)).to(dtype)


def train(dataset: Dataset, config: TrainConfig, *, resume: Checkpoint | None = None,
          out_dir=None, metrics_path=None, evaluate_initial: bool = True) -> TrainResult:
    """One adaptive-moment step per group of B samples, floor(N / B) groups per epoch.

    Randomness is keyed by (seed, purpose, epoch/step), so resuming from a
    checkpoint reproduces an uninterrupted run exactly.
    """
    if dataset.N < config.B:
        raise ContractError(f"dataset size {dataset.N} < group size {config.B}")
    if dataset.D != config.D:
        raise ContractError(f"dataset width {dataset.D} != config D {config.D}")
    gen = config.generative()
    dtype = DTYPES[config.dtype]
    root = RngStream(config.seed)
    if resume is not None:
        bundle = bundle_from_checkpoint(resume, config)
    else:
        bundle = config.new_bundle()
    opt = Adam(bundle, config.lr, config.beta1, config.beta2, config.adam_eps)
    if resume is not None:
        _restore_optimizer(opt, resume)
    groups_per_epoch = dataset.N // config.B
    start_epoch = opt.step_count // groups_per_epoch
    if opt.step_count % groups_per_epoch:
        raise ContractError("can only resume from an epoch boundary")
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics, epoch_elbo = [], []
    initial = None

    if evaluate_initial and opt.step_count == 0:
        with torch.no_grad():
            vals = []
            for gi, grp in enumerate(random_groups(dataset, config.B, root.substream("shuffle", 0))):
                node = elbo_loss(_to_tensor(grp.X, dtype), bundle, gen, root.substream("noise", gi))
                vals.append(-node.item())
            initial = float(np.mean(vals))
        log.info("initial ELBO per sample %.4f", initial)

    last_good = make_checkpoint(bundle, opt, config)
    for epoch in range(start_epoch, config.epochs):
        vals = []
        for grp in random_groups(dataset, config.B, root.substream("shuffle", epoch)):
            step = opt.step_count
            bundle.zero_grad()
            try:
                node = elbo_loss(_to_tensor(grp.X, dtype), bundle, gen, root.substream("noise", step))
            except TrainingDivergence as exc:
                exc.checkpoint = last_good
                raise
            node.backward(bundle)
            clip_grad_norm(bundle, config.clip_norm)
            opt.step()
            if not all(bool(torch.isfinite(p).all()) for p in bundle.parameters()):
                raise TrainingDivergence(f"non-finite parameters after step {step}",
                                         breakdown=node.breakdown, checkpoint=last_good)
            row = {"step": opt.step_count, "epoch": epoch + 1}
            row.update(node.breakdown.as_dict(1.0 / config.B))
            metrics.append(row)
            vals.append(row["elbo"])
        epoch_elbo.append(float(np.mean(vals)))
        last_good = make_checkpoint(bundle, opt, config)
        log.info("epoch %d mean ELBO per sample %.4f", epoch + 1, epoch_elbo[-1])
        if out_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(out_dir / f"epoch{epoch + 1:04d}.ckpt", last_good)

    if metrics_path is not None:
        write_metrics(metrics_path, metrics)
    return TrainResult(last_good, bundle, metrics, epoch_elbo, initial)


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in rows:
            w.writerow([row["step"], row["epoch"]] + [repr(float(row[k])) for k in METRIC_FIELDS[2:]])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]
