"""Evaluation protocols: interpolation grids, batch embeddings, linear probe, writers."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import GroupBatch, to_bytes
from .errors import ContractError
from .generative import GenerativeConfig, decode_x, prior_z_given
from .inference import encode_z, infer_group
from .nets import NetworkBundle
from .numerics import RngStream, as_tensor


@dataclass
class InterpolationGrid:
    images: np.ndarray  # rows x cols x D decoder means
    component: int | None
    beta_start: np.ndarray
    beta_end: np.ndarray
    z_start: np.ndarray
    z_end: np.ndarray
    image_shape: tuple = (28, 28)

    @property
    def rows(self) -> int:
        return self.images.shape[0]

    @property
    def cols(self) -> int:
        return self.images.shape[1]


@dataclass
class BatchEmbedding:
    mu_beta: np.ndarray
    tag: str
    coords: np.ndarray  # 2-D projection
    samples: np.ndarray | None = None  # S x g reparameterized draws from q(beta)


def _lerp(a: torch.Tensor, b: torch.Tensor, steps: int) -> torch.Tensor:
    t = torch.linspace(0.0, 1.0, steps, dtype=a.dtype).unsqueeze(-1)
    return a + t * (b - a)


def _square_shape(D: int) -> tuple:
    side = int(round(D ** 0.5))
    return (side, side) if side * side == D else (1, D)


@torch.no_grad()
def sample_grid(bundle: NetworkBundle, config: GenerativeConfig, k: int, steps_beta: int = 7,
                steps_z: int = 7, image_shape: tuple | None = None) -> InterpolationGrid:
    """Rows walk beta along the diagonal from -1 to +1; columns walk z over the
    component-k prior mean +/- 3, with the prior mean recomputed per row."""
    if not 0 <= k < bundle.K:
        raise ContractError(f"component {k} out of range [0, {bundle.K})")
    if steps_beta < 2 or steps_z < 2:
        raise ContractError("grids need at least 2 steps per axis")
    dt = bundle.dtype
    betas = _lerp(-torch.ones(bundle.g, dtype=dt), torch.ones(bundle.g, dtype=dt), steps_beta)
    images = np.empty((steps_beta, steps_z, bundle.D))
    z_first = z_last = None
    for r, beta in enumerate(betas):
        mu = prior_z_given(k, beta, bundle).mean
        zs = _lerp(mu - 3.0, mu + 3.0, steps_z)
        images[r] = decode_x(zs, beta, bundle, config).mean.double().numpy()
        if r == 0:
            z_first = zs[0].double().numpy()
        z_last = zs[-1].double().numpy()
    return InterpolationGrid(images, k, betas[0].double().numpy(), betas[-1].double().numpy(),
                             z_first, z_last, image_shape or _square_shape(bundle.D))


def posterior_beta(X, bundle: NetworkBundle):
    """Aggregated q(beta) of a batch, evaluated at the q(z|x) means so it is noise-free."""
    X = as_tensor(X, bundle.dtype)
    zeros = torch.zeros(len(X), bundle.d, dtype=bundle.dtype)
    return infer_group(X, bundle, eps_z=zeros, eps_beta=torch.zeros(bundle.g, dtype=bundle.dtype)).qbeta


@torch.no_grad()
def cross_interpolation(bundle: NetworkBundle, config: GenerativeConfig, batch_a, batch_b,
                        a: int = 0, b: int = 0, steps: int = 7,
                        image_shape: tuple | None = None) -> InterpolationGrid:
    """Decode (lerp(z1, z2, col), lerp(beta1, beta2, row)) using posterior means.

    beta1/beta2 are the aggregated q(beta) means of the two batches; z1/z2
    the q(z|x) means of sample ``a`` of batch A and sample ``b`` of batch B.
    The discrete component is not used.
    """
    Xa = batch_a.X if isinstance(batch_a, GroupBatch) else batch_a
    Xb = batch_b.X if isinstance(batch_b, GroupBatch) else batch_b
    if len(Xa) == 0 or len(Xb) == 0:
        raise ContractError("cross_interpolation needs non-empty batches")
    beta1 = posterior_beta(Xa, bundle).mean
    beta2 = posterior_beta(Xb, bundle).mean
    z1 = encode_z(as_tensor(Xa[a], bundle.dtype), bundle).mean
    z2 = encode_z(as_tensor(Xb[b], bundle.dtype), bundle).mean
    betas = _lerp(beta1, beta2, steps)
    zs = _lerp(z1, z2, steps)
    images = np.empty((steps, steps, bundle.D))
    for r, beta in enumerate(betas):
        images[r] = decode_x(zs, beta, bundle, config).mean.double().numpy()
    return InterpolationGrid(images, None, beta1.double().numpy(), beta2.double().numpy(),
                             z1.double().numpy(), z2.double().numpy(),
                             image_shape or _square_shape(bundle.D))


# ---------------------------------------------------------------- embeddings

def pca_2d(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (projected N x 2, projection g x 2, centre).

    Axes are ordered by descending eigenvalue and each is signed so its
    largest-magnitude entry is positive.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) < 3 or points.shape[1] < 2:
        raise ContractError("PCA projection needs at least 3 points of dimension >= 2")
    centre = points.mean(0)
    cov = np.cov(points - centre, rowvar=False)
    vals, vecs = np.linalg.eigh(cov)
    P = vecs[:, np.argsort(vals)[::-1][:2]]
    for j in range(2):
        if P[np.argmax(np.abs(P[:, j])), j] < 0:
            P[:, j] = -P[:, j]
    return (points - centre) @ P, P, centre


@torch.no_grad()
def embed_batches(bundle: NetworkBundle, batches: Sequence[GroupBatch], rng: RngStream | None = None,
                  n_samples: int = 0) -> list[BatchEmbedding]:
    """Aggregated q(beta) mean per batch, projected to 2-D with PCA.

    ``rng`` only drives the optional ``n_samples`` posterior draws.
    """
    if len(batches) < 3:
        raise ContractError("embedding projection needs at least 3 batches")
    rng = rng or RngStream(0)
    mus, samples = [], []
    for i, batch in enumerate(batches):
        qbeta = posterior_beta(batch.X, bundle)
        mus.append(qbeta.mean.double().numpy())
        if n_samples:
            eps = rng.substream("samples", i).normal((n_samples, bundle.g))
            std = np.exp(0.5 * qbeta.log_var.double().numpy())
            samples.append(mus[-1] + std * eps)
        else:
            samples.append(None)
    coords, _, _ = pca_2d(np.stack(mus))
    return [BatchEmbedding(m, b.tag, c, s) for m, b, c, s in zip(mus, batches, coords, samples)]


# ---------------------------------------------------------------- probe

@dataclass
class ProbeReport:
    train_accuracy: float
    test_accuracy: float
    classes: list
    n_train: int
    n_test: int

    def table(self, name: str = "Linear probe") -> str:
        width = max(len(name), 10)
        head = f"{'Classifier':<{width}}  {'Train':>6}  {'Test':>6}"
        row = f"{name:<{width}}  {self.train_accuracy:6.3f}  {self.test_accuracy:6.3f}"
        return f"classes: {', '.join(map(str, self.classes))}\n{head}\n{row}"


class LogisticProbe:
    """Multinomial logistic regression, L2-regularized, full-batch gradient descent."""

    def __init__(self, lr: float = 0.1, iterations: int = 500, l2: float = 1e-4):
        self.lr, self.iterations, self.l2 = lr, iterations, l2

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        self.classes_ = sorted(set(y))
        if len(self.classes_) < 2:
            raise ContractError("probe needs at least two classes")
        index = {c: i for i, c in enumerate(self.classes_)}
        Y = np.zeros((len(X), len(self.classes_)))
        Y[np.arange(len(X)), [index[c] for c in y]] = 1.0
        self.W = np.zeros((X.shape[1], len(self.classes_)))
        self.b = np.zeros(len(self.classes_))
        n = len(X)
        for _ in range(self.iterations):
            P = self._probs(X)
            G = (P - Y) / n
            self.W -= self.lr * (X.T @ G + self.l2 * self.W)
            self.b -= self.lr * G.sum(0)
        return self

    def _probs(self, X):
        logits = X @ self.W + self.b
        logits -= logits.max(1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(1, keepdims=True)

    def predict(self, X):
        idx = self._probs(np.asarray(X, dtype=np.float64)).argmax(1)
        return [self.classes_[i] for i in idx]

    def score(self, X, y) -> float:
        return float(np.mean([p == t for p, t in zip(self.predict(X), y)]))


def classify_embeddings(train_X, train_y, test_X, test_y, **probe_kw) -> ProbeReport:
    if len(set(train_y)) < 2:
        raise ContractError("classification needs at least two classes")
    probe = LogisticProbe(**probe_kw).fit(train_X, list(train_y))
    return ProbeReport(probe.score(train_X, list(train_y)), probe.score(test_X, list(test_y)),
                       probe.classes_, len(train_y), len(test_y))


# ---------------------------------------------------------------- writers

def grid_to_bytes(grid: InterpolationGrid) -> tuple[int, int, np.ndarray]:
    h, w = grid.image_shape
    R, C = grid.rows, grid.cols
    H, W = R * h + (R - 1), C * w + (C - 1)
    canvas = np.zeros((H, W), dtype=np.uint8)
    for r in range(R):
        for c in range(C):
            tile = to_bytes(grid.images[r, c]).reshape(h, w)
            canvas[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = tile
    return W, H, canvas


def write_pgm_grid(grid: InterpolationGrid, path):
    """Binary PGM (P5) with 1-pixel black separators between tiles."""
    W, H, canvas = grid_to_bytes(grid)
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
            fh.write(canvas.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write PGM to {path}: {exc}") from exc


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ContractError(f"{path} is not a binary PGM")
    W, H = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(H, W)


def write_csv(embeddings: Sequence[BatchEmbedding], path):
    g = len(embeddings[0].mu_beta) if embeddings else 0
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tag", "pc1", "pc2"] + [f"b{j}" for j in range(g)])
            for e in embeddings:
                w.writerow([e.tag, repr(float(e.coords[0])), repr(float(e.coords[1]))]
                           + [repr(float(v)) for v in e.mu_beta])
    except OSError as exc:
        raise OSError(f"cannot write CSV to {path}: {exc}") from exc


def read_csv(path) -> tuple[list, np.ndarray]:
    """Return (tags, raw beta means) from an embedding CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return [], np.zeros((0, 0))
    cols = [k for k in rows[0] if k.startswith("b") and k[1:].isdigit()]
    return [r["tag"] for r in rows], np.array([[float(r[c]) for c in cols] for r in rows])
