"""Datasets (IDX files, synthetic group-structured images) and batch builders."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CapacityError, ContractError, FormatError
from .numerics import RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DIGIT_SETS = {
    "even": frozenset({0, 2, 4, 6, 8}),
    "odd": frozenset({1, 3, 5, 7, 9}),
    "fibonacci": frozenset({0, 1, 2, 3, 5, 8}),
    "prime": frozenset({2, 3, 5, 7}),
}


@dataclass
class Dataset:
    X: np.ndarray
    labels: np.ndarray | None = None
    name: str = "dataset"
    attrs: dict = field(default_factory=dict)
    image_shape: tuple | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float32)
        if self.X.ndim != 2:
            raise ContractError("dataset X must be N x D")
        if self.X.size and (self.X.min() < 0 or self.X.max() > 1):
            raise ContractError("dataset entries must lie in [0, 1]")
        if self.image_shape is None:
            side = int(round(self.D ** 0.5))
            self.image_shape = (side, side) if side * side == self.D else (1, self.D)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.X),):
                raise ContractError("labels must have length N")

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], None if self.labels is None else self.labels[idx],
                       name or self.name, {k: np.asarray(v)[idx] for k, v in self.attrs.items()},
                       self.image_shape)


@dataclass
class GroupBatch:
    indices: np.ndarray
    X: np.ndarray
    tag: str = "random"
    domains: np.ndarray | None = None

    def __len__(self):
        return len(self.indices)


# ---------------------------------------------------------------- IDX files

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> tuple[tuple, np.ndarray]:
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise FormatError("truncated IDX header", offset=len(raw), path=path)
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"bad IDX magic 0x{found:08x}, expected 0x{magic:08x}", offset=0, path=path)
    if len(raw) < header:
        raise FormatError("truncated IDX header", offset=len(raw), path=path)
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"IDX payload has {len(raw) - header} bytes, header implies "
                          f"{expected - header}", offset=min(len(raw), expected), path=path)
    return dims, np.frombuffer(raw, dtype=np.uint8, offset=header)


def load_idx(images_path, labels_path=None, name: str | None = None) -> Dataset:
    dims, pix = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    n, rows, cols = dims
    X = pix.reshape(n, rows * cols).astype(np.float32) / np.float32(255.0)
    labels = None
    if labels_path is not None:
        (m,), labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
        if m != n:
            raise FormatError(f"{n} images but {m} labels", offset=4, path=labels_path)
    return Dataset(X, labels, name or Path(images_path).name, image_shape=(rows, cols))


def to_bytes(X: np.ndarray) -> np.ndarray:
    """Pixels in [0, 1] to u8 with round-half-up."""
    return np.floor(np.clip(np.asarray(X, dtype=np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)


def save_idx(images_path, X: np.ndarray, image_shape: tuple[int, int],
             labels_path=None, labels: np.ndarray | None = None):
    rows, cols = image_shape
    X = np.asarray(X)
    if X.shape[1] != rows * cols:
        raise ContractError("image_shape does not match data width")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(X), rows, cols))
        fh.write(to_bytes(X).tobytes())
    if labels_path is not None:
        save_idx_labels(labels_path, labels)


def save_idx_labels(path, labels: np.ndarray):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ContractError("IDX u8 labels must lie in [0, 255]")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------- synthetic

_TEMPLATE_ART = (
    # horizontal bar
    "........ ........ ........ ######## ######## ........ ........ ........",
    # vertical bar
    "...##... ...##... ...##... ...##... ...##... ...##... ...##... ...##...",
    # diagonal
    "##...... .##..... ..##.... ...##... ....##.. .....##. ......## .......#",
    # cross
    "...##... ...##... ...##... ######## ######## ...##... ...##... ...##...",
    # box border
    "######## #......# #......# #......# #......# #......# #......# ########",
    # centre square
    "........ ........ ..####.. ..####.. ..####.. ..####.. ........ ........",
    # anti-diagonal
    "......## .....##. ....##.. ...##... ..##.... .##..... ##...... #.......",
    # quadrant checker
    "####.... ####.... ####.... ####.... ....#### ....#### ....#### ....####",
)

TEMPLATES = np.array([[[c == "#" for c in row] for row in art.split()] for art in _TEMPLATE_ART],
                     dtype=np.float64).reshape(len(_TEMPLATE_ART), 64)

GAINS = (0.4, 0.7, 1.0)


def style_params(style: int) -> tuple[float, bool]:
    """Style index -> (brightness gain, inverted polarity)."""
    return GAINS[style % 3], style >= 3


def make_synthetic(n_groups: int, B: int, K_true: int = 4, n_styles: int = 6, seed: int = 0, *,
                   noise: float = 0.05, styles: Sequence[int] | None = None,
                   name: str = "synthetic") -> Dataset:
    """Group-structured 8x8 images.

    Each generating group draws one style (gain, polarity) shared by its B
    members; each member draws a template class uniformly from ``K_true``.
    ``labels`` holds the class; ``attrs`` holds group, style, gain, inverted.
    """
    if not 1 <= K_true <= len(TEMPLATES):
        raise ContractError(f"K_true must be in [1, {len(TEMPLATES)}]")
    allowed = list(styles) if styles is not None else list(range(n_styles))
    if not allowed or min(allowed) < 0 or max(allowed) > 5:
        raise ContractError("styles must be a non-empty subset of 0..5")
    rng = RngStream(seed).substream("synthetic")
    N = n_groups * B
    X = np.empty((N, 64))
    cls = np.empty(N, dtype=np.int64)
    style = np.empty(N, dtype=np.int64)
    for gi in range(n_groups):
        r = rng.substream(gi)
        s = allowed[int(r.integers(len(allowed)))]
        gain, inv = style_params(s)
        c = r.integers(K_true, size=B)
        img = gain * TEMPLATES[c]
        if inv:
            img = 1.0 - img
        if noise:
            img = img + noise * r.normal(img.shape)
        sl = slice(gi * B, (gi + 1) * B)
        X[sl] = np.clip(img, 0.0, 1.0)
        cls[sl] = c
        style[sl] = s
    gains = np.array([style_params(s)[0] for s in style])
    return Dataset(X, cls, name, dict(group=np.repeat(np.arange(n_groups), B), style=style,
                                      gain=gains, inverted=style >= 3), (8, 8))


# ---------------------------------------------------------------- batches

def random_groups(dataset: Dataset, B: int, rng: RngStream) -> list[GroupBatch]:
    """Shuffle and chunk into floor(N / B) groups; the ragged tail is dropped."""
    if dataset.N < B:
        raise CapacityError(f"dataset has {dataset.N} samples, fewer than B={B}")
    perm = rng.permutation(dataset.N)
    return [GroupBatch(perm[i * B:(i + 1) * B], dataset.X[perm[i * B:(i + 1) * B]], "random")
            for i in range(dataset.N // B)]


def resolve_predicate(predicate) -> tuple[str, frozenset]:
    if isinstance(predicate, str):
        if predicate not in DIGIT_SETS:
            raise ContractError(f"unknown label set {predicate!r}; known: {sorted(DIGIT_SETS)}")
        return predicate, DIGIT_SETS[predicate]
    values = frozenset(int(v) for v in predicate)
    return "{" + ",".join(map(str, sorted(values))) + "}", values


def structured_groups(dataset: Dataset, predicate: str | Iterable[int], B: int, rng: RngStream,
                      n_groups: int = 1, *, key: str = "labels",
                      tag: str | None = None) -> list[GroupBatch]:
    """Groups sampled (without replacement within a group) from matching samples.

    ``key`` selects the label array: "labels" or any integer attribute.
    """
    values = dataset.labels if key == "labels" else dataset.attrs.get(key)
    if values is None:
        raise ContractError(f"dataset has no {key!r} labels")
    name, allowed = resolve_predicate(predicate)
    pool = np.flatnonzero(np.isin(values, sorted(allowed)))
    if len(pool) < B:
        raise CapacityError(f"only {len(pool)} samples match {name}, need B={B}")
    out = []
    for _ in range(n_groups):
        idx = np.sort(rng.choice(pool, B, replace=False))
        out.append(GroupBatch(idx, dataset.X[idx], tag or name))
    return out


def mix_domains(a: Dataset, b: Dataset, B: int, rng: RngStream) -> list[GroupBatch]:
    """Groups holding B/2 samples of each dataset, shuffled within the group.

    ``indices`` refer to the source dataset named by the parallel ``domains``
    vector (0 for ``a``, 1 for ``b``).
    """
    if B % 2:
        raise ContractError("mix_domains needs an even group size")
    if a.N == 0 or b.N == 0:
        raise ContractError("mix_domains needs two non-empty datasets")
    half = B // 2
    n = min(a.N, b.N) // half
    if n == 0:
        raise CapacityError("datasets too small for one mixed group")
    pa, pb = rng.permutation(a.N), rng.permutation(b.N)
    out = []
    for i in range(n):
        ia, ib = pa[i * half:(i + 1) * half], pb[i * half:(i + 1) * half]
        idx = np.concatenate([ia, ib])
        dom = np.repeat([0, 1], half)
        X = np.concatenate([a.X[ia], b.X[ib]])
        order = rng.permutation(B)
        out.append(GroupBatch(idx[order], X[order], "mixed", dom[order]))
    return out
