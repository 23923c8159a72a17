"""Write 10000 MNIST digits as gzipped IDX files, taken from the npm ``mnist`` package.

    python tools/fetch_mnist.py [--out data/mnist]

The package stores each digit as 784 intensities in [0, 1] rounded to three
decimals; multiplying by 255 and rounding recovers the original bytes. The
class-sorted digits are shuffled with a fixed seed before writing.
"""
import argparse
import gzip
import json
import struct
import subprocess
import tarfile
import tempfile
from pathlib import Path

import numpy as np


def fetch(out: Path) -> int:
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist@1.1.0", "--silent"], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL)
        with tarfile.open(next(Path(tmp).glob("mnist-*.tgz"))) as tar:
            images, labels = [], []
            for digit in range(10):
                raw = tar.extractfile(f"package/src/digits/{digit}.json").read()
                data = np.asarray(json.loads(raw)["data"], dtype=np.float64).reshape(-1, 784)
                images.append(np.rint(data * 255).astype(np.uint8))
                labels.append(np.full(len(data), digit, dtype=np.uint8))
    X, y = np.concatenate(images), np.concatenate(labels)
    order = np.random.default_rng(0).permutation(len(X))
    X, y = X[order], y[order]
    out.mkdir(parents=True, exist_ok=True)
    with gzip.open(out / "train-images-idx3-ubyte.gz", "wb") as fh:
        fh.write(struct.pack(">IIII", 0x803, len(X), 28, 28) + X.tobytes())
    with gzip.open(out / "train-labels-idx1-ubyte.gz", "wb") as fh:
        fh.write(struct.pack(">II", 0x801, len(y)) + y.tobytes())
    return len(X)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("data/mnist"))
    args = ap.parse_args()
    print(f"wrote {fetch(args.out)} digits to {args.out}")
