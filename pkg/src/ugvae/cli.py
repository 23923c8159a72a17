"""Command-line entry point: ``ugvae <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .data import (DIGIT_SETS, Dataset, load_idx, make_synthetic, random_groups, save_idx,
                   save_idx_labels, structured_groups)
from .errors import CapacityError, ContractError, FormatError, TrainingDivergence
from .eval import (classify_embeddings, cross_interpolation, embed_batches, read_csv,
                   sample_grid, write_csv, write_pgm_grid)
from .numerics import RngStream
from .trainer import (TrainConfig, bundle_from_checkpoint, load_checkpoint, save_checkpoint,
                      train)

log = logging.getLogger("ugvae")

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", default=None, help="'mnist', 'synthetic', or omit and give --images")
    g.add_argument("--data-dir", default=None, help="directory holding MNIST IDX files")
    g.add_argument("--images", default=None, help="IDX image file")
    g.add_argument("--labels", default=None, help="IDX label file")
    g.add_argument("--limit", type=int, default=None, help="keep the first N samples")
    g.add_argument("--synth-groups", type=int, default=80)
    g.add_argument("--synth-group-size", type=int, default=64)
    g.add_argument("--synth-classes", type=int, default=4)
    g.add_argument("--synth-styles", default=None, help="comma-separated style ids (0..5)")
    g.add_argument("--synth-seed", type=int, default=0)


def _add_train_args(p):
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--B", type=int, default=d.B)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--beta1", type=float, default=d.beta1)
    p.add_argument("--beta2", type=float, default=d.beta2)
    p.add_argument("--adam-eps", type=float, default=d.adam_eps)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--d", type=int, default=d.d)
    p.add_argument("--g", type=int, default=d.g)
    p.add_argument("--K", type=int, default=d.K)
    p.add_argument("--sigma-x", type=float, default=d.sigma_x)
    p.add_argument("--hidden", type=int, default=d.hidden)
    p.add_argument("--feature", type=int, default=d.feature)
    p.add_argument("--clip-norm", type=float, default=d.clip_norm)
    p.add_argument("--checkpoint-every", type=int, default=d.checkpoint_every)
    p.add_argument("--dtype", choices=("float32", "float64"), default=d.dtype)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ugvae", description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=None, help="JSON file of flag defaults; flags win")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="fit a model; writes final.ckpt and metrics.csv")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample-grid", help="beta x z interpolation grid per component")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--component", type=int, default=None, help="default: every component")
    p.add_argument("--steps", type=int, default=7)
    p.add_argument("--out", default=None, help="output directory (default: next to the checkpoint)")

    p = sub.add_parser("interpolate", help="cross-batch beta / z interpolation grid")
    p.add_argument("--ckpt", required=True)
    _add_data_args(p)
    p.add_argument("--batch-a", required=True, help="batch spec, e.g. 'even' or 'style=0'")
    p.add_argument("--batch-b", required=True)
    p.add_argument("--index-a", type=int, default=0)
    p.add_argument("--index-b", type=int, default=0)
    p.add_argument("--steps", type=int, default=7)
    p.add_argument("--B", type=int, default=None, help="default: the checkpoint's group size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="PGM path")

    p = sub.add_parser("embed", help="posterior beta means of batches -> CSV")
    p.add_argument("--ckpt", required=True)
    _add_data_args(p)
    p.add_argument("--batch", action="append", required=True,
                   help="SPEC[:COUNT], repeatable; SPEC is random, even, odd, fibonacci, prime, "
                        "labels=1,2 or <attr>=v1,v2")
    p.add_argument("--B", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV path")

    p = sub.add_parser("classify", help="linear probe on embedding CSVs")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--l2", type=float, default=1e-4)

    p = sub.add_parser("synth", help="write a synthetic dataset as IDX files")
    p.add_argument("--groups", type=int, default=80)
    p.add_argument("--group-size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--styles", default=None)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _parse(argv) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = _Parser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    parser = build_parser()
    if known.config:
        try:
            cfg = json.loads(Path(known.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {known.config}: {exc}") from exc
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        used = set()
        for sub in parser._subparsers._group_actions[0].choices.values():
            mine = {a.dest for a in sub._actions} & set(cfg)
            sub.set_defaults(**{k: cfg[k] for k in mine})
            for a in sub._actions:
                if a.dest in mine:
                    a.required = False
            used |= mine
        unknown = sorted(set(cfg) - used)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return parser.parse_args(argv)


def _styles(text):
    return None if text in (None, "") else [int(s) for s in str(text).split(",")]


def load_dataset(args) -> Dataset:
    if args.data == "synthetic":
        ds = make_synthetic(args.synth_groups, args.synth_group_size, args.synth_classes,
                            seed=args.synth_seed, styles=_styles(args.synth_styles))
    elif args.data == "mnist" or (args.data is None and args.images is None):
        root = Path(args.data_dir or os.environ.get("UGVAE_MNIST_DIR", "data/mnist"))
        paths = []
        for stem in MNIST_FILES:
            cand = [root / stem, root / (stem + ".gz")]
            found = [c for c in cand if c.exists()]
            if not found:
                raise FileNotFoundError(f"no {stem}[.gz] under {root}")
            paths.append(found[0])
        ds = load_idx(paths[0], paths[1], name="mnist")
    elif args.data is not None and args.images is None:
        raise UsageError(f"unknown --data {args.data!r}; use mnist, synthetic or --images")
    else:
        ds = load_idx(args.images, args.labels)
    if args.limit is not None:
        ds = ds.subset(np.arange(min(args.limit, ds.N)))
    return ds


def parse_batch_spec(spec: str) -> tuple[str, object, str, int]:
    """SPEC[:COUNT] -> (key, predicate, tag, count)."""
    body, _, count = spec.partition(":")
    n = int(count) if count else 1
    if body == "random" or body in DIGIT_SETS:
        return "labels", body, body, n
    key, eq, values = body.partition("=")
    if not eq or not values:
        raise UsageError(f"bad batch spec {spec!r}")
    return key, [int(v) for v in values.split(",")], body, n


def build_batches(ds: Dataset, spec: str, B: int, rng: RngStream):
    key, pred, tag, n = parse_batch_spec(spec)
    if pred == "random":
        out = []
        while len(out) < n:
            out.extend(random_groups(ds, B, rng.substream("random", len(out))))
        return out[:n]
    return structured_groups(ds, pred, B, rng, n, key=key, tag=tag)


def _load_model(path):
    ckpt = load_checkpoint(path)
    if not ckpt.config:
        raise FormatError("checkpoint config sidecar missing", path=str(path) + ".json")
    cfg = TrainConfig.from_dict(ckpt.config)
    return cfg, bundle_from_checkpoint(ckpt, cfg)


def cmd_train(args) -> int:
    ds = load_dataset(args)
    cfg = TrainConfig(epochs=args.epochs, B=args.B, lr=args.lr, beta1=args.beta1, beta2=args.beta2,
                      adam_eps=args.adam_eps, seed=args.seed, D=ds.D, d=args.d, g=args.g, K=args.K,
                      sigma_x=args.sigma_x, hidden=args.hidden, feature=args.feature,
                      clip_norm=args.clip_norm, checkpoint_every=args.checkpoint_every,
                      dtype=args.dtype)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = load_checkpoint(args.resume) if args.resume else None
    try:
        res = train(ds, cfg, resume=resume, out_dir=out, metrics_path=out / "metrics.csv")
    except TrainingDivergence as exc:
        if exc.checkpoint is not None:
            save_checkpoint(out / "last_good.ckpt", exc.checkpoint)
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    save_checkpoint(out / "final.ckpt", res.checkpoint)
    if res.initial_elbo is not None:
        print(f"initial ELBO/sample {res.initial_elbo:.4f}")
    for i, v in enumerate(res.epoch_elbo, start=1):
        print(f"epoch {i} ELBO/sample {v:.4f}")
    print(f"wrote {out / 'final.ckpt'} and {out / 'metrics.csv'}")
    return 0


def cmd_sample_grid(args) -> int:
    cfg, bundle = _load_model(args.ckpt)
    out = Path(args.out) if args.out else Path(args.ckpt).parent
    out.mkdir(parents=True, exist_ok=True)
    comps = range(cfg.K) if args.component is None else [args.component]
    for k in comps:
        grid = sample_grid(bundle, cfg.generative(), k, args.steps, args.steps)
        path = out / f"grid_k{k}.pgm"
        write_pgm_grid(grid, path)
        print(f"wrote {path}")
    return 0


def cmd_interpolate(args) -> int:
    cfg, bundle = _load_model(args.ckpt)
    ds = load_dataset(args)
    B = args.B or cfg.B
    rng = RngStream(args.seed)
    ba = build_batches(ds, args.batch_a, B, rng.substream("a"))[0]
    bb = build_batches(ds, args.batch_b, B, rng.substream("b"))[0]
    grid = cross_interpolation(bundle, cfg.generative(), ba, bb, args.index_a, args.index_b,
                               args.steps, image_shape=ds.image_shape)
    write_pgm_grid(grid, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_embed(args) -> int:
    cfg, bundle = _load_model(args.ckpt)
    ds = load_dataset(args)
    B = args.B or cfg.B
    rng = RngStream(args.seed)
    batches = []
    for i, spec in enumerate(args.batch):
        batches.extend(build_batches(ds, spec, B, rng.substream("batch", i)))
    emb = embed_batches(bundle, batches, rng)
    write_csv(emb, args.out)
    print(f"wrote {len(emb)} embeddings to {args.out} (2-D coordinates by PCA)")
    return 0


def cmd_classify(args) -> int:
    tr_tags, tr_X = read_csv(args.train)
    te_tags, te_X = read_csv(args.test)
    rep = classify_embeddings(tr_X, tr_tags, te_X, te_tags, lr=args.lr,
                              iterations=args.iterations, l2=args.l2)
    print(rep.table())
    return 0


def cmd_synth(args) -> int:
    ds = make_synthetic(args.groups, args.group_size, args.classes, seed=args.seed,
                        noise=args.noise, styles=_styles(args.styles))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_idx(out / "images-idx3-ubyte", ds.X, ds.image_shape, out / "labels-idx1-ubyte", ds.labels)
    save_idx_labels(out / "styles-idx1-ubyte", ds.attrs["style"])
    print(f"wrote {ds.N} samples to {out}")
    return 0


COMMANDS = {"train": cmd_train, "sample-grid": cmd_sample_grid, "interpolate": cmd_interpolate,
            "embed": cmd_embed, "classify": cmd_classify, "synth": cmd_synth}


def _apply_threads():
    raw = os.environ.get("UGVAE_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"UGVAE_THREADS must be a positive integer, got {raw!r}")
    torch.set_num_threads(n)


def main(argv=None) -> int:
    try:
        args = _parse(argv)
        _apply_threads()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (FormatError, CapacityError, ContractError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
