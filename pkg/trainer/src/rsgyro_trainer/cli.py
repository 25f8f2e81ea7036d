"""Trainer command line: train, infer, check-vectors."""

from __future__ import annotations

import argparse
import sys

from .schedule import check_vectors
from .train import TrainConfig, load_checkpoint, train


def _cmd_train(args) -> int:
    cfg = TrainConfig(
        lr=args.lr,
        batch_size=args.batch_size,
        steps=args.steps,
        resolution=args.resolution,
        norm_scale=args.norm_scale,
        cond_dropout=args.cond_dropout,
        seed=args.seed,
        base_width=args.base_width,
        vectors_path=args.vectors,
    )
    history = train(args.manifest, cfg, args.out, args.loss_csv)
    last = history[-1]
    print(f"trained {len(history)} steps; final l_mse {last['l_mse']:.5f}, "
          f"l_pl {last['l_pl']:.5f}")
    return 0


def _cmd_infer(args) -> int:
    from .infer import infer_manifest

    model, cfg = load_checkpoint(args.checkpoint)
    infer_manifest(model, cfg, args.manifest, args.out_dir, runs=args.runs,
                   steps=args.steps, base_seed=args.seed)
    print(f"wrote {args.runs} run(s) of predictions to {args.out_dir}")
    return 0


def _cmd_check_vectors(args) -> int:
    worst = check_vectors(args.vectors, tol=args.tol)
    print(f"test vectors agree within {worst:.3e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsgyro-trainer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the denoiser on a synthesized dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv", required=True)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--norm-scale", type=float, default=8.0)
    p.add_argument("--cond-dropout", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-width", type=int, default=32)
    p.add_argument("--vectors", default=None,
                   help="scheduler test-vector JSON to verify against before training")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="predict per-run flow files for a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("check-vectors", help="verify scheduler agreement with exported vectors")
    p.add_argument("--vectors", required=True)
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=_cmd_check_vectors)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
