"""Memorize a small synthetic corpus with the tiny preset and log per-epoch mIoU.

    python3 scripts/overfit_synthetic.py --epochs 60 --seed 7 --out runs/overfit
    python3 scripts/overfit_synthetic.py --augment   # flips and 0.5-2 rescaling on
"""

import argparse
import os
import time

from p2at import ModelConfig, build
from p2at.checkpoint import save_checkpoint
from p2at.data import synth_generate
from p2at.engine import TrainConfig, train, write_history


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=32)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--classes", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--lr", type=float, default=None)
    ap.add_argument("--augment", action="store_true", help="use the default flip/scale policy")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    data = synth_generate(args.seed, args.n, args.size, args.size, args.classes)
    overrides = dict(epochs=args.epochs, seed=args.seed, crop_h=args.size, crop_w=args.size)
    if args.lr is not None:
        overrides["base_lr"] = args.lr
    if args.augment:
        base = TrainConfig.memorize()
        cfg = TrainConfig(batch_size=base.batch_size, base_lr=base.base_lr, **overrides)
    else:
        cfg = TrainConfig.memorize(**overrides)
    model = build(ModelConfig.preset("tiny", args.classes), seed=args.seed)

    t0 = time.perf_counter()
    history = train(model, data, cfg, holdout=data, callback=lambda r: print(r.csv(), flush=True))
    print(f"final train mIoU {history[-1].miou:.4f} in {time.perf_counter() - t0:.1f}s")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_history(history, os.path.join(args.out, "history.csv"))
        save_checkpoint(model, os.path.join(args.out, "model.ckpt"))


if __name__ == "__main__":
    main()
