"""Latency, parameter and FLOP table for every size preset on this machine."""

import argparse

from p2at import ModelConfig, build
from p2at.bench import bench
from p2at.model import PRESETS


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", default="64x64,128x128", help="comma separated HxW list")
    ap.add_argument("--iters", type=int, default=10)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--classes", type=int, default=19)
    args = ap.parse_args()

    sizes = [tuple(int(v) for v in s.split("x")) for s in args.sizes.split(",")]
    print(f"{'preset':<7}{'input':>10}{'params':>12}{'GFLOPs':>10}{'mean ms':>10}{'p95 ms':>10}{'fps':>8}")
    for name in PRESETS:
        model = build(ModelConfig.preset(name, args.classes))
        for h, w in sizes:
            r = bench(model, (1, 3, h, w), iters=args.iters, threads=args.threads)
            print(f"{name:<7}{f'{h}x{w}':>10}{r.params:>12}{r.flops / 1e9:>10.3f}{r.mean_ms:>10.1f}"
                  f"{r.p95_ms:>10.1f}{r.fps:>8.1f}")


if __name__ == "__main__":
    main()
