"""Time the real baseline against the packed folded path on the default network.

    python scripts/bench_default.py [--batch 16] [--reps 5] [--threads N] [--csv out.csv]

The network has random weights and randomized BN statistics; timings do not
depend on trained values. Both paths must agree on every label before timing.
"""

import argparse

from bcednet.evalbench import bench_forward
from bcednet.netgraph import build, default_config, randomize_bn


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--warmup", type=int, default=1)
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args()

    net = randomize_bn(build(default_config(), args.seed), args.seed + 1)
    res = bench_forward(net, args.batch, args.reps, args.warmup, seed=args.seed, threads=args.threads)
    print(res.table())
    print(f"heaviest block by op count: {res.heaviest_block}")
    verdict = "PASS" if res.speedup >= 2.0 else "FAIL"
    print(f"overall speedup {res.speedup:.2f}x (target >= 2x): {verdict}")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(res.csv())


if __name__ == "__main__":
    main()
