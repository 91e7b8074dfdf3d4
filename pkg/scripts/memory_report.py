"""Print the byte accounting of the default network next to the published figures.

    python scripts/memory_report.py [--config FILE]
"""

import argparse

from bcednet.cli import resolve_config
from bcednet.modelio import size_report

PUBLISHED_PACKED_MB = 2.14
PUBLISHED_FP32_MB = 66.12


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="default")
    args = ap.parse_args()
    r = size_report(resolve_config(args.config))
    print("\n".join(r.lines()))
    packed_mb = r.binary_packed_bytes / 1e6
    fp32_mb = r.hypothetical_fp32_bytes / 1e6
    print()
    print(f"packed payload {packed_mb:.3f} MB vs published {PUBLISHED_PACKED_MB} MB "
          f"({100 * (packed_mb / PUBLISHED_PACKED_MB - 1):+.2f}%)")
    print(f"fp32 equivalent {fp32_mb:.2f} MB vs published {PUBLISHED_FP32_MB} MB "
          f"({100 * (fp32_mb / PUBLISHED_FP32_MB - 1):+.2f}%)")
    print(f"reduction {100 * r.reduction_ratio:.2f}% (published: over 96%)")


if __name__ == "__main__":
    main()
