"""Window-size comparison on the 2D Gaussian mixture (k in {1, 32, 64}, n = 64).

    python3 scripts/run_compare.py [--steps 5000] [--seeds 1]
"""
import argparse
import sys
from pathlib import Path

from mow.cli import EXIT_OK, cmd_compare, read_summary, select_best

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=str(ROOT / "configs" / "gauss_mix.ini"))
    p.add_argument("--steps", type=int)
    p.add_argument("--seeds", type=int)
    args = p.parse_args()
    code = cmd_compare(args.config, seeds=args.seeds, steps=args.steps)
    if code != EXIT_OK:
        return code

    from mow.config import load_config
    out = load_config(args.config).output_dir
    best = select_best(read_summary(out / "compare_runs.csv"))
    if 1 in best and 64 in best:
        ref = float(best[64]["test_rec_error"])
        for k in sorted(best):
            rec = float(best[k]["test_rec_error"])
            print(f"k={k:>3}  rec={rec:.4f}  rel. to k=64: {rec / ref - 1:+.1%}  "
                  f"distance={float(best[k]['test_distance']):.4g}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
