"""Convergence of MoW paths to the (k/n)-scaled gradient flow on the toy problem."""
import sys
from pathlib import Path

from mow.cli import cmd_verify_theorem

if __name__ == "__main__":
    config = sys.argv[1] if len(sys.argv) > 1 else Path(__file__).resolve().parents[1] / "configs" / "theorem.ini"
    sys.exit(cmd_verify_theorem(config))
