#!/usr/bin/env python3
"""Run all three canned experiments into runs/; pass --quick for a smoke pass."""
import sys

from e2ediff.harness import run_cli

if __name__ == "__main__":
    extra = sys.argv[1:]
    for name in ("fig2_awgn_qam16", "fig3_awgn_e2e", "fig4_rayleigh_e2e"):
        code = run_cli(["recipe", name, "--out", f"runs/{name}", *extra])
        if code != 0:
            sys.exit(code)
    sys.exit(0)
