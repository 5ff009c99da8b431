#!/usr/bin/env python3
"""AWGN end-to-end coding: (7,16) autoencoder trained at 5 dB.

Trains three variants (model-aware target, diffusion surrogate, adversarial
surrogate) and sweeps SER over integer 2-8 dB into ser_*.csv files.
"""
import sys

from e2ediff.harness import run_cli

if __name__ == "__main__":
    extra = sys.argv[1:] or ["--out", "runs/fig3_awgn_e2e"]
    sys.exit(run_cli(["recipe", "fig3_awgn_e2e", *extra]))
