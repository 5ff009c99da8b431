#!/usr/bin/env python3
"""Rayleigh-fading end-to-end coding: (7,16) autoencoder trained at 12 dB.

Same three variants as the AWGN experiment, swept over integer 1-25 dB.
"""
import sys

from e2ediff.harness import run_cli

if __name__ == "__main__":
    extra = sys.argv[1:] or ["--out", "runs/fig4_rayleigh_e2e"]
    sys.exit(run_cli(["recipe", "fig4_rayleigh_e2e", *extra]))
