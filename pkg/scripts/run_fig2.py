#!/usr/bin/env python3
"""Channel-imitation fidelity: conditional diffusion around 16-QAM over AWGN.

Trains the denoiser at Eb/N0 = 5 dB, then writes per-message output-norm
KS/mean/cov comparisons plus constellation and norm CSVs for plotting.
"""
import sys

from e2ediff.harness import run_cli

if __name__ == "__main__":
    extra = sys.argv[1:] or ["--out", "runs/fig2_awgn_qam16"]
    sys.exit(run_cli(["recipe", "fig2_awgn_qam16", *extra]))
