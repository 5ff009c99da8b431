"""Ground-truth channel simulators and modulation.

AWGN and real Rayleigh fading over real vector symbols, normalized 16-QAM
with per-axis Gray labels, the Eb/N0 -> sigma bookkeeping used everywhere,
and a Monte-Carlo SER oracle for minimum-distance 16-QAM detection with its
closed-form counterpart. These are the distributions the generative models
must imitate and the test channels for SER evaluation.

Convention: unit average energy per real dimension and N0 = 2 sigma^2, so
sigma = (2 R 10^(dB/10))^(-1/2) with R = log2(M)/n information bits per real
channel dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numkit import Array, ContractError


@dataclass(frozen=True)
class EbN0Spec:
    """Operating point: Eb/N0 in dB at rate R bits per real dimension."""
    ebn0_db: float
    rate: float

    def __post_init__(self):
        if not self.rate > 0.0:
            raise ContractError("rate must be positive")


@dataclass(frozen=True)
class RayleighParams:
    sigma_r: float = 1.0

    def __post_init__(self):
        if not self.sigma_r > 0.0:
            raise ContractError("sigma_r must be positive")


def ebn0_to_sigma(spec: EbN0Spec) -> float:
    return 1.0 / math.sqrt(2.0 * spec.rate * 10.0 ** (spec.ebn0_db / 10.0))


# ---------------------------------------------------------------------------
# 16-QAM
#
# Per-axis Gray labels: position p in {-3,-1,1,3} carries label p^(p>>1), so
# one grid step flips exactly one bit. Message index packs (I, Q) label pairs.

_LEVELS = np.array([-3.0, -1.0, 1.0, 3.0]) / math.sqrt(10.0)
_POS_OF_LABEL = np.array([0, 1, 3, 2])  # inverse of p -> p^(p>>1)


def _build_constellation() -> Array:
    pts = np.empty((16, 2))
    for m in range(16):
        pts[m, 0] = _LEVELS[_POS_OF_LABEL[m >> 2]]
        pts[m, 1] = _LEVELS[_POS_OF_LABEL[m & 3]]
    return pts


QAM16 = _build_constellation()
QAM16.setflags(write=False)


def qam16_modulate(m) -> Array:
    """Map message index (or index array) to normalized 16-QAM point(s)."""
    m = np.asarray(m)
    if np.any(m < 0) or np.any(m > 15):
        raise ContractError("16-QAM message index out of range")
    return QAM16[m]


def qam16_demodulate(y: Array) -> Array:
    """Minimum-distance detection, separable per axis. y: (..., 2) -> indices."""
    y = np.asarray(y, dtype=np.float64)
    # nearest of the 4 levels along each axis
    pos = np.searchsorted(_LEVELS[:-1] + np.diff(_LEVELS) / 2.0, y)
    label = pos ^ (pos >> 1)
    return (label[..., 0] << 2) | label[..., 1]


# ---------------------------------------------------------------------------
# channels

def awgn_apply(x: Array, sigma: float, rng: np.random.Generator) -> Array:
    """y = x + sigma z with z iid standard normal."""
    if sigma < 0.0:
        raise ContractError("sigma must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0.0:
        return x.copy()
    return x + sigma * rng.standard_normal(x.shape)


def rayleigh_apply(
    x: Array, sigma: float, params: RayleighParams, rng: np.random.Generator,
) -> tuple[Array, Array]:
    """y = h o x + sigma z, h elementwise Rayleigh(sigma_r).

    h is sampled as sigma_r sqrt(g1^2 + g2^2) from two normals (draw order
    g1, g2, z). Returned only for diagnostics; receivers never see it.
    """
    if sigma < 0.0:
        raise ContractError("sigma must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    g1 = rng.standard_normal(x.shape)
    g2 = rng.standard_normal(x.shape)
    h = params.sigma_r * np.sqrt(g1 * g1 + g2 * g2)
    y = h * x
    if sigma > 0.0:
        y = y + sigma * rng.standard_normal(x.shape)
    return y, h


# ---------------------------------------------------------------------------
# SER reference for 16-QAM over AWGN

def qam16_awgn_ser_oracle(sigma: float, num_symbols: int, rng: np.random.Generator) -> float:
    """Monte-Carlo SER of minimum-distance 16-QAM detection at noise sigma."""
    if num_symbols < 1:
        raise ContractError("need at least one symbol")
    errors = 0
    chunk = 1_000_000
    remaining = num_symbols
    while remaining > 0:
        n = min(chunk, remaining)
        m = rng.integers(0, 16, n)
        y = awgn_apply(qam16_modulate(m), sigma, rng)
        errors += int(np.count_nonzero(qam16_demodulate(y) != m))
        remaining -= n
    return errors / num_symbols


def qfunc(x: float) -> float:
    """Gaussian tail probability Q(x)."""
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def qam16_awgn_ser_closed_form(sigma: float) -> float:
    """Exact SER of Gray 16-QAM over AWGN: two independent 4-PAM axes."""
    if sigma <= 0.0:
        return 0.0
    p4 = 1.5 * qfunc(1.0 / (math.sqrt(10.0) * sigma))
    return 1.0 - (1.0 - p4) ** 2
