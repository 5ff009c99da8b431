"""Evaluation statistics and experiment measurement.

SER sweeps over Eb/N0 through a real channel, two-sample Kolmogorov-Smirnov
distance on output norms (the channel-fidelity diagnostic), ECDF/histogram
summaries, per-message fidelity reports comparing a generative surrogate to
the true channel, and the plain-ASCII CSV writers shared by all experiments.

CSV schemas (header row mandatory):
    ser.csv:           ebn0_db,num_symbols,num_errors,ser,stderr
    norms.csv:         message,sample_idx,norm
    constellation.csv: message,dim0,...,dim{n-1}

The stderr column is the binomial standard error sqrt(ser (1-ser)/N); the
plotted/compared Monte-Carlo error bar is three times that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autoencoder as ae
from .channels import EbN0Spec, ebn0_to_sigma
from .numkit import Array, ContractError


# ---------------------------------------------------------------------------
# KS / ECDF

def ks_statistic(a: Array, b: Array) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ContractError("ks_statistic needs nonempty samples")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


@dataclass
class EcdfSummary:
    values: Array      # sorted
    fractions: Array   # cumulative, ends at 1
    bin_edges: Array
    bin_counts: Array


def ecdf_summary(samples: Array, bins: int = 50) -> EcdfSummary:
    s = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if s.size == 0:
        raise ContractError("empty sample set")
    frac = np.arange(1, s.size + 1, dtype=np.float64) / s.size
    counts, edges = np.histogram(s, bins=bins)
    return EcdfSummary(s, frac, edges, counts)


# ---------------------------------------------------------------------------
# SER sweep

@dataclass
class SerRow:
    ebn0_db: float
    num_symbols: int
    num_errors: int

    @property
    def ser(self) -> float:
        return self.num_errors / self.num_symbols

    @property
    def stderr(self) -> float:
        p = self.ser
        return math.sqrt(p * (1.0 - p) / self.num_symbols)


@dataclass
class SerTable:
    rows: list[SerRow] = field(default_factory=list)

    def sers(self) -> Array:
        return np.array([r.ser for r in self.rows])

    def stderrs(self) -> Array:
        return np.array([r.stderr for r in self.rows])


def ser_sweep(codec: ae.CodecPair, channel_fn, ebn0_list, rng: np.random.Generator,
              min_symbols: int = 10_000, min_errors: int = 100,
              max_symbols: int = 10_000_000, chunk: int = 10_000) -> SerTable:
    """Monte-Carlo SER of the frozen codec over the listed Eb/N0 points.

    channel_fn(x, sigma, rng) applies the real channel. Each point runs
    until both min_symbols and min_errors are reached, capped at
    max_symbols. Rate is log2(M)/n from the codec dimensions.
    """
    if min_symbols < 10_000:
        raise ContractError("min_symbols must be at least 1e4")
    rate = math.log2(codec.n_messages) / codec.block_dim
    codebook = ae.encode(codec, np.arange(codec.n_messages))
    table = SerTable()
    for db in ebn0_list:
        sigma = ebn0_to_sigma(EbN0Spec(float(db), rate))
        symbols = 0
        errors = 0
        while (symbols < min_symbols or errors < min_errors) and symbols < max_symbols:
            n = min(chunk, max_symbols - symbols)
            m = rng.integers(0, codec.n_messages, n)
            y = channel_fn(codebook[m], sigma, rng)
            preds = ae.hard_decision(ae.decode(codec, y))
            errors += int(np.count_nonzero(preds != m))
            symbols += n
        table.rows.append(SerRow(float(db), symbols, errors))
    return table


# ---------------------------------------------------------------------------
# channel fidelity (surrogate vs truth, per message)

@dataclass
class FidelityRow:
    message: int
    ks_norm: float
    mean_err: float
    cov_err: float


@dataclass
class FidelityReport:
    rows: list[FidelityRow]
    norms_true: dict[int, Array]
    norms_generated: dict[int, Array]
    constellation_true: dict[int, Array]
    constellation_generated: dict[int, Array]

    def worst_ks(self) -> float:
        return max(r.ks_norm for r in self.rows)


def channel_fidelity_report(true_sampler, surrogate_sampler, codebook: Array,
                            samples_per_message: int, rng: np.random.Generator,
                            constellation_samples: int = 70) -> FidelityReport:
    """Compare surrogate to truth message by message.

    Samplers have signature sampler(m, fm, size, rng) -> (size, n) outputs.
    Per message: KS distance between output-norm samples, distance between
    output means, Frobenius distance between output covariances. The first
    `constellation_samples` outputs of each are kept for scatter dumps.
    """
    if samples_per_message < 1_000:
        raise ContractError("samples_per_message must be at least 1e3")
    codebook = np.asarray(codebook, dtype=np.float64)
    rows = []
    norms_t: dict[int, Array] = {}
    norms_g: dict[int, Array] = {}
    const_t: dict[int, Array] = {}
    const_g: dict[int, Array] = {}
    for m in range(codebook.shape[0]):
        fm = codebook[m]
        yt = np.asarray(true_sampler(m, fm, samples_per_message, rng), dtype=np.float64)
        yg = np.asarray(surrogate_sampler(m, fm, samples_per_message, rng), dtype=np.float64)
        nt = np.linalg.norm(yt, axis=1)
        ng = np.linalg.norm(yg, axis=1)
        rows.append(FidelityRow(
            message=m,
            ks_norm=ks_statistic(nt, ng),
            mean_err=float(np.linalg.norm(yt.mean(axis=0) - yg.mean(axis=0))),
            cov_err=float(np.linalg.norm(np.cov(yt.T) - np.cov(yg.T))),
        ))
        norms_t[m] = nt
        norms_g[m] = ng
        const_t[m] = yt[:constellation_samples]
        const_g[m] = yg[:constellation_samples]
    return FidelityReport(rows, norms_t, norms_g, const_t, const_g)


# ---------------------------------------------------------------------------
# CSV writers (plain ASCII, deterministic shortest-round-trip floats)

def _fmt(x) -> str:
    return repr(float(x))


def write_ser_csv(path, table: SerTable) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("ebn0_db,num_symbols,num_errors,ser,stderr\n")
        for r in table.rows:
            fh.write(f"{_fmt(r.ebn0_db)},{r.num_symbols},{r.num_errors},"
                     f"{_fmt(r.ser)},{_fmt(r.stderr)}\n")


def read_ser_csv(path) -> SerTable:
    table = SerTable()
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != "ebn0_db,num_symbols,num_errors,ser,stderr":
            raise ContractError("unexpected ser.csv header")
        for line in fh:
            db, ns, ne, _, _ = line.strip().split(",")
            table.rows.append(SerRow(float(db), int(ns), int(ne)))
    return table


def write_norms_csv(path, norms_by_message: dict[int, Array]) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("message,sample_idx,norm\n")
        for m in sorted(norms_by_message):
            for i, v in enumerate(np.asarray(norms_by_message[m]).ravel()):
                fh.write(f"{m},{i},{_fmt(v)}\n")


def write_constellation_csv(path, points_by_message: dict[int, Array]) -> None:
    first = next(iter(points_by_message.values()))
    n = np.atleast_2d(first).shape[1]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("message," + ",".join(f"dim{i}" for i in range(n)) + "\n")
        for m in sorted(points_by_message):
            for row in np.atleast_2d(points_by_message[m]):
                fh.write(f"{m}," + ",".join(_fmt(v) for v in row) + "\n")


def write_fidelity_csv(path, report: FidelityReport) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("message,ks_norm,mean_err,cov_err\n")
        for r in report.rows:
            fh.write(f"{r.message},{_fmt(r.ks_norm)},{_fmt(r.mean_err)},{_fmt(r.cov_err)}\n")
