"""Alternating optimization of codec and channel surrogate.

One run alternates phases: train the generative channel model on fresh
(codeword, true-channel-output) pairs sampled with the current encoder, then
freeze it and train the autoencoder through it. Early phases are
generator-heavy, late phases autoencoder-heavy; the switch to the late block
happens early if the encoder constellation stops moving (drift below
threshold twice in a row). The model_aware surrogate skips generator phases
and reduces to plain AE training through the true channel.

Everything is driven by named deterministic rng streams derived from the
master seed, so identical configs reproduce identical runs bit for bit.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autoencoder as ae
from . import diffusion as df
from . import numkit as nk
from . import wgan as wg
from .channels import EbN0Spec, RayleighParams, awgn_apply, ebn0_to_sigma, rayleigh_apply
from .numkit import Array, ContractError

CHANNEL_KINDS = ("awgn", "rayleigh")
SURROGATE_KINDS = ("model_aware", "ddpm", "wgan")


class TrainAbort(RuntimeError):
    """Training stopped on a non-finite loss, with phase/epoch context."""


@dataclass
class RunConfig:
    """Flat experiment configuration; defaults follow the AWGN E2E setup."""
    # channel and operating point
    channel: str = "awgn"
    sigma_r: float = 1.0
    train_ebn0_db: float = 5.0
    # codec dimensions
    n_messages: int = 16
    block_dim: int = 7
    codec_hidden: int = 16
    ae_lr: float = 1e-3
    # surrogate selection
    surrogate: str = "ddpm"
    # diffusion surrogate
    diffusion_t: int = 50
    diffusion_beta: float = 0.05
    reverse_noise: str = "beta"
    denoiser_hidden: int = 64
    denoiser_depth: int = 3
    denoiser_lr_initial: float = 1e-3
    denoiser_lr_final: float = 1e-5
    # wgan surrogate
    wgan_hidden: int = 128
    wgan_clip: float = 0.01
    wgan_n_critic: int = 5
    wgan_lr: float = 1e-4
    # data
    dataset_size: int = 100_000
    batch_size: int = 3000
    # alternation schedule
    early_phases: int = 5
    late_phases: int = 5
    early_gen_epochs: int = 50
    early_ae_epochs: int = 5
    late_gen_epochs: int = 10
    late_ae_epochs: int = 50
    drift_threshold: float = 0.05
    # master seed
    seed: int = 0

    def __post_init__(self):
        if self.channel not in CHANNEL_KINDS:
            raise ContractError(f"channel must be one of {CHANNEL_KINDS}")
        if self.surrogate not in SURROGATE_KINDS:
            raise ContractError(f"surrogate must be one of {SURROGATE_KINDS}")
        if self.reverse_noise not in df.REVERSE_NOISE_KINDS:
            raise ContractError(f"reverse_noise must be one of {df.REVERSE_NOISE_KINDS}")
        if not (self.dataset_size >= self.batch_size >= 1):
            raise ContractError("need dataset_size >= batch_size >= 1")
        if self.early_phases + self.late_phases < 1:
            raise ContractError("alternation schedule needs at least one phase")
        if not 0 < self.diffusion_beta < 1:
            raise ContractError("beta must lie in (0,1)")

    @property
    def rate(self) -> float:
        return math.log2(self.n_messages) / self.block_dim

    @property
    def train_sigma(self) -> float:
        return ebn0_to_sigma(EbN0Spec(self.train_ebn0_db, self.rate))

    def phases(self) -> list[tuple[str, int, int]]:
        """(stage, gen_epochs, ae_epochs) triples in execution order."""
        early = [("early", self.early_gen_epochs, self.early_ae_epochs)] * self.early_phases
        late = [("late", self.late_gen_epochs, self.late_ae_epochs)] * self.late_phases
        return early + late


@dataclass
class PhaseRecord:
    phase: int
    stage: str
    gen_lr: float
    gen_losses: list[float] = field(default_factory=list)   # per epoch
    ae_losses: list[float] = field(default_factory=list)    # per epoch
    drift: float = math.nan
    codec_sum_before_gen: str = ""
    codec_sum_after_gen: str = ""
    surrogate_sum_before_ae: str = ""
    surrogate_sum_after_ae: str = ""


@dataclass
class TrainReport:
    phases: list[PhaseRecord] = field(default_factory=list)
    drift_trace: list[float] = field(default_factory=list)
    wall_clock: float = 0.0
    codec_checksum: str = ""
    surrogate_checksum: str = ""


# ---------------------------------------------------------------------------
# deterministic streams / checksums

def make_rng_stream(master_seed: int, stream_label: str) -> np.random.Generator:
    """Independent deterministic generator per (seed, label)."""
    digest = hashlib.sha256(f"{master_seed}:{stream_label}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def params_checksum(params: list[Array]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(str(p.shape).encode())
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


def constellation_drift(prev: Array, curr: Array) -> float:
    """Mean over messages of ||prev_m - curr_m|| / sqrt(n)."""
    prev = np.asarray(prev, dtype=np.float64)
    curr = np.asarray(curr, dtype=np.float64)
    if prev.shape != curr.shape:
        raise nk.ShapeError("constellation shapes differ")
    n = prev.shape[1]
    return float(np.mean(np.linalg.norm(prev - curr, axis=1)) / math.sqrt(n))


def draw_message_dataset(cfg: RunConfig, rng: np.random.Generator) -> Array:
    return rng.integers(0, cfg.n_messages, cfg.dataset_size)


# ---------------------------------------------------------------------------
# pieces

def _real_channel_fn(cfg: RunConfig):
    sigma = cfg.train_sigma
    if cfg.channel == "awgn":
        return lambda x, rng: awgn_apply(x, sigma, rng)
    params = RayleighParams(cfg.sigma_r)
    return lambda x, rng: rayleigh_apply(x, sigma, params, rng)[0]


def _build_surrogate(cfg: RunConfig, rng: np.random.Generator):
    """Returns (channel protocol object, trainable-params list or None)."""
    if cfg.surrogate == "model_aware":
        if cfg.channel == "awgn":
            return ae.ModelAwareAwgn(cfg.train_sigma), None
        return ae.ModelAwareRayleigh(cfg.train_sigma, RayleighParams(cfg.sigma_r)), None
    if cfg.surrogate == "ddpm":
        den = df.make_denoiser(cfg.block_dim, cfg.n_messages, cfg.diffusion_t,
                               rng, hidden=cfg.denoiser_hidden, depth=cfg.denoiser_depth)
        sched = df.build_schedule(cfg.diffusion_t, cfg.diffusion_beta)
        return df.GeneratedChannel(den, sched, cfg.reverse_noise), den.params()
    pair = wg.make_wgan(cfg.block_dim, rng, hidden=cfg.wgan_hidden, clip_c=cfg.wgan_clip)
    return wg.WganChannel(pair), pair.generator.params() + pair.critic.params()


def _phase_lrs(cfg: RunConfig, n_phases: int) -> list[float]:
    """Geometric interpolation initial -> final across phases."""
    lo, hi = cfg.denoiser_lr_final, cfg.denoiser_lr_initial
    if n_phases <= 1:
        return [hi] * max(n_phases, 1)
    return [hi * (lo / hi) ** (i / (n_phases - 1)) for i in range(n_phases)]


def _epoch_batches(messages: Array, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(messages.size)
    for start in range(0, messages.size, batch_size):
        yield messages[order[start:start + batch_size]]


def _train_ddpm_epoch(chan: df.GeneratedChannel, codebook, messages, cfg,
                      sample_real, opt, data_rng, noise_rng) -> float:
    losses = []
    for m in _epoch_batches(messages, cfg.batch_size, data_rng):
        fm = codebook[m]
        y_true = sample_real(fm, noise_rng)
        cond = df.Condition(m, fm)
        losses.append(df.diffusion_train_step(chan.den, cond, y_true,
                                              chan.sched, opt, noise_rng))
    return float(np.mean(losses))


def _train_wgan_epoch(chan: wg.WganChannel, codebook, messages, cfg,
                      sample_real, c_opt, g_opt, data_rng, noise_rng) -> float:
    estimates = []
    for i, m in enumerate(_epoch_batches(messages, cfg.batch_size, data_rng)):
        fm = codebook[m]
        real = sample_real(fm, noise_rng)
        fake = wg.wgan_generate(chan.pair, fm, noise_rng)
        estimates.append(wg.critic_step(chan.pair, real, fake, fm, c_opt))
        if (i + 1) % cfg.wgan_n_critic == 0:
            wg.generator_step(chan.pair, fm, g_opt, noise_rng)
    return float(np.mean(estimates))


# ---------------------------------------------------------------------------
# orchestration

def alternate_train(cfg: RunConfig, log=None, on_phase_end=None):
    """Run the full alternation; returns (codec, surrogate channel, report).

    on_phase_end(phase_index, codec, surrogate), when given, runs after every
    executed phase (checkpointing hook).
    """
    t_start = time.monotonic()
    say = log if log is not None else (lambda *_: None)

    init_rng = make_rng_stream(cfg.seed, "init")
    codec = ae.make_codec(cfg.n_messages, cfg.block_dim, init_rng, hidden=cfg.codec_hidden)
    surrogate, surrogate_params = _build_surrogate(cfg, init_rng)
    sample_real = _real_channel_fn(cfg)

    data_rng = make_rng_stream(cfg.seed, "data")
    noise_rng = make_rng_stream(cfg.seed, "channel-noise")
    ae_rng = make_rng_stream(cfg.seed, "ae-train")

    ae_opt = nk.OptimizerState.create("nadam", cfg.ae_lr, codec.params())
    gen_opt = c_opt = g_opt = None
    if cfg.surrogate == "ddpm":
        gen_opt = nk.OptimizerState.create("adam", cfg.denoiser_lr_initial,
                                           surrogate.den.params())
    elif cfg.surrogate == "wgan":
        c_opt = nk.OptimizerState.create("rmsprop", cfg.wgan_lr,
                                         surrogate.pair.critic.params())
        g_opt = nk.OptimizerState.create("rmsprop", cfg.wgan_lr,
                                         surrogate.pair.generator.params())

    plan = cfg.phases()
    lrs = _phase_lrs(cfg, len(plan))
    report = TrainReport()
    steps_per_ae_epoch = max(1, cfg.dataset_size // cfg.batch_size)
    consecutive_converged = 0
    skipping_early = False

    for p, (stage, gen_epochs, ae_epochs) in enumerate(plan):
        if stage == "early" and skipping_early:
            continue
        rec = PhaseRecord(phase=p, stage=stage, gen_lr=lrs[p])
        rec.codec_sum_before_gen = params_checksum(codec.params())

        # --- surrogate phase (skipped entirely for model_aware)
        if cfg.surrogate != "model_aware":
            if gen_opt is not None:
                gen_opt.learning_rate = lrs[p]
            codebook = ae.encode(codec, np.arange(cfg.n_messages))
            messages = draw_message_dataset(cfg, data_rng)
            for e in range(gen_epochs):
                try:
                    if cfg.surrogate == "ddpm":
                        loss = _train_ddpm_epoch(surrogate, codebook, messages, cfg,
                                                 sample_real, gen_opt, data_rng, noise_rng)
                    else:
                        loss = _train_wgan_epoch(surrogate, codebook, messages, cfg,
                                                 sample_real, c_opt, g_opt,
                                                 data_rng, noise_rng)
                except nk.NonFiniteError as err:
                    raise TrainAbort(f"surrogate phase {p} epoch {e}: {err}") from err
                rec.gen_losses.append(loss)
            say(f"phase {p} ({stage}): surrogate loss "
                f"{rec.gen_losses[0]:.4f} -> {rec.gen_losses[-1]:.4f}")
        rec.codec_sum_after_gen = params_checksum(codec.params())

        # --- autoencoder phase through the frozen surrogate
        if surrogate_params is not None:
            rec.surrogate_sum_before_ae = params_checksum(surrogate_params)
        before = ae.encode(codec, np.arange(cfg.n_messages))
        for e in range(ae_epochs):
            losses = []
            for _ in range(steps_per_ae_epoch):
                m = ae_rng.integers(0, cfg.n_messages, cfg.batch_size)
                try:
                    losses.append(ae.ae_train_step(codec, surrogate, m, ae_opt, ae_rng))
                except nk.NonFiniteError as err:
                    raise TrainAbort(f"AE phase {p} epoch {e}: {err}") from err
            rec.ae_losses.append(float(np.mean(losses)))
        if surrogate_params is not None:
            rec.surrogate_sum_after_ae = params_checksum(surrogate_params)
        after = ae.encode(codec, np.arange(cfg.n_messages))
        rec.drift = constellation_drift(before, after)
        report.drift_trace.append(rec.drift)
        report.phases.append(rec)
        if on_phase_end is not None:
            on_phase_end(p, codec, surrogate)
        if rec.ae_losses:
            say(f"phase {p} ({stage}): AE loss {rec.ae_losses[0]:.4f} -> "
                f"{rec.ae_losses[-1]:.4f}, drift {rec.drift:.4f}")

        # --- early-block exit on convergence
        if stage == "early":
            if rec.drift < cfg.drift_threshold:
                consecutive_converged += 1
                if consecutive_converged >= 2:
                    skipping_early = True
                    say(f"phase {p}: constellation converged, moving to late block")
            else:
                consecutive_converged = 0

    report.wall_clock = time.monotonic() - t_start
    report.codec_checksum = params_checksum(codec.params())
    if surrogate_params is not None:
        report.surrogate_checksum = params_checksum(surrogate_params)
    return codec, surrogate, report


# ---------------------------------------------------------------------------
# report serialization

def write_report_csv(path, report: TrainReport) -> None:
    """Per-epoch loss trace: one row per (phase, loop, epoch)."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("phase,stage,loop,epoch,loss\n")
        for rec in report.phases:
            for e, v in enumerate(rec.gen_losses):
                fh.write(f"{rec.phase},{rec.stage},gen,{e},{v!r}\n")
            for e, v in enumerate(rec.ae_losses):
                fh.write(f"{rec.phase},{rec.stage},ae,{e},{v!r}\n")


def write_report_summary(path, report: TrainReport) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("train summary\n")
        fh.write(f"wall_clock_s {report.wall_clock:.3f}\n")
        fh.write(f"codec_checksum {report.codec_checksum}\n")
        fh.write(f"surrogate_checksum {report.surrogate_checksum}\n")
        fh.write("drift_trace " + " ".join(repr(d) for d in report.drift_trace) + "\n")
        for rec in report.phases:
            gl = f"{rec.gen_losses[0]:.6g}->{rec.gen_losses[-1]:.6g}" if rec.gen_losses else "-"
            al = f"{rec.ae_losses[0]:.6g}->{rec.ae_losses[-1]:.6g}" if rec.ae_losses else "-"
            fh.write(f"phase {rec.phase} stage {rec.stage} gen_lr {rec.gen_lr:.3g} "
                     f"gen {gl} ae {al} drift {rec.drift:.6g}\n")
