"""Command-line harness: configs, run directories, and canned experiments.

Subcommands:
    train            alternate_train from a key=value config file
    eval-ser         SER sweep of a saved codec through a real channel
    gen-fidelity     per-message fidelity report of a saved surrogate
    recipe           full canned experiment (fig2_awgn_qam16, fig3_awgn_e2e,
                     fig4_rayleigh_e2e)
    dump-trajectory  forward/reverse diffusion chain snapshots as CSV

Config files are flat `key=value` lines with section prefixes
(`diffusion.T=50`); unknown keys are rejected with the offending line
number. The master seed can be overridden by the E2EDIFF_SEED environment
variable, which beats both config files and --seed flags.

Every command writes a self-contained run directory: a config snapshot,
a seed record, the checkpoints involved, the result CSVs, emitted plot
scripts, and manifest.txt with a sha256 per file.

Exit codes: 0 ok, 2 usage, 3 config error, 4 missing/corrupt checkpoint,
5 training or generation failure.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import shutil
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autoencoder as ae
from . import diffusion as df
from . import evalstats as ev
from . import numkit as nk
from . import trainer as tr
from . import wgan as wg
from .channels import (QAM16, EbN0Spec, RayleighParams, awgn_apply,
                       ebn0_to_sigma, rayleigh_apply)
from .numkit import ContractError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_RUNTIME = 5


class ConfigError(Exception):
    """Unparseable or invalid configuration."""


class MissingArtifactError(Exception):
    """A required checkpoint file is absent or corrupt."""


# ---------------------------------------------------------------------------
# flat key=value config format

_CONFIG_KEYS: list[tuple[str, str]] = [
    ("channel.kind", "channel"),
    ("channel.sigma_r", "sigma_r"),
    ("channel.train_ebn0_db", "train_ebn0_db"),
    ("codec.n_messages", "n_messages"),
    ("codec.block_dim", "block_dim"),
    ("codec.hidden", "codec_hidden"),
    ("codec.lr", "ae_lr"),
    ("surrogate.kind", "surrogate"),
    ("diffusion.T", "diffusion_t"),
    ("diffusion.beta", "diffusion_beta"),
    ("diffusion.reverse_noise", "reverse_noise"),
    ("diffusion.hidden", "denoiser_hidden"),
    ("diffusion.depth", "denoiser_depth"),
    ("diffusion.lr_initial", "denoiser_lr_initial"),
    ("diffusion.lr_final", "denoiser_lr_final"),
    ("wgan.hidden", "wgan_hidden"),
    ("wgan.clip", "wgan_clip"),
    ("wgan.n_critic", "wgan_n_critic"),
    ("wgan.lr", "wgan_lr"),
    ("data.dataset_size", "dataset_size"),
    ("data.batch_size", "batch_size"),
    ("schedule.early_phases", "early_phases"),
    ("schedule.late_phases", "late_phases"),
    ("schedule.early_gen_epochs", "early_gen_epochs"),
    ("schedule.early_ae_epochs", "early_ae_epochs"),
    ("schedule.late_gen_epochs", "late_gen_epochs"),
    ("schedule.late_ae_epochs", "late_ae_epochs"),
    ("schedule.drift_threshold", "drift_threshold"),
    ("run.seed", "seed"),
]
_KEY_TO_FIELD = dict(_CONFIG_KEYS)
_KEY_TO_FIELD["beta_t"] = "diffusion_beta"   # accepted shorthand
_FIELD_TYPES = {f.name: {"str": str, "int": int, "float": float}[f.type]
                for f in fields(tr.RunConfig)}


def parse_config(text: str) -> tr.RunConfig:
    """Parse flat key=value text; empty text yields the all-defaults config."""
    updates: dict = {}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _KEY_TO_FIELD:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        name = _KEY_TO_FIELD[key]
        if name in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} "
                              f"(first set on line {seen[name]})")
        seen[name] = lineno
        want = _FIELD_TYPES[name]
        try:
            updates[name] = want(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: cannot parse {value!r} as "
                              f"{want.__name__} for {key}") from None
    try:
        return tr.RunConfig(**updates)
    except ContractError as err:
        raise ConfigError(str(err)) from err


def serialize_config(cfg: tr.RunConfig) -> str:
    """Canonical text form; parse_config(serialize_config(c)) == c."""
    lines = []
    for key, name in _CONFIG_KEYS:
        v = getattr(cfg, name)
        lines.append(f"{key}={v!r}" if isinstance(v, float) else f"{key}={v}")
    return "\n".join(lines) + "\n"


def _env_seed() -> int | None:
    raw = os.environ.get("E2EDIFF_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"E2EDIFF_SEED must be an integer, got {raw!r}") from None


def load_config(path) -> tr.RunConfig:
    try:
        text = Path(path).read_text(encoding="ascii")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    cfg = parse_config(text)
    env = _env_seed()
    if env is not None:
        cfg = replace(cfg, seed=env)
    return cfg


def _resolve_seed(default_seed: int, cli_seed) -> int:
    env = _env_seed()
    if env is not None:
        return env
    if cli_seed is not None:
        return int(cli_seed)
    return default_seed


# ---------------------------------------------------------------------------
# run directories

def _prepare_dir(out) -> Path:
    run_dir = Path(out)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)


def _write_seed(run_dir: Path, seed: int) -> None:
    _write_text(run_dir / "seed.txt", f"master_seed={seed}\n")


def _write_args_snapshot(run_dir: Path, pairs: dict) -> None:
    body = "".join(f"{k}={v}\n" for k, v in pairs.items())
    _write_text(run_dir / "config.txt", body)


def write_manifest(run_dir: Path) -> None:
    entries = []
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.txt":
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            entries.append(f"{digest}  {p.relative_to(run_dir).as_posix()}\n")
    _write_text(run_dir / "manifest.txt", "".join(entries))


def save_surrogate(path, surrogate) -> bool:
    """Checkpoint whichever surrogate kind this is; False for model_aware."""
    if isinstance(surrogate, df.GeneratedChannel):
        df.save_denoiser(path, surrogate.den, surrogate.sched)
        return True
    if isinstance(surrogate, wg.WganChannel):
        wg.save_wgan(path, surrogate.pair)
        return True
    return False


def _load_surrogate(path):
    """Load a surrogate checkpoint; returns ('ddpm', den, sched) or ('wgan', pair)."""
    try:
        kind = nk.load_checkpoint(path).get("kind")
        if kind == "denoiser":
            den, sched = df.load_denoiser(path)
            return "ddpm", den, sched
        if kind == "wgan":
            return "wgan", wg.load_wgan(path), None
        raise MissingArtifactError(f"{path}: not a surrogate checkpoint (kind={kind!r})")
    except OSError as err:
        raise MissingArtifactError(f"checkpoint not found: {path}") from err
    except ContractError as err:
        raise MissingArtifactError(f"corrupt checkpoint {path}: {err}") from err


def _load_codec(path) -> ae.CodecPair:
    try:
        return ae.load_codec(path)
    except OSError as err:
        raise MissingArtifactError(f"checkpoint not found: {path}") from err
    except ContractError as err:
        raise MissingArtifactError(f"corrupt checkpoint {path}: {err}") from err


# ---------------------------------------------------------------------------
# channels and samplers shared by the eval commands

def _real_channel_factory(channel: str, sigma_r: float):
    """channel_fn(x, sigma, rng) for ser_sweep and the fidelity truth."""
    if channel == "awgn":
        return lambda x, sigma, rng: awgn_apply(x, sigma, rng)
    params = RayleighParams(sigma_r)
    return lambda x, sigma, rng: rayleigh_apply(x, sigma, params, rng)[0]


def _true_sampler(channel_fn, sigma):
    def sampler(m, fm, size, rng):
        return channel_fn(np.tile(fm, (size, 1)), sigma, rng)
    return sampler


def _ddpm_sampler(den, sched, reverse_noise):
    def sampler(m, fm, size, rng):
        cond = df.Condition(np.full(size, m), np.tile(fm, (size, 1)))
        return df.generate_channel_output(den, cond, sched, rng, reverse_noise)
    return sampler


def _wgan_sampler(pair):
    def sampler(m, fm, size, rng):
        return wg.wgan_generate(pair, np.tile(fm, (size, 1)), rng)
    return sampler


def _qam16_codec_book() -> np.ndarray:
    return np.array(QAM16)


def _codebook_from_args(args) -> tuple[np.ndarray, float, Path | None]:
    """Returns (codebook, rate, codec checkpoint path or None for 16-QAM)."""
    if args.qam16:
        book = _qam16_codec_book()
        return book, 2.0, None
    codec = _load_codec(args.codec)
    book = ae.encode(codec, np.arange(codec.n_messages))
    rate = np.log2(codec.n_messages) / codec.block_dim
    return book, float(rate), Path(args.codec)


# ---------------------------------------------------------------------------
# emitted plot scripts (text artifacts for an external plotting step)

_PLOT_SER = '''#!/usr/bin/env python3
"""Plot every ser*.csv in this directory on one semilog SER chart."""
import csv
import glob

import matplotlib.pyplot as plt

for path in sorted(glob.glob("ser*.csv")):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    db = [float(r["ebn0_db"]) for r in rows]
    ser = [float(r["ser"]) for r in rows]
    bar = [3.0 * float(r["stderr"]) for r in rows]
    plt.errorbar(db, ser, yerr=bar, marker="o", capsize=3, label=path)
plt.yscale("log")
plt.xlabel("Eb/N0 [dB]")
plt.ylabel("SER")
plt.grid(True, which="both", alpha=0.3)
plt.legend()
plt.savefig("ser.png", dpi=150)
'''

_PLOT_FIDELITY = '''#!/usr/bin/env python3
"""Output-norm histograms/ECDFs and constellation scatter, true vs generated."""
import csv
from collections import defaultdict

import matplotlib.pyplot as plt


def load_norms(path):
    by_m = defaultdict(list)
    with open(path) as fh:
        for row in csv.DictReader(fh):
            by_m[int(row["message"])].append(float(row["norm"]))
    return by_m


def load_points(path):
    by_m = defaultdict(list)
    with open(path) as fh:
        reader = csv.DictReader(fh)
        dims = [k for k in reader.fieldnames if k.startswith("dim")]
        for row in reader:
            by_m[int(row["message"])].append([float(row[d]) for d in dims])
    return by_m


true_norms = load_norms("norms_true.csv")
gen_norms = load_norms("norms.csv")
fig, axes = plt.subplots(1, 2, figsize=(10, 4))
m = sorted(true_norms)[0]
axes[0].hist(true_norms[m], bins=60, density=True, alpha=0.5, label="true")
axes[0].hist(gen_norms[m], bins=60, density=True, alpha=0.5, label="generated")
axes[0].set_title(f"output norm, message {m}")
axes[0].legend()
for vals, label in ((true_norms[m], "true"), (gen_norms[m], "generated")):
    xs = sorted(vals)
    ys = [i / len(xs) for i in range(1, len(xs) + 1)]
    axes[1].plot(xs, ys, label=label)
axes[1].set_title("ECDF")
axes[1].legend()
fig.savefig("fidelity.png", dpi=150)

fig2, ax = plt.subplots(figsize=(5, 5))
for path, color in (("constellation_true.csv", "C0"), ("constellation.csv", "C1")):
    pts = load_points(path)
    for mm, rows in pts.items():
        xs = [r[0] for r in rows]
        ys = [r[1] if len(r) > 1 else 0.0 for r in rows]
        ax.scatter(xs, ys, s=4, color=color, alpha=0.4)
ax.set_title("channel output, true (C0) vs generated (C1)")
fig2.savefig("constellation.png", dpi=150)
'''

_PLOT_TRAJECTORY = '''#!/usr/bin/env python3
"""Scatter the reverse-chain states at a few steps from trajectory CSVs."""
import csv
from collections import defaultdict

import matplotlib.pyplot as plt


def load(path):
    by_t = defaultdict(list)
    with open(path) as fh:
        reader = csv.DictReader(fh)
        dims = [k for k in reader.fieldnames if k.startswith("dim")]
        for row in reader:
            by_t[int(row["t"])].append([float(row[d]) for d in dims])
    return by_t


for name in ("trajectory_forward.csv", "trajectory_reverse.csv"):
    by_t = load(name)
    ts = sorted(by_t)
    picks = [ts[0], ts[len(ts) // 2], ts[-1]]
    fig, axes = plt.subplots(1, len(picks), figsize=(4 * len(picks), 4))
    for ax, t in zip(axes, picks):
        pts = by_t[t]
        xs = [p[0] for p in pts]
        ys = [p[1] if len(p) > 1 else 0.0 for p in pts]
        ax.scatter(xs, ys, s=6)
        ax.set_title(f"t = {t}")
    fig.savefig(name.replace(".csv", ".png"), dpi=150)
'''


# ---------------------------------------------------------------------------
# experiment recipes

RECIPE_NAMES = ("fig2_awgn_qam16", "fig3_awgn_e2e", "fig4_rayleigh_e2e")


@dataclass(frozen=True)
class ExperimentRecipe:
    """A canned experiment: bound configs plus its evaluation plan."""
    name: str
    config: tr.RunConfig
    config_model_aware: tr.RunConfig | None = None
    config_wgan: tr.RunConfig | None = None
    ebn0_grid: tuple = ()
    fidelity_samples: int = 10_000
    denoiser_epochs: int = 0        # standalone denoiser training (fig2)
    lr_segments: int = 4
    min_symbols: int = 10_000
    min_errors: int = 100
    max_symbols: int = 10_000_000


def recipe_fig2_awgn_qam16(quick: bool = False) -> ExperimentRecipe:
    """Conditional DDPM imitating AWGN around 16-QAM at 5 dB (rate 2)."""
    cfg = tr.RunConfig(
        channel="awgn", train_ebn0_db=5.0,
        n_messages=16, block_dim=2,
        surrogate="ddpm",
        diffusion_t=100, diffusion_beta=0.05, reverse_noise="sqrt_beta",
        denoiser_hidden=64, denoiser_depth=3,
        denoiser_lr_initial=1e-3, denoiser_lr_final=1e-4,
        dataset_size=100_000, batch_size=3000,
        seed=11,
    )
    epochs, samples = 240, 10_000
    if quick:
        cfg = replace(cfg, dataset_size=12_000)
        epochs, samples = 3, 1_000
    return ExperimentRecipe(name="fig2_awgn_qam16", config=cfg,
                            fidelity_samples=samples, denoiser_epochs=epochs)


def recipe_fig3_awgn_e2e(quick: bool = False) -> ExperimentRecipe:
    """(7,16) autoencoder over AWGN at 5 dB: model-aware vs DDPM vs WGAN."""
    ddpm = tr.RunConfig(
        channel="awgn", train_ebn0_db=5.0,
        n_messages=16, block_dim=7, codec_hidden=16, ae_lr=1e-3,
        surrogate="ddpm",
        diffusion_t=50, diffusion_beta=0.05, reverse_noise="sqrt_beta",
        denoiser_hidden=64, denoiser_depth=3,
        denoiser_lr_initial=1e-3, denoiser_lr_final=1e-5,
        wgan_hidden=128, wgan_clip=0.01, wgan_n_critic=5, wgan_lr=1e-4,
        dataset_size=100_000, batch_size=3000,
        early_phases=2, late_phases=14,
        early_gen_epochs=50, early_ae_epochs=3,
        late_gen_epochs=12, late_ae_epochs=6,
        drift_threshold=0.05, seed=22,
    )
    model_aware = replace(ddpm, surrogate="model_aware",
                          early_phases=2, late_phases=2,
                          early_gen_epochs=0, late_gen_epochs=0,
                          early_ae_epochs=10, late_ae_epochs=40)
    # the critic/generator pair needs a longer warm start and a looser clip
    # than the module defaults to stay on the target curve at 5 dB
    wgan = replace(ddpm, surrogate="wgan",
                   wgan_clip=0.05, early_gen_epochs=100)
    grid = tuple(float(d) for d in range(2, 9))
    rec = ExperimentRecipe(name="fig3_awgn_e2e", config=ddpm,
                           config_model_aware=model_aware, config_wgan=wgan,
                           ebn0_grid=grid)
    if quick:
        shrink = dict(dataset_size=12_000, early_phases=1, late_phases=1,
                      early_gen_epochs=2, early_ae_epochs=1,
                      late_gen_epochs=1, late_ae_epochs=1)
        rec = replace(rec,
                      config=replace(ddpm, **shrink),
                      config_model_aware=replace(model_aware, dataset_size=12_000,
                                                 early_phases=1, late_phases=1,
                                                 early_ae_epochs=2, late_ae_epochs=2),
                      config_wgan=replace(wgan, **shrink),
                      ebn0_grid=(4.0, 6.0),
                      min_errors=0, max_symbols=20_000)
    return rec


def recipe_fig4_rayleigh_e2e(quick: bool = False) -> ExperimentRecipe:
    """(7,16) autoencoder over Rayleigh fading at 12 dB, sigma_R = 1."""
    base = recipe_fig3_awgn_e2e()
    ddpm = replace(base.config, channel="rayleigh", sigma_r=1.0,
                   train_ebn0_db=12.0, wgan_hidden=256, wgan_lr=5e-5, seed=33)
    model_aware = replace(base.config_model_aware, channel="rayleigh", sigma_r=1.0,
                          train_ebn0_db=12.0, wgan_hidden=256, wgan_lr=5e-5, seed=33)
    wgan = replace(ddpm, surrogate="wgan",
                   wgan_clip=0.05, early_gen_epochs=100)
    grid = tuple(float(d) for d in range(1, 26))
    rec = ExperimentRecipe(name="fig4_rayleigh_e2e", config=ddpm,
                           config_model_aware=model_aware, config_wgan=wgan,
                           ebn0_grid=grid)
    if quick:
        shrink = dict(dataset_size=12_000, early_phases=1, late_phases=1,
                      early_gen_epochs=2, early_ae_epochs=1,
                      late_gen_epochs=1, late_ae_epochs=1)
        rec = replace(rec,
                      config=replace(ddpm, **shrink),
                      config_model_aware=replace(model_aware, dataset_size=12_000,
                                                 early_phases=1, late_phases=1,
                                                 early_ae_epochs=2, late_ae_epochs=2),
                      config_wgan=replace(wgan, **shrink),
                      ebn0_grid=(10.0, 14.0),
                      min_errors=0, max_symbols=20_000)
    return rec


_RECIPE_BUILDERS = {
    "fig2_awgn_qam16": recipe_fig2_awgn_qam16,
    "fig3_awgn_e2e": recipe_fig3_awgn_e2e,
    "fig4_rayleigh_e2e": recipe_fig4_rayleigh_e2e,
}


def get_recipe(name: str, quick: bool = False) -> ExperimentRecipe:
    if name not in _RECIPE_BUILDERS:
        raise ConfigError(f"unknown recipe {name!r}; choose from {RECIPE_NAMES}")
    return _RECIPE_BUILDERS[name](quick)


# ---------------------------------------------------------------------------
# standalone denoiser training on a fixed codebook (the 16-QAM experiment)

def train_fixed_codebook_denoiser(cfg: tr.RunConfig, codebook: np.ndarray,
                                  epochs: int, lr_segments: int, log=None):
    """Train the conditional denoiser to imitate the real channel around a
    frozen codebook. Returns (denoiser, schedule, per-epoch losses)."""
    say = log if log is not None else (lambda *_: None)
    init_rng = tr.make_rng_stream(cfg.seed, "init")
    den = df.make_denoiser(cfg.block_dim, cfg.n_messages, cfg.diffusion_t,
                           init_rng, hidden=cfg.denoiser_hidden,
                           depth=cfg.denoiser_depth)
    sched = df.build_schedule(cfg.diffusion_t, cfg.diffusion_beta)
    opt = nk.OptimizerState.create("adam", cfg.denoiser_lr_initial, den.params())
    data_rng = tr.make_rng_stream(cfg.seed, "data")
    noise_rng = tr.make_rng_stream(cfg.seed, "channel-noise")
    sample_real = _real_channel_factory(cfg.channel, cfg.sigma_r)
    sigma = cfg.train_sigma
    lo, hi = cfg.denoiser_lr_final, cfg.denoiser_lr_initial
    segs = max(1, lr_segments)
    lrs = [hi * (lo / hi) ** (i / max(segs - 1, 1)) for i in range(segs)]
    losses = []
    for e in range(epochs):
        opt.learning_rate = lrs[min(segs - 1, e * segs // max(epochs, 1))]
        messages = tr.draw_message_dataset(cfg, data_rng)
        epoch_losses = []
        for start in range(0, messages.size, cfg.batch_size):
            m = messages[start:start + cfg.batch_size]
            fm = codebook[m]
            y = sample_real(fm, sigma, noise_rng)
            cond = df.Condition(m, fm)
            epoch_losses.append(df.diffusion_train_step(den, cond, y, sched,
                                                        opt, noise_rng))
        losses.append(float(np.mean(epoch_losses)))
        if e % 20 == 0 or e == epochs - 1:
            say(f"denoiser epoch {e}: loss {losses[-1]:.4f} lr {opt.learning_rate:.2e}")
    return den, sched, losses


def _write_loss_trace(path: Path, losses) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("epoch,loss\n")
        for e, v in enumerate(losses):
            fh.write(f"{e},{v!r}\n")


def _write_fidelity_outputs(run_dir: Path, report: ev.FidelityReport) -> None:
    ev.write_norms_csv(run_dir / "norms.csv", report.norms_generated)
    ev.write_norms_csv(run_dir / "norms_true.csv", report.norms_true)
    ev.write_constellation_csv(run_dir / "constellation.csv",
                               report.constellation_generated)
    ev.write_constellation_csv(run_dir / "constellation_true.csv",
                               report.constellation_true)
    ev.write_fidelity_csv(run_dir / "fidelity.csv", report)
    _write_text(run_dir / "plot_fidelity.py", _PLOT_FIDELITY)


# ---------------------------------------------------------------------------
# subcommand bodies

def _say(msg: str) -> None:
    print(msg, flush=True)


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None and _env_seed() is None:
        cfg = replace(cfg, seed=args.seed)
    run_dir = _prepare_dir(args.out)
    _write_text(run_dir / "config.txt", serialize_config(cfg))
    _write_seed(run_dir, cfg.seed)
    phase_dir = run_dir / "phase_checkpoints"
    phase_dir.mkdir(exist_ok=True)

    def on_phase_end(p, codec, surrogate):
        ae.save_codec(phase_dir / f"codec_phase{p}.ckpt", codec)
        save_surrogate(phase_dir / f"surrogate_phase{p}.ckpt", surrogate)

    codec, surrogate, report = tr.alternate_train(cfg, log=_say,
                                                  on_phase_end=on_phase_end)
    ae.save_codec(run_dir / "codec.ckpt", codec)
    save_surrogate(run_dir / "surrogate.ckpt", surrogate)
    tr.write_report_csv(run_dir / "report.csv", report)
    tr.write_report_summary(run_dir / "summary.txt", report)
    write_manifest(run_dir)
    _say(f"run directory written: {run_dir}")
    return EXIT_OK


def _parse_ebn0_list(raw: str) -> list[float]:
    try:
        values = [float(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse Eb/N0 list {raw!r}") from None
    if not values:
        raise ConfigError("empty Eb/N0 list")
    return values


def _cmd_eval_ser(args) -> int:
    seed = _resolve_seed(0, args.seed)
    codec = _load_codec(args.codec)
    ebn0 = _parse_ebn0_list(args.ebn0)
    base_fn = _real_channel_factory(args.channel, args.sigma_r)
    if args.sigma_override is not None:
        fixed = float(args.sigma_override)
        channel_fn = lambda x, sigma, rng: base_fn(x, fixed, rng)
    else:
        channel_fn = base_fn
    try:
        table = ev.ser_sweep(codec, channel_fn, ebn0,
                             tr.make_rng_stream(seed, "ser"),
                             min_symbols=args.min_symbols,
                             min_errors=args.min_errors,
                             max_symbols=args.max_symbols)
    except ContractError as err:
        raise ConfigError(str(err)) from err
    run_dir = _prepare_dir(args.out)
    _write_args_snapshot(run_dir, {
        "command": "eval-ser", "codec": "codec.ckpt",
        "channel": args.channel, "sigma_r": args.sigma_r,
        "ebn0": args.ebn0, "sigma_override": args.sigma_override,
        "min_symbols": args.min_symbols, "min_errors": args.min_errors,
        "max_symbols": args.max_symbols,
    })
    _write_seed(run_dir, seed)
    shutil.copyfile(args.codec, run_dir / "codec.ckpt")
    ev.write_ser_csv(run_dir / "ser.csv", table)
    _write_text(run_dir / "plot_ser.py", _PLOT_SER)
    write_manifest(run_dir)
    for row in table.rows:
        _say(f"Eb/N0 {row.ebn0_db:5.1f} dB: SER {row.ser:.6f} "
             f"({row.num_errors}/{row.num_symbols})")
    return EXIT_OK


def _cmd_gen_fidelity(args) -> int:
    seed = _resolve_seed(0, args.seed)
    kind, *loaded = _load_surrogate(args.surrogate)
    codebook, rate, codec_path = _codebook_from_args(args)
    sigma = ebn0_to_sigma(EbN0Spec(args.ebn0, rate))
    channel_fn = _real_channel_factory(args.channel, args.sigma_r)
    true_sampler = _true_sampler(channel_fn, sigma)
    if kind == "ddpm":
        den, sched = loaded
        if den.n_messages != codebook.shape[0] or den.block_dim != codebook.shape[1]:
            raise ConfigError("surrogate dimensions do not match the codebook")
        surrogate_sampler = _ddpm_sampler(den, sched, args.reverse_noise)
    else:
        pair = loaded[0]
        if pair.block_dim != codebook.shape[1]:
            raise ConfigError("surrogate dimensions do not match the codebook")
        surrogate_sampler = _wgan_sampler(pair)
    try:
        report = ev.channel_fidelity_report(true_sampler, surrogate_sampler,
                                            codebook, args.samples,
                                            tr.make_rng_stream(seed, "fidelity"))
    except ContractError as err:
        raise ConfigError(str(err)) from err
    run_dir = _prepare_dir(args.out)
    _write_args_snapshot(run_dir, {
        "command": "gen-fidelity", "surrogate": "surrogate.ckpt",
        "codebook": "qam16" if codec_path is None else "codec.ckpt",
        "channel": args.channel, "sigma_r": args.sigma_r,
        "ebn0": args.ebn0, "samples": args.samples,
        "reverse_noise": args.reverse_noise,
    })
    _write_seed(run_dir, seed)
    shutil.copyfile(args.surrogate, run_dir / "surrogate.ckpt")
    if codec_path is not None:
        shutil.copyfile(codec_path, run_dir / "codec.ckpt")
    _write_fidelity_outputs(run_dir, report)
    write_manifest(run_dir)
    for row in report.rows:
        _say(f"message {row.message:2d}: KS {row.ks_norm:.4f} "
             f"mean_err {row.mean_err:.4f} cov_err {row.cov_err:.4f}")
    _say(f"worst KS: {report.worst_ks():.4f}")
    return EXIT_OK


def _cmd_dump_trajectory(args) -> int:
    seed = _resolve_seed(0, args.seed)
    kind, *loaded = _load_surrogate(args.surrogate)
    if kind != "ddpm":
        raise ConfigError("dump-trajectory needs a denoiser checkpoint")
    den, sched = loaded
    codebook, rate, codec_path = _codebook_from_args(args)
    if not 0 <= args.message < codebook.shape[0]:
        raise ConfigError(f"message must lie in [0, {codebook.shape[0]})")
    sigma = ebn0_to_sigma(EbN0Spec(args.ebn0, rate))
    channel_fn = _real_channel_factory(args.channel, args.sigma_r)
    rng = tr.make_rng_stream(seed, "trajectory")
    fm = codebook[args.message]
    size = args.samples
    # forward chain: diffuse true channel outputs step by step
    y0 = channel_fn(np.tile(fm, (size, 1)), sigma, rng)
    forward = [y0.copy()]
    x = y0
    for t in range(1, sched.T + 1):
        x = df.diffuse_step(x, t, sched, rng)
        forward.append(x.copy())
    # reverse chain from pure noise
    cond = df.Condition(np.full(size, args.message), np.tile(fm, (size, 1)))
    _, reverse = df.generate_channel_output(den, cond, sched, rng,
                                            args.reverse_noise,
                                            record_trajectory=True)
    run_dir = _prepare_dir(args.out)
    _write_args_snapshot(run_dir, {
        "command": "dump-trajectory", "surrogate": "surrogate.ckpt",
        "codebook": "qam16" if codec_path is None else "codec.ckpt",
        "channel": args.channel, "sigma_r": args.sigma_r,
        "ebn0": args.ebn0, "message": args.message, "samples": size,
        "reverse_noise": args.reverse_noise,
    })
    _write_seed(run_dir, seed)
    shutil.copyfile(args.surrogate, run_dir / "surrogate.ckpt")
    if codec_path is not None:
        shutil.copyfile(codec_path, run_dir / "codec.ckpt")
    n = codebook.shape[1]
    header = "t,sample_idx," + ",".join(f"dim{i}" for i in range(n)) + "\n"
    with open(run_dir / "trajectory_forward.csv", "w", encoding="ascii",
              newline="\n") as fh:
        fh.write(header)
        for t, states in enumerate(forward):
            for i, row in enumerate(states):
                fh.write(f"{t},{i}," + ",".join(repr(float(v)) for v in row) + "\n")
    with open(run_dir / "trajectory_reverse.csv", "w", encoding="ascii",
              newline="\n") as fh:
        fh.write(header)
        for j, states in enumerate(reverse):
            t = sched.T - j
            for i, row in enumerate(states):
                fh.write(f"{t},{i}," + ",".join(repr(float(v)) for v in row) + "\n")
    _write_text(run_dir / "plot_trajectory.py", _PLOT_TRAJECTORY)
    write_manifest(run_dir)
    _say(f"trajectories written: {run_dir}")
    return EXIT_OK


def _run_e2e_variant(label: str, cfg: tr.RunConfig, recipe: ExperimentRecipe,
                     run_dir: Path) -> None:
    _say(f"[{recipe.name}] training {label} variant")
    codec, surrogate, report = tr.alternate_train(cfg, log=_say)
    ae.save_codec(run_dir / f"codec_{label}.ckpt", codec)
    save_surrogate(run_dir / f"surrogate_{label}.ckpt", surrogate)
    tr.write_report_csv(run_dir / f"report_{label}.csv", report)
    tr.write_report_summary(run_dir / f"summary_{label}.txt", report)
    channel_fn = _real_channel_factory(cfg.channel, cfg.sigma_r)
    table = ev.ser_sweep(codec, channel_fn, list(recipe.ebn0_grid),
                         tr.make_rng_stream(cfg.seed, f"ser-{label}"),
                         min_symbols=recipe.min_symbols,
                         min_errors=recipe.min_errors,
                         max_symbols=recipe.max_symbols)
    ev.write_ser_csv(run_dir / f"ser_{label}.csv", table)
    for row in table.rows:
        _say(f"[{recipe.name}] {label} Eb/N0 {row.ebn0_db:5.1f}: "
             f"SER {row.ser:.6f} ({row.num_errors}/{row.num_symbols})")


def run_recipe(recipe: ExperimentRecipe, out) -> Path:
    """Execute a canned experiment into `out`; returns the run directory."""
    run_dir = _prepare_dir(out)
    cfg = recipe.config
    _write_text(run_dir / "config.txt", serialize_config(cfg))
    _write_seed(run_dir, cfg.seed)
    if recipe.name == "fig2_awgn_qam16":
        codebook = _qam16_codec_book()
        den, sched, losses = train_fixed_codebook_denoiser(
            cfg, codebook, recipe.denoiser_epochs, recipe.lr_segments, log=_say)
        df.save_denoiser(run_dir / "surrogate.ckpt", den, sched)
        _write_loss_trace(run_dir / "loss_trace.csv", losses)
        channel_fn = _real_channel_factory(cfg.channel, cfg.sigma_r)
        report = ev.channel_fidelity_report(
            _true_sampler(channel_fn, cfg.train_sigma),
            _ddpm_sampler(den, sched, cfg.reverse_noise),
            codebook, recipe.fidelity_samples,
            tr.make_rng_stream(cfg.seed, "fidelity"))
        _write_fidelity_outputs(run_dir, report)
        for row in report.rows:
            _say(f"[fig2] message {row.message:2d}: KS {row.ks_norm:.4f}")
        _say(f"[fig2] worst KS: {report.worst_ks():.4f}")
    else:
        _write_text(run_dir / "config_model_aware.txt",
                    serialize_config(recipe.config_model_aware))
        _write_text(run_dir / "config_wgan.txt",
                    serialize_config(recipe.config_wgan))
        _run_e2e_variant("model_aware", recipe.config_model_aware, recipe, run_dir)
        _run_e2e_variant("ddpm", recipe.config, recipe, run_dir)
        _run_e2e_variant("wgan", recipe.config_wgan, recipe, run_dir)
        _write_text(run_dir / "plot_ser.py", _PLOT_SER)
    write_manifest(run_dir)
    _say(f"run directory written: {run_dir}")
    return run_dir


def _cmd_recipe(args) -> int:
    recipe = get_recipe(args.name, quick=args.quick)
    seed = _resolve_seed(recipe.config.seed, args.seed)
    if seed != recipe.config.seed:
        recipe = replace(recipe, config=replace(recipe.config, seed=seed))
        if recipe.config_model_aware is not None:
            recipe = replace(
                recipe,
                config_model_aware=replace(recipe.config_model_aware, seed=seed),
                config_wgan=replace(recipe.config_wgan, seed=seed))
    run_recipe(recipe, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# CLI plumbing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="e2ediff",
        description="Diffusion-generated channels for end-to-end channel coding")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run alternating training from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval-ser", help="SER sweep of a saved codec")
    p.add_argument("--codec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channel", choices=("awgn", "rayleigh"), default="awgn")
    p.add_argument("--sigma-r", type=float, default=1.0)
    p.add_argument("--ebn0", required=True,
                   help="comma-separated Eb/N0 values in dB")
    p.add_argument("--min-symbols", type=int, default=10_000)
    p.add_argument("--min-errors", type=int, default=100)
    p.add_argument("--max-symbols", type=int, default=10_000_000)
    p.add_argument("--sigma-override", type=float, default=None,
                   help="force this noise sigma at every point (testing)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_eval_ser)

    p = sub.add_parser("gen-fidelity", help="compare a surrogate to the true channel")
    p.add_argument("--surrogate", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--codec")
    group.add_argument("--qam16", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--channel", choices=("awgn", "rayleigh"), default="awgn")
    p.add_argument("--sigma-r", type=float, default=1.0)
    p.add_argument("--ebn0", type=float, default=5.0)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--reverse-noise", choices=df.REVERSE_NOISE_KINDS,
                   default="sqrt_beta")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_gen_fidelity)

    p = sub.add_parser("recipe", help="run a bundled experiment recipe")
    p.add_argument("name", choices=RECIPE_NAMES)
    p.add_argument("--out", required=True)
    p.add_argument("--quick", action="store_true",
                   help="reduced budgets for smoke/determinism checks")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_recipe)

    p = sub.add_parser("dump-trajectory",
                       help="forward/reverse chain snapshots for one message")
    p.add_argument("--surrogate", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--codec")
    group.add_argument("--qam16", action="store_true")
    p.add_argument("--message", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channel", choices=("awgn", "rayleigh"), default="awgn")
    p.add_argument("--sigma-r", type=float, default=1.0)
    p.add_argument("--ebn0", type=float, default=5.0)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--reverse-noise", choices=df.REVERSE_NOISE_KINDS,
                   default="sqrt_beta")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_dump_trajectory)
    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as err:
        print(f"artifact error: {err}", file=sys.stderr)
        return EXIT_MISSING
    except (tr.TrainAbort, df.GenerationError, nk.NonFiniteError) as err:
        print(f"run failed: {err}", file=sys.stderr)
        return EXIT_RUNTIME


def main(argv=None) -> int:
    return run_cli(argv)
