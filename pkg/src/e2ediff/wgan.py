"""Conditional Wasserstein GAN channel surrogate (weight-clipping variant).

Generator G(noise, fm) -> n-dim sample and critic C(sample, fm) -> scalar
score, both plain ReLU MLPs that receive the channel input fm alongside
their primary input. The critic ascends mean C(real) - mean C(fake) under
RMSprop with all parameters clipped to [-clip_c, clip_c] after every update;
the generator descends -mean C(fake). Like the diffusion path, the generator
output is differentiable w.r.t. fm, so the autoencoder can train through a
frozen generator via the same forward/backward channel protocol.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import Array, ContractError


@dataclass
class WganPair:
    generator: nk.Mlp
    critic: nk.Mlp
    clip_c: float
    block_dim: int
    noise_dim: int


def make_wgan(block_dim: int, rng: np.random.Generator, hidden: int = 128,
              clip_c: float = 0.01, noise_dim: int | None = None) -> WganPair:
    """Two ReLU hidden layers each; noise dimension defaults to block_dim."""
    if clip_c <= 0.0:
        raise ContractError("clip_c must be positive")
    nd = block_dim if noise_dim is None else noise_dim
    gen = nk.init_params([nd + block_dim, hidden, hidden, block_dim],
                         ["relu", "relu", "linear"], rng)
    critic = nk.init_params([2 * block_dim, hidden, hidden, 1],
                            ["relu", "relu", "linear"], rng)
    return WganPair(gen, critic, clip_c, block_dim, nd)


def _as_rows(fm: Array, width: int, what: str) -> tuple[Array, bool]:
    fm = np.asarray(fm, dtype=np.float64)
    squeeze = fm.ndim == 1
    fm2 = np.atleast_2d(fm)
    if fm2.shape[1] != width:
        raise nk.ShapeError(f"{what} width {fm2.shape[1]} != {width}")
    return fm2, squeeze


def wgan_generate(pair: WganPair, fm: Array, rng: np.random.Generator) -> Array:
    """Sample the generated channel at input fm."""
    fm2, squeeze = _as_rows(fm, pair.block_dim, "fm")
    noise = rng.standard_normal((fm2.shape[0], pair.noise_dim))
    y, _ = nk.mlp_forward(pair.generator, np.concatenate([noise, fm2], axis=1),
                          record_inputs=False)
    return y[0] if squeeze else y


def critic_scores(pair: WganPair, samples: Array, fm: Array) -> Array:
    s2, _ = _as_rows(samples, pair.block_dim, "sample")
    fm2, _ = _as_rows(fm, pair.block_dim, "fm")
    scores, _ = nk.mlp_forward(pair.critic, np.concatenate([s2, fm2], axis=1),
                               record_inputs=False)
    return scores[:, 0]


def clip_critic(pair: WganPair) -> None:
    for p in pair.critic.params():
        np.clip(p, -pair.clip_c, pair.clip_c, out=p)


def critic_step(pair: WganPair, real: Array, fake: Array, fm: Array,
                opt: nk.OptimizerState) -> float:
    """One RMSprop ascent step on mean C(real,fm) - mean C(fake,fm), then clip.

    Returns the (pre-step) Wasserstein estimate. real/fake/fm rows align.
    """
    real2, _ = _as_rows(real, pair.block_dim, "real")
    fake2, _ = _as_rows(fake, pair.block_dim, "fake")
    fm2, _ = _as_rows(fm, pair.block_dim, "fm")
    if not (real2.shape[0] == fake2.shape[0] == fm2.shape[0]):
        raise nk.ShapeError("real/fake/fm batch sizes differ")
    b = real2.shape[0]
    inp = np.concatenate([
        np.concatenate([real2, fm2], axis=1),
        np.concatenate([fake2, fm2], axis=1),
    ], axis=0)
    scores, tape = nk.mlp_forward(pair.critic, inp)
    w_est = float(np.mean(scores[:b, 0]) - np.mean(scores[b:, 0]))
    if not math.isfinite(w_est):
        raise nk.NonFiniteError("non-finite critic objective")
    # minimize -W
    dout = np.concatenate([np.full((b, 1), -1.0 / b), np.full((b, 1), 1.0 / b)])
    res = nk.mlp_backward(pair.critic, tape, dout, gate_grads=False)
    nk.optimizer_step(opt, pair.critic.params(), res.param_grads)
    clip_critic(pair)
    return w_est


def generator_step(pair: WganPair, fm: Array, opt: nk.OptimizerState,
                   rng: np.random.Generator) -> float:
    """One RMSprop step on -mean C(G(noise,fm), fm); critic untouched."""
    fm2, _ = _as_rows(fm, pair.block_dim, "fm")
    b = fm2.shape[0]
    noise = rng.standard_normal((b, pair.noise_dim))
    y, tape_g = nk.mlp_forward(pair.generator, np.concatenate([noise, fm2], axis=1))
    scores, tape_c = nk.mlp_forward(pair.critic, np.concatenate([y, fm2], axis=1))
    loss = float(-np.mean(scores[:, 0]))
    if not math.isfinite(loss):
        raise nk.NonFiniteError("non-finite generator objective")
    dout = np.full((b, 1), -1.0 / b)
    res_c = nk.mlp_backward(pair.critic, tape_c, dout,
                            param_grads=False, gate_grads=False)
    dy = res_c.input_grad[:, :pair.block_dim]
    res_g = nk.mlp_backward(pair.generator, tape_g, dy, gate_grads=False)
    nk.optimizer_step(opt, pair.generator.params(), res_g.param_grads)
    return loss


class WganChannel:
    """Differentiable channel protocol over a frozen generator."""

    def __init__(self, pair: WganPair):
        self.pair = pair
        self._tape: nk.Tape | None = None
        self._squeeze = False

    def forward(self, fm: Array, m, rng: np.random.Generator) -> Array:
        fm2, squeeze = _as_rows(fm, self.pair.block_dim, "fm")
        noise = rng.standard_normal((fm2.shape[0], self.pair.noise_dim))
        y, tape = nk.mlp_forward(self.pair.generator,
                                 np.concatenate([noise, fm2], axis=1),
                                 record_inputs=False)
        self._tape = tape
        self._squeeze = squeeze
        return y[0] if squeeze else y

    def backward(self, dy: Array) -> Array:
        if self._tape is None:
            raise ContractError("backward before forward")
        dy2 = np.atleast_2d(np.asarray(dy, dtype=np.float64))
        res = nk.mlp_backward(self.pair.generator, self._tape, dy2,
                              param_grads=False, gate_grads=False)
        dfm = res.input_grad[:, self.pair.noise_dim:]
        return dfm[0] if self._squeeze else dfm


# ---------------------------------------------------------------------------
# persistence

def save_wgan(path, pair: WganPair) -> None:
    nk.save_checkpoint(path, {
        "kind": "wgan",
        "block_dim": pair.block_dim,
        "noise_dim": pair.noise_dim,
        "clip_c": float(pair.clip_c),
        "generator": pair.generator,
        "critic": pair.critic,
    })


def load_wgan(path) -> WganPair:
    s = nk.load_checkpoint(path)
    if s.get("kind") != "wgan":
        raise ContractError("checkpoint does not hold a wgan pair")
    return WganPair(s["generator"], s["critic"], s["clip_c"],
                    s["block_dim"], s["noise_dim"])
