"""End-to-end codec: encoder/decoder MLPs trained through a channel.

The encoder maps a one-hot message to an n-dim codeword scaled to satisfy
the power constraint ||f(m)||^2 = n; the decoder maps a channel output to a
probability vector over messages. Training minimizes cross entropy through
any differentiable channel: a model-aware simulator below, or a generated
channel (diffusion/WGAN) that exposes the same forward/backward protocol.

Channel protocol (duck-typed):
    forward(fm, m, rng) -> y      same leading shape as fm
    backward(dy) -> d_fm          VJP through the most recent forward
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .channels import RayleighParams
from .numkit import Array, ContractError, NonFiniteError

PROB_FLOOR = 1e-300


class DegenerateCodewordError(ContractError):
    """Raw encoder output collapsed to (near) zero norm."""


@dataclass
class CodecPair:
    """Encoder f: M -> n and decoder h: n -> M with their dimensions."""
    encoder: nk.Mlp
    decoder: nk.Mlp
    n_messages: int
    block_dim: int

    def params(self) -> list[Array]:
        return self.encoder.params() + self.decoder.params()


def make_codec(n_messages: int, block_dim: int, rng: np.random.Generator,
               hidden: int = 16) -> CodecPair:
    """Two ELU hidden layers of `hidden` units on each side, mirrored."""
    enc = nk.init_params([n_messages, hidden, hidden, block_dim],
                         ["elu", "elu", "linear"], rng)
    dec = nk.init_params([block_dim, hidden, hidden, n_messages],
                         ["elu", "elu", "softmax"], rng)
    return CodecPair(enc, dec, n_messages, block_dim)


def one_hot(m, width: int) -> Array:
    m = np.asarray(m)
    out = np.zeros(m.shape + (width,))
    np.put_along_axis(out, m[..., None], 1.0, axis=-1)
    return out


# ---------------------------------------------------------------------------
# power normalization

def normalize_power(v: Array) -> Array:
    """Scale each row to squared norm n (the row width)."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DegenerateCodewordError("encoder output has (near) zero norm")
    return math.sqrt(v.shape[-1]) * v / norms


def normalize_power_vjp(v: Array, dc: Array) -> Array:
    """Gradient w.r.t. v of a loss with gradient dc w.r.t. normalize_power(v)."""
    v = np.asarray(v, dtype=np.float64)
    dc = np.asarray(dc, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    unit = v / norms
    radial = (dc * unit).sum(axis=-1, keepdims=True)
    return math.sqrt(v.shape[-1]) * (dc - unit * radial) / norms


# ---------------------------------------------------------------------------
# codec evaluation

def encode(codec: CodecPair, m) -> Array:
    """Message index (or array of indices) -> normalized codeword(s)."""
    x = one_hot(m, codec.n_messages)
    v, _ = nk.mlp_forward(codec.encoder, x, record_inputs=False)
    return normalize_power(v)


def decode(codec: CodecPair, y: Array) -> Array:
    """Channel output -> probability vector(s) over messages."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("decoder input must be finite")
    probs, _ = nk.mlp_forward(codec.decoder, y, record_inputs=False)
    return probs


def hard_decision(probs: Array):
    """Argmax with ties broken toward the lowest index."""
    return np.argmax(probs, axis=-1)


# ---------------------------------------------------------------------------
# cross entropy

def cross_entropy_loss(probs: Array, m) -> float:
    """Mean of -log probs[m] over the batch (single row allowed)."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    m = np.atleast_1d(np.asarray(m))
    picked = probs[np.arange(probs.shape[0]), m]
    if np.any(picked < PROB_FLOOR):
        warnings.warn("cross entropy clamped vanishing probabilities", RuntimeWarning)
        picked = np.maximum(picked, PROB_FLOOR)
    return float(-np.mean(np.log(picked)))


def cross_entropy_probs_grad(probs: Array, m) -> Array:
    """d(mean CE)/d(probs); feeding it through softmax gives (p - onehot)/B."""
    probs = np.asarray(probs, dtype=np.float64)
    squeeze = probs.ndim == 1
    p2 = np.atleast_2d(probs)
    m = np.atleast_1d(np.asarray(m))
    b = p2.shape[0]
    grad = np.zeros_like(p2)
    picked = np.maximum(p2[np.arange(b), m], PROB_FLOOR)
    grad[np.arange(b), m] = -1.0 / (b * picked)
    return grad[0] if squeeze else grad


# ---------------------------------------------------------------------------
# training

def ae_loss_and_grads(codec: CodecPair, channel, messages,
                      rng: np.random.Generator) -> tuple[float, list[Array]]:
    """Batch-mean CE through `channel` and its gradients w.r.t. codec.params()."""
    m = np.asarray(messages)
    if m.size == 0:
        raise ContractError("empty message batch")
    x = one_hot(m, codec.n_messages)
    v, tape_e = nk.mlp_forward(codec.encoder, x)
    fm = normalize_power(v)
    y = channel.forward(fm, m, rng)
    probs, tape_d = nk.mlp_forward(codec.decoder, y)
    loss = cross_entropy_loss(probs, m)
    if not math.isfinite(loss):
        raise NonFiniteError("non-finite autoencoder loss; step aborted")

    dprobs = cross_entropy_probs_grad(probs, m)
    res_d = nk.mlp_backward(codec.decoder, tape_d, dprobs)
    d_fm = channel.backward(res_d.input_grad)
    dv = normalize_power_vjp(v, d_fm)
    res_e = nk.mlp_backward(codec.encoder, tape_e, dv)
    return loss, res_e.param_grads + res_d.param_grads


def ae_train_step(codec: CodecPair, channel, messages, opt: nk.OptimizerState,
                  rng: np.random.Generator) -> float:
    """One joint optimizer step on encoder+decoder through `channel`.

    The channel's own parameters are untouched; it only supplies forward
    outputs and the VJP back to the codewords. Non-finite loss aborts the
    step before any parameter is updated.
    """
    loss, grads = ae_loss_and_grads(codec, channel, messages, rng)
    nk.optimizer_step(opt, codec.params(), grads)
    return loss


# ---------------------------------------------------------------------------
# differentiable ground-truth channels (the model-aware training path)

class ModelAwareAwgn:
    """y = fm + sigma z; the VJP is the identity."""

    def __init__(self, sigma: float):
        if sigma < 0.0:
            raise ContractError("sigma must be nonnegative")
        self.sigma = sigma

    def forward(self, fm: Array, m, rng: np.random.Generator) -> Array:
        fm = np.asarray(fm, dtype=np.float64)
        if self.sigma == 0.0:
            return fm.copy()
        return fm + self.sigma * rng.standard_normal(fm.shape)

    def backward(self, dy: Array) -> Array:
        return np.asarray(dy, dtype=np.float64)


class ModelAwareRayleigh:
    """y = h o fm + sigma z with the realized h used in the VJP."""

    def __init__(self, sigma: float, params: RayleighParams):
        if sigma < 0.0:
            raise ContractError("sigma must be nonnegative")
        self.sigma = sigma
        self.params = params
        self._h: Array | None = None

    def forward(self, fm: Array, m, rng: np.random.Generator) -> Array:
        fm = np.asarray(fm, dtype=np.float64)
        g1 = rng.standard_normal(fm.shape)
        g2 = rng.standard_normal(fm.shape)
        self._h = self.params.sigma_r * np.sqrt(g1 * g1 + g2 * g2)
        y = self._h * fm
        if self.sigma > 0.0:
            y = y + self.sigma * rng.standard_normal(fm.shape)
        return y

    def backward(self, dy: Array) -> Array:
        if self._h is None:
            raise ContractError("backward before forward")
        return self._h * np.asarray(dy, dtype=np.float64)


class IdentityChannel:
    """Noiseless pass-through; the sigma -> 0 limit used in smoke tests."""

    def forward(self, fm: Array, m, rng) -> Array:
        return np.asarray(fm, dtype=np.float64).copy()

    def backward(self, dy: Array) -> Array:
        return np.asarray(dy, dtype=np.float64)


# ---------------------------------------------------------------------------
# persistence

def save_codec(path, codec: CodecPair) -> None:
    nk.save_checkpoint(path, {
        "kind": "codec",
        "n_messages": codec.n_messages,
        "block_dim": codec.block_dim,
        "encoder": codec.encoder,
        "decoder": codec.decoder,
    })


def load_codec(path) -> CodecPair:
    sections = nk.load_checkpoint(path)
    if sections.get("kind") != "codec":
        raise ContractError("checkpoint does not hold a codec")
    return CodecPair(sections["encoder"], sections["decoder"],
                     sections["n_messages"], sections["block_dim"])
