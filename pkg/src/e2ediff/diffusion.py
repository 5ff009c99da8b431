"""Conditional denoising diffusion model of a channel.

Forward process: x_t = sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) z, equivalently
in closed form x_t = sqrt(abar_t) x_0 + sqrt(1-abar_t) z_0 with
abar_t = prod_{i<=t} (1-beta_i). A conditional MLP predicts the injected
noise z_0 from (x_t, t, c) where the condition c = (m, f(m)) couples the
model to the codec: f(m) is concatenated to the input and learnable
embeddings of t and m gate every hidden activation multiplicatively.

Reverse sampling runs x_{t-1} = x_t/sqrt(alpha_t)
- (1-alpha_t)/(sqrt(1-abar_t) sqrt(alpha_t)) zhat + k_t z. The noise scale
k_t is switchable: "beta" uses k_t = 1-alpha_t, "sqrt_beta" uses
k_t = sqrt(1-alpha_t) (the two readings of the sampler's variance); no noise
is added on the final step. The whole chain is an affine/smooth composition,
so gradients flow from the generated sample back to f(m), which is what lets
an autoencoder train through the generated channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import Array, ContractError, ShapeError

REVERSE_NOISE_KINDS = ("beta", "sqrt_beta")


class GenerationError(RuntimeError):
    """Non-finite state encountered while running the reverse chain."""


# ---------------------------------------------------------------------------
# schedule

@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed {beta_t, alpha_t, abar_t} for t = 1..T (arrays 0-indexed)."""
    T: int
    beta: Array
    alpha: Array
    alpha_bar: Array


def build_schedule(T: int, beta_values) -> NoiseSchedule:
    if T < 1:
        raise ContractError("T must be at least 1")
    beta = np.broadcast_to(np.asarray(beta_values, dtype=np.float64), (T,)).copy()
    if np.any(beta <= 0.0) or np.any(beta >= 1.0):
        raise ContractError("every beta_t must lie in (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for a in (beta, alpha, alpha_bar):
        a.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar)


def _check_t(t, T: int, lowest: int = 1) -> Array:
    t = np.asarray(t)
    if np.any(t < lowest) or np.any(t > T):
        raise ContractError(f"step index out of range [{lowest}, {T}]")
    return t


# ---------------------------------------------------------------------------
# forward process

def diffuse_step(x_prev: Array, t: int, sched: NoiseSchedule, rng: np.random.Generator) -> Array:
    """One forward noising step x_{t-1} -> x_t."""
    _check_t(t, sched.T)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    b = sched.beta[t - 1]
    return math.sqrt(1.0 - b) * x_prev + math.sqrt(b) * rng.standard_normal(x_prev.shape)


def diffuse_closed(x0: Array, t, sched: NoiseSchedule,
                   rng: np.random.Generator) -> tuple[Array, Array]:
    """Jump straight to x_t from x_0; returns (x_t, z0) with z0 the target noise.

    t may be a scalar or a per-row array matching x0's leading dimension.
    """
    t = _check_t(t, sched.T)
    x0 = np.asarray(x0, dtype=np.float64)
    ab = sched.alpha_bar[t - 1]
    if np.ndim(ab) == 1:
        if x0.ndim != 2 or ab.shape[0] != x0.shape[0]:
            raise ShapeError("per-row t requires matching 2-D x0")
        ab = ab[:, None]
    z0 = rng.standard_normal(x0.shape)
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * z0
    return x_t, z0


def posterior_moments(x_t: Array, x0: Array, t: int,
                      sched: NoiseSchedule) -> tuple[Array, float]:
    """Mean and variance of q(x_{t-1} | x_t, x_0); test oracle for the sampler."""
    _check_t(t, sched.T, lowest=2)
    x_t = np.asarray(x_t, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    a = sched.alpha[t - 1]
    ab = sched.alpha_bar[t - 1]
    ab_prev = sched.alpha_bar[t - 2]
    mu = (math.sqrt(a) * (1.0 - ab_prev) * x_t + math.sqrt(ab_prev) * (1.0 - a) * x0) / (1.0 - ab)
    var = (1.0 - a) * (1.0 - ab_prev) / (1.0 - ab)
    return mu, var


# ---------------------------------------------------------------------------
# conditional denoiser

@dataclass
class Condition:
    """(message index, encoder output f(m)); both may be batched."""
    m: object
    fm: Array


@dataclass
class ConditionalDenoiser:
    net: nk.Mlp               # input 2n, hidden gated, output n
    t_embed: Array            # (T, hidden)
    m_embed: Array            # (M, hidden)
    block_dim: int
    n_messages: int
    n_steps: int

    def params(self) -> list[Array]:
        return self.net.params() + [self.t_embed, self.m_embed]


def make_denoiser(block_dim: int, n_messages: int, n_steps: int,
                  rng: np.random.Generator, hidden: int = 64,
                  depth: int = 3) -> ConditionalDenoiser:
    """Gated MLP noise predictor: 2n input, `depth` Softplus layers, linear out.

    Embedding gates start at ones plus N(0, 0.01) so training begins near the
    unconditioned network but message symmetry is already broken.
    """
    sizes = [2 * block_dim] + [hidden] * depth + [block_dim]
    acts = ["softplus"] * depth + ["linear"]
    net = nk.init_params(sizes, acts, rng)
    t_embed = 1.0 + 0.1 * rng.standard_normal((n_steps, hidden))
    m_embed = 1.0 + 0.1 * rng.standard_normal((n_messages, hidden))
    return ConditionalDenoiser(net, t_embed, m_embed, block_dim, n_messages, n_steps)


@dataclass
class DenoiserTape:
    mlp_tape: nk.Tape
    t: Array
    m: Array
    squeeze: bool


def _cond_batch(den: ConditionalDenoiser, x_t: Array, t, cond: Condition):
    x_t = np.asarray(x_t, dtype=np.float64)
    fm = np.asarray(cond.fm, dtype=np.float64)
    squeeze = x_t.ndim == 1
    x2 = np.atleast_2d(x_t)
    fm2 = np.atleast_2d(fm)
    if x2.shape[1] != den.block_dim or fm2.shape[1] != den.block_dim:
        raise ShapeError("x_t / fm width must equal the block dimension")
    if fm2.shape[0] == 1 and x2.shape[0] > 1:
        fm2 = np.broadcast_to(fm2, x2.shape)
    if fm2.shape[0] != x2.shape[0]:
        raise ShapeError("x_t and fm batch sizes differ")
    b = x2.shape[0]
    t_arr = np.broadcast_to(np.asarray(_check_t(t, den.n_steps)), (b,))
    m_arr = np.broadcast_to(np.asarray(cond.m), (b,))
    if np.any(m_arr < 0) or np.any(m_arr >= den.n_messages):
        raise ContractError("message index out of range")
    return x2, fm2, t_arr, m_arr, squeeze


def denoiser_apply(den: ConditionalDenoiser, x_t: Array, t, cond: Condition,
                   record_inputs: bool = True) -> tuple[Array, DenoiserTape]:
    """Forward pass returning (zhat, tape); tape feeds denoiser_backward."""
    x2, fm2, t_arr, m_arr, squeeze = _cond_batch(den, x_t, t, cond)
    gate = den.t_embed[t_arr - 1] * den.m_embed[m_arr]
    n_hidden = len(den.net.layers) - 1
    gates = [gate] * n_hidden + [None]
    inp = np.concatenate([x2, fm2], axis=1)
    zhat, mlp_tape = nk.mlp_forward(den.net, inp, gates=gates, record_inputs=record_inputs)
    tape = DenoiserTape(mlp_tape, t_arr, m_arr, squeeze)
    return (zhat[0] if squeeze else zhat), tape


def denoiser_forward(den: ConditionalDenoiser, x_t: Array, t, cond: Condition) -> Array:
    """Predicted noise zhat(x_t, t | c)."""
    return denoiser_apply(den, x_t, t, cond, record_inputs=False)[0]


@dataclass
class DenoiserGrads:
    param_grads: list[Array] | None   # aligned with ConditionalDenoiser.params()
    x_grad: Array
    fm_grad: Array


def denoiser_backward(den: ConditionalDenoiser, tape: DenoiserTape, output_grad: Array,
                      param_grads: bool = True) -> DenoiserGrads:
    """VJP through the denoiser: parameters (incl. embeddings), x_t, and fm."""
    g = np.atleast_2d(np.asarray(output_grad, dtype=np.float64))
    res = nk.mlp_backward(den.net, tape.mlp_tape, g,
                          param_grads=param_grads, gate_grads=param_grads)
    n = den.block_dim
    x_grad = res.input_grad[:, :n]
    fm_grad = res.input_grad[:, n:]
    if tape.squeeze:
        x_grad, fm_grad = x_grad[0], fm_grad[0]
    if not param_grads:
        return DenoiserGrads(None, x_grad, fm_grad)

    dgate = None
    for gg in res.gate_grads[:-1]:
        dgate = gg if dgate is None else dgate + gg
    et = den.t_embed[tape.t - 1]
    em = den.m_embed[tape.m]
    d_t_embed = np.zeros_like(den.t_embed)
    d_m_embed = np.zeros_like(den.m_embed)
    np.add.at(d_t_embed, tape.t - 1, dgate * em)
    np.add.at(d_m_embed, tape.m, dgate * et)
    return DenoiserGrads(res.param_grads + [d_t_embed, d_m_embed], x_grad, fm_grad)


# ---------------------------------------------------------------------------
# training

def diffusion_loss_and_grads(den: ConditionalDenoiser, cond: Condition, x0: Array,
                             sched: NoiseSchedule, rng: np.random.Generator,
                             want_grads: bool = True):
    """Noise-prediction loss mean ||zhat - z0||^2 over the batch.

    Per item: t ~ U{1..T}, (x_t, z0) from the closed-form forward process,
    zhat from the conditional denoiser.
    """
    if sched.T != den.n_steps:
        raise ContractError("schedule length does not match the denoiser's step count")
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.size == 0:
        raise ContractError("empty diffusion batch")
    b = x0.shape[0]
    t = rng.integers(1, sched.T + 1, b)
    x_t, z0 = diffuse_closed(x0, t, sched, rng)
    zhat, tape = denoiser_apply(den, x_t, t, cond, record_inputs=want_grads)
    resid = np.atleast_2d(zhat) - z0
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    if not math.isfinite(loss):
        raise nk.NonFiniteError("non-finite diffusion loss")
    if not want_grads:
        return loss, None
    grads = denoiser_backward(den, tape, 2.0 * resid / b).param_grads
    return loss, grads


def diffusion_loss(den: ConditionalDenoiser, cond: Condition, x0: Array,
                   sched: NoiseSchedule, rng: np.random.Generator) -> float:
    return diffusion_loss_and_grads(den, cond, x0, sched, rng, want_grads=False)[0]


def diffusion_train_step(den: ConditionalDenoiser, cond: Condition, x0: Array,
                         sched: NoiseSchedule, opt: nk.OptimizerState,
                         rng: np.random.Generator) -> float:
    loss, grads = diffusion_loss_and_grads(den, cond, x0, sched, rng)
    nk.optimizer_step(opt, den.params(), grads)
    return loss


# ---------------------------------------------------------------------------
# reverse process

def _noise_scale(sched: NoiseSchedule, t: int, reverse_noise: str) -> float:
    if reverse_noise not in REVERSE_NOISE_KINDS:
        raise ContractError(f"reverse_noise must be one of {REVERSE_NOISE_KINDS}")
    b = 1.0 - sched.alpha[t - 1]
    return b if reverse_noise == "beta" else math.sqrt(b)


def denoise_step(x_t: Array, t: int, zhat: Array, sched: NoiseSchedule,
                 rng: np.random.Generator, final_step: bool,
                 reverse_noise: str = "beta") -> Array:
    """One reverse step; additive noise is skipped when final_step."""
    _check_t(t, sched.T)
    x_t = np.asarray(x_t, dtype=np.float64)
    zhat = np.asarray(zhat, dtype=np.float64)
    a = sched.alpha[t - 1]
    ab = sched.alpha_bar[t - 1]
    x = (x_t - (1.0 - a) / math.sqrt(1.0 - ab) * zhat) / math.sqrt(a)
    if not final_step:
        x = x + _noise_scale(sched, t, reverse_noise) * rng.standard_normal(x.shape)
    return x


def generate_channel_output(den: ConditionalDenoiser, cond: Condition,
                            sched: NoiseSchedule, rng: np.random.Generator,
                            reverse_noise: str = "beta",
                            record_trajectory: bool = False):
    """Run the reverse chain T..1 from x_T ~ N(0, I); returns the sample(s).

    With record_trajectory, also returns an array of the visited states
    ordered from t=T down to the final sample.
    """
    if sched.T != den.n_steps:
        raise ContractError("schedule length does not match the denoiser's step count")
    fm = np.asarray(cond.fm, dtype=np.float64)
    squeeze = fm.ndim == 1 and np.ndim(cond.m) == 0
    shape = (1, den.block_dim) if squeeze else (np.atleast_2d(fm).shape[0], den.block_dim)
    x = rng.standard_normal(shape)
    traj = [x.copy()] if record_trajectory else None
    for t in range(sched.T, 0, -1):
        zhat, _ = denoiser_apply(den, x, t, cond, record_inputs=False)
        x = denoise_step(x, t, np.atleast_2d(zhat), sched, rng,
                         final_step=(t == 1), reverse_noise=reverse_noise)
        if not np.all(np.isfinite(x)):
            raise GenerationError(f"non-finite state in reverse chain at step t={t}")
        if traj is not None:
            traj.append(x.copy())
    y = x[0] if squeeze else x
    if record_trajectory:
        steps = np.stack([s[0] for s in traj]) if squeeze else np.stack(traj)
        return y, steps
    return y


class GeneratedChannel:
    """Differentiable channel surrogate backed by a frozen denoiser.

    forward() runs the reverse chain keeping slim tapes; backward() replays
    it in reverse, accumulating the gradient w.r.t. the conditioning
    codewords fm both through the state recursion and through the direct
    fm input at every step. Noise draws are constants.
    """

    def __init__(self, den: ConditionalDenoiser, sched: NoiseSchedule,
                 reverse_noise: str = "beta"):
        if reverse_noise not in REVERSE_NOISE_KINDS:
            raise ContractError(f"reverse_noise must be one of {REVERSE_NOISE_KINDS}")
        if sched.T != den.n_steps:
            raise ContractError("schedule length does not match the denoiser's step count")
        self.den = den
        self.sched = sched
        self.reverse_noise = reverse_noise
        self._steps: list[tuple[int, DenoiserTape]] | None = None

    def forward(self, fm: Array, m, rng: np.random.Generator) -> Array:
        fm2 = np.atleast_2d(np.asarray(fm, dtype=np.float64))
        cond = Condition(np.asarray(m), fm2)
        x = rng.standard_normal((fm2.shape[0], self.den.block_dim))
        steps = []
        for t in range(self.sched.T, 0, -1):
            zhat, tape = denoiser_apply(self.den, x, t, cond, record_inputs=False)
            steps.append((t, tape))
            x = denoise_step(x, t, zhat, self.sched, rng,
                             final_step=(t == 1), reverse_noise=self.reverse_noise)
            if not np.all(np.isfinite(x)):
                raise GenerationError(f"non-finite state in reverse chain at step t={t}")
        self._steps = steps
        return x if np.ndim(fm) > 1 else x[0]

    def backward(self, dy: Array) -> Array:
        if self._steps is None:
            raise ContractError("backward before forward")
        dy2 = np.atleast_2d(np.asarray(dy, dtype=np.float64))
        dx = dy2
        dfm = np.zeros_like(dy2)
        for t, tape in reversed(self._steps):
            a = self.sched.alpha[t - 1]
            c2 = (1.0 - a) / (math.sqrt(1.0 - self.sched.alpha_bar[t - 1]) * math.sqrt(a))
            res = denoiser_backward(self.den, tape, -c2 * dx, param_grads=False)
            dfm += res.fm_grad
            dx = dx / math.sqrt(a) + res.x_grad
        return dfm if np.ndim(dy) > 1 else dfm[0]


# ---------------------------------------------------------------------------
# persistence

def save_denoiser(path, den: ConditionalDenoiser, sched: NoiseSchedule) -> None:
    nk.save_checkpoint(path, {
        "kind": "denoiser",
        "block_dim": den.block_dim,
        "n_messages": den.n_messages,
        "n_steps": den.n_steps,
        "net": den.net,
        "t_embed": den.t_embed,
        "m_embed": den.m_embed,
        "beta": np.asarray(sched.beta),
    })


def load_denoiser(path) -> tuple[ConditionalDenoiser, NoiseSchedule]:
    s = nk.load_checkpoint(path)
    if s.get("kind") != "denoiser":
        raise ContractError("checkpoint does not hold a denoiser")
    sched = build_schedule(s["n_steps"], s["beta"])
    den = ConditionalDenoiser(s["net"], s["t_embed"], s["m_embed"],
                              s["block_dim"], s["n_messages"], s["n_steps"])
    return den, sched
