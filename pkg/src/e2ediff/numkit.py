"""Dense-network compute core.

Everything in this repo that learns is a plain fully-connected network
with an optional per-layer multiplicative gate on the hidden activations
(used for time/message conditioning). This module owns those networks:
forward evaluation with a recorded tape, exact reverse-mode gradients
(parameters, inputs, gates), the three optimizers used by the experiments
(Adam, NAdam, RMSprop), seeded initialization, and a bit-exact text
checkpoint format.

All numeric state is float64 ``numpy.ndarray``; batches are row-major
``(batch, width)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Operand dimensions do not chain."""


class ContractError(RuntimeError):
    """An API precondition was violated (stale tape, bad spec, ...)."""


class NonFiniteError(FloatingPointError):
    """A NaN/Inf appeared where the contract forbids it."""


# ---------------------------------------------------------------------------
# activations

def _elu(z: Array) -> Array:
    return np.where(z > 0.0, z, np.expm1(np.minimum(z, 0.0)))


def _elu_deriv(z: Array) -> Array:
    return np.where(z > 0.0, 1.0, np.exp(np.minimum(z, 0.0)))


def _softplus(z: Array) -> Array:
    return np.logaddexp(0.0, z)


def _sigmoid(z: Array) -> Array:
    # stable logistic; derivative of softplus
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _relu(z: Array) -> Array:
    return np.maximum(z, 0.0)


def _relu_deriv(z: Array) -> Array:
    return (z > 0.0).astype(np.float64)


def softmax(z: Array) -> Array:
    """Row-wise stable softmax."""
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


_ACTIVATIONS = {
    "elu": (_elu, _elu_deriv),
    "softplus": (_softplus, _sigmoid),
    "relu": (_relu, _relu_deriv),
    "linear": (lambda z: z, lambda z: np.ones_like(z)),
    # softmax is special-cased in forward/backward (full row Jacobian)
    "softmax": (softmax, None),
}

ACTIVATION_NAMES = tuple(_ACTIVATIONS)


# ---------------------------------------------------------------------------
# network

@dataclass
class DenseLayer:
    weights: Array   # (fan_in, fan_out)
    bias: Array      # (fan_out,)
    activation: str

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]


class Mlp:
    """Sequential dense network with optional multiplicative hidden gates."""

    def __init__(self, layers: list[DenseLayer]):
        if not layers:
            raise ContractError("an Mlp needs at least one layer")
        for layer in layers:
            if layer.activation not in _ACTIVATIONS:
                raise ContractError(f"unknown activation {layer.activation!r}")
            if layer.weights.shape != (layer.fan_in, layer.fan_out) or layer.bias.shape != (layer.fan_out,):
                raise ShapeError("layer weight/bias shapes inconsistent")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.fan_out != nxt.fan_in:
                raise ShapeError(
                    f"layer dimensions do not chain: {prev.fan_out} -> {nxt.fan_in}")
        for layer in layers[:-1]:
            if layer.activation == "softmax":
                raise ContractError("softmax is allowed only on the final layer")
        self.layers = layers

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    def params(self) -> list[Array]:
        """Flat parameter list [W0, b0, W1, b1, ...]; arrays are live views."""
        out: list[Array] = []
        for layer in self.layers:
            out.append(layer.weights)
            out.append(layer.bias)
        return out


def init_params(sizes: list[int], activations: list[str], rng: np.random.Generator) -> Mlp:
    """Build an Mlp from a dimension chain and per-layer activations.

    He-normal weights for relu/elu/softplus layers, Glorot-uniform for
    linear/softmax; biases zero. Deterministic given the rng state.
    """
    if len(sizes) < 2:
        raise ContractError("need at least an input and an output dimension")
    if len(activations) != len(sizes) - 1:
        raise ContractError("one activation per layer required")
    layers = []
    for fan_in, fan_out, act in zip(sizes, sizes[1:], activations):
        if fan_in < 1 or fan_out < 1:
            raise ContractError("layer dimensions must be positive")
        if act in ("relu", "elu", "softplus"):
            w = rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)
        elif act in ("linear", "softmax"):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, (fan_in, fan_out))
        else:
            raise ContractError(f"unknown activation {act!r}")
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    return Mlp(layers)


@dataclass
class Tape:
    """Activation record of one forward pass, sufficient for exact backward."""
    net: Mlp
    inputs: list[Array] | None    # per-layer affine inputs (None in slim mode)
    pre_acts: list[Array]         # per-layer z = x W + b
    gates: list[Array | None]
    squeeze: bool                 # caller passed a 1-D vector


def _as_batch(x: Array) -> tuple[Array, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ShapeError(f"expected 1-D or 2-D input, got shape {x.shape}")


def mlp_forward(
    net: Mlp,
    x: Array,
    gates: list[Array | None] | None = None,
    record_inputs: bool = True,
) -> tuple[Array, Tape]:
    """Evaluate the network; returns (output, tape).

    ``gates[i]``, when given, multiplies layer i's activation elementwise;
    it must broadcast to ``(batch, fan_out_i)``. With ``record_inputs=False``
    the tape supports input/gate gradients but not parameter gradients.
    """
    h, squeeze = _as_batch(x)
    if h.shape[1] != net.input_dim:
        raise ShapeError(f"input width {h.shape[1]} != first layer fan_in {net.input_dim}")
    n_layers = len(net.layers)
    gate_list: list[Array | None] = [None] * n_layers
    if gates is not None:
        if len(gates) != n_layers:
            raise ShapeError("need one gate entry (or None) per layer")
        for i, g in enumerate(gates):
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            if g.shape[-1] != net.layers[i].fan_out:
                raise ShapeError(
                    f"gate {i} width {g.shape[-1]} != layer fan_out {net.layers[i].fan_out}")
            gate_list[i] = g

    inputs: list[Array] | None = [] if record_inputs else None
    pre_acts: list[Array] = []
    for i, layer in enumerate(net.layers):
        if inputs is not None:
            inputs.append(h)
        z = h @ layer.weights + layer.bias
        pre_acts.append(z)
        act_fn = _ACTIVATIONS[layer.activation][0]
        h = act_fn(z)
        if gate_list[i] is not None:
            h = h * gate_list[i]
    tape = Tape(net, inputs, pre_acts, gate_list, squeeze)
    out = h[0] if squeeze else h
    return out, tape


@dataclass
class BackwardResult:
    param_grads: list[Array] | None   # aligned with Mlp.params()
    input_grad: Array
    gate_grads: list[Array | None] | None


def mlp_backward(
    net: Mlp,
    tape: Tape,
    output_grad: Array,
    param_grads: bool = True,
    gate_grads: bool = True,
) -> BackwardResult:
    """Exact gradients of a scalar loss given d(loss)/d(output).

    Returns parameter gradients (aligned with ``net.params()``), the gradient
    w.r.t. the network input, and per-layer gate gradients (same shape as the
    gate that was supplied).
    """
    if tape.net is not net:
        raise ContractError("tape was recorded on a different network")
    if param_grads and tape.inputs is None:
        raise ContractError("tape was recorded without inputs; parameter grads unavailable")
    g, _ = _as_batch(output_grad)
    if g.shape[1] != net.output_dim:
        raise ShapeError("output_grad width does not match network output")
    if g.shape[0] != tape.pre_acts[-1].shape[0]:
        raise ShapeError("output_grad batch size does not match tape")

    n_layers = len(net.layers)
    p_grads: list[Array] | None = [None] * (2 * n_layers) if param_grads else None  # type: ignore[list-item]
    g_grads: list[Array | None] | None = [None] * n_layers if gate_grads else None

    for i in range(n_layers - 1, -1, -1):
        layer = net.layers[i]
        z = tape.pre_acts[i]
        gate = tape.gates[i]
        if gate is not None:
            if g_grads is not None:
                act_fn = _ACTIVATIONS[layer.activation][0]
                dgate = g * act_fn(z)
                # reduce over broadcasted axes so the grad matches the gate shape
                if dgate.shape != gate.shape:
                    dgate = dgate.sum(axis=0).reshape(gate.shape)
                g_grads[i] = dgate
            g = g * gate
        if layer.activation == "softmax":
            p = softmax(z)
            g = p * (g - (g * p).sum(axis=1, keepdims=True))
        else:
            g = g * _ACTIVATIONS[layer.activation][1](z)
        if p_grads is not None:
            x_in = tape.inputs[i]  # type: ignore[index]
            p_grads[2 * i] = x_in.T @ g
            p_grads[2 * i + 1] = g.sum(axis=0)
        g = g @ layer.weights.T

    input_grad = g[0] if tape.squeeze else g
    return BackwardResult(p_grads, input_grad, g_grads)


# ---------------------------------------------------------------------------
# optimizers

OPTIMIZER_KINDS = ("adam", "nadam", "rmsprop")


@dataclass
class OptimizerState:
    """Per-parameter moment accumulators for one of the supported optimizers.

    Adam/NAdam use bias-corrected first/second moments with the usual
    defaults beta1=0.9, beta2=0.999, eps=1e-8; NAdam is the constant-momentum
    Nesterov variant. RMSprop keeps a decay-0.9 mean-square accumulator and
    divides by sqrt(v + eps).
    """
    kind: str
    learning_rate: float
    step_count: int
    first_moment: list[Array]
    second_moment: list[Array]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.9  # rmsprop only

    @classmethod
    def create(cls, kind: str, learning_rate: float, params: list[Array]) -> "OptimizerState":
        if kind not in OPTIMIZER_KINDS:
            raise ContractError(f"unknown optimizer kind {kind!r}")
        if learning_rate <= 0.0:
            raise ContractError("learning_rate must be positive")
        return cls(
            kind=kind,
            learning_rate=learning_rate,
            step_count=0,
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
        )


def optimizer_step(state: OptimizerState, params: list[Array], grads: list[Array]) -> list[Array]:
    """One in-place update of ``params``; returns the same list."""
    if len(params) != len(state.first_moment) or len(params) != len(grads):
        raise ShapeError("params/grads do not match optimizer state")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError("parameter/gradient/moment shapes do not align")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient rejected")

    state.step_count += 1
    t = state.step_count
    lr = state.learning_rate
    if state.kind == "rmsprop":
        for p, g, v in zip(params, grads, state.second_moment):
            v *= state.decay
            v += (1.0 - state.decay) * g * g
            p -= lr * g / np.sqrt(v + state.eps)
        return params

    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        v_hat = v / bc2
        if state.kind == "adam":
            p -= lr * (m / bc1) / (np.sqrt(v_hat) + state.eps)
        else:  # nadam: Nesterov lookahead on the bias-corrected moment
            m_hat = m / (1.0 - b1 ** (t + 1))
            p -= lr * (b1 * m_hat + (1.0 - b1) * g / bc1) / (np.sqrt(v_hat) + state.eps)
    return params


# ---------------------------------------------------------------------------
# checkpoint format
#
# Line-oriented ASCII, bit-exact via C99 hex float literals:
#   e2ediff-ckpt 1
#   str  <name> <value>
#   int  <name> <value>
#   float <name> <hex>
#   tensor <name> <ndim> <d0> [d1 ...]   followed by one hex line per leading row
#   mlp  <name> <n_layers>               followed per layer by
#     layer <activation> <fan_in> <fan_out>  + fan_in weight rows + 1 bias row

def _write_array(fh, a: Array) -> None:
    a = np.ascontiguousarray(a, dtype=np.float64)
    rows = a.reshape(a.shape[0], -1) if a.ndim > 1 else a.reshape(1, -1)
    for row in rows:
        fh.write(" ".join(v.hex() for v in row.tolist()))
        fh.write("\n")


def _read_rows(lines, n_rows: int, n_cols: int) -> Array:
    out = np.empty((n_rows, n_cols))
    for r in range(n_rows):
        parts = next(lines).split()
        if len(parts) != n_cols:
            raise ContractError("checkpoint tensor row has wrong width")
        out[r] = [float.fromhex(p) for p in parts]
    return out


def save_checkpoint(path, sections: dict) -> None:
    """Write named sections (str/int/float/ndarray/Mlp) to ``path``."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("e2ediff-ckpt 1\n")
        for name, value in sections.items():
            if isinstance(value, Mlp):
                fh.write(f"mlp {name} {len(value.layers)}\n")
                for layer in value.layers:
                    fh.write(f"layer {layer.activation} {layer.fan_in} {layer.fan_out}\n")
                    _write_array(fh, layer.weights)
                    _write_array(fh, layer.bias)
            elif isinstance(value, np.ndarray):
                arr = np.asarray(value, dtype=np.float64)
                dims = " ".join(str(d) for d in arr.shape)
                fh.write(f"tensor {name} {arr.ndim} {dims}\n")
                _write_array(fh, arr)
            elif isinstance(value, bool):
                raise ContractError("bool sections are not supported")
            elif isinstance(value, int):
                fh.write(f"int {name} {value}\n")
            elif isinstance(value, float):
                fh.write(f"float {name} {value.hex()}\n")
            elif isinstance(value, str):
                if "\n" in value:
                    raise ContractError("str sections must be single-line")
                fh.write(f"str {name} {value}\n")
            else:
                raise ContractError(f"cannot serialize section {name!r} of type {type(value)}")


def load_checkpoint(path) -> dict:
    """Inverse of :func:`save_checkpoint`; round-trips bit-exactly."""
    with open(path, "r", encoding="ascii") as fh:
        lines = iter(fh.read().splitlines())
    header = next(lines, None)
    if header != "e2ediff-ckpt 1":
        raise ContractError(f"not an e2ediff checkpoint: {path}")
    sections: dict = {}
    for line in lines:
        if not line.strip():
            continue
        parts3 = line.split(" ", 2)
        if len(parts3) < 2:
            raise ContractError(f"malformed checkpoint line: {line!r}")
        tag, name = parts3[0], parts3[1]
        rest_s = parts3[2] if len(parts3) > 2 else ""
        if tag == "str":
            sections[name] = rest_s
        elif tag == "int":
            sections[name] = int(rest_s)
        elif tag == "float":
            sections[name] = float.fromhex(rest_s)
        elif tag == "tensor":
            parts = rest_s.split()
            ndim = int(parts[0])
            shape = tuple(int(d) for d in parts[1:1 + ndim])
            if len(shape) != ndim:
                raise ContractError("tensor header dimension mismatch")
            n_rows = shape[0] if ndim > 1 else 1
            n_cols = int(np.prod(shape[1:], dtype=np.int64)) if ndim > 1 else (shape[0] if ndim else 1)
            flat = _read_rows(lines, n_rows, n_cols)
            sections[name] = flat.reshape(shape)
        elif tag == "mlp":
            n_layers = int(rest_s)
            layers = []
            for _ in range(n_layers):
                hdr = next(lines).split()
                if hdr[0] != "layer":
                    raise ContractError("malformed mlp section")
                act, fan_in, fan_out = hdr[1], int(hdr[2]), int(hdr[3])
                w = _read_rows(lines, fan_in, fan_out)
                b = _read_rows(lines, 1, fan_out)[0]
                layers.append(DenseLayer(w, b, act))
            sections[name] = Mlp(layers)
        else:
            raise ContractError(f"unknown checkpoint tag {tag!r}")
    return sections
