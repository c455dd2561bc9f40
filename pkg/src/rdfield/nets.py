"""Small ReLU MLP decoders with hand-written forward and backward passes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field_core import ContractError

EXP_CLAMP = 15.0
ACTIVATIONS = ("exp_clamped", "sigmoid", "identity")


@dataclass(frozen=True)
class MlpSpec:
    n_in: int
    n_hidden: int = 64
    n_hidden_layers: int = 1
    n_out: int = 1
    out_activation: str = "identity"

    def __post_init__(self):
        if min(self.n_in, self.n_hidden, self.n_out) < 1 or self.n_hidden_layers < 0:
            raise ContractError(f"invalid MLP widths: {self}")
        if self.out_activation not in ACTIVATIONS:
            raise ContractError(f"unknown output activation {self.out_activation!r}")

    @property
    def widths(self) -> list[int]:
        return [self.n_in] + [self.n_hidden] * self.n_hidden_layers + [self.n_out]


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        w = self.spec.widths
        if len(self.weights) != len(w) - 1 or len(self.biases) != len(w) - 1:
            raise ContractError("layer count does not match spec")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (w[i], w[i + 1]) or b.shape != (w[i + 1],):
                raise ContractError(f"layer {i} shapes {W.shape}, {b.shape} do not match spec")

    @classmethod
    def zeros(cls, spec: MlpSpec) -> "MlpParams":
        w = spec.widths
        return cls(spec, [np.zeros((w[i], w[i + 1])) for i in range(len(w) - 1)],
                   [np.zeros(w[i + 1]) for i in range(len(w) - 1)])

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in storage order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, [W.copy() for W in self.weights], [b.copy() for b in self.biases])


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> MlpParams:
    """He-uniform weights, zero biases."""
    w = spec.widths
    weights = []
    for i in range(len(w) - 1):
        bound = np.sqrt(6.0 / w[i])
        weights.append(rng.uniform(-bound, bound, size=(w[i], w[i + 1])))
    return MlpParams(spec, weights, [np.zeros(w[i + 1]) for i in range(len(w) - 1)])


def apply_activation(name: str, t: np.ndarray) -> np.ndarray:
    if name == "exp_clamped":
        return np.exp(np.clip(t, -EXP_CLAMP, EXP_CLAMP))
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * t))
    return t


def activation_grad(name: str, t: np.ndarray, out: np.ndarray) -> np.ndarray:
    """d out / d t given the pre-activation and its output."""
    if name == "exp_clamped":
        return np.where(np.abs(t) < EXP_CLAMP, out, 0.0)
    if name == "sigmoid":
        return out * (1.0 - out)
    return np.ones_like(t)


@dataclass
class MlpTrace:
    inputs: list[np.ndarray]  # input to each affine layer
    pre: np.ndarray  # pre-activation of the output layer
    out: np.ndarray


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpTrace]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != params.spec.n_in:
        raise ContractError(f"input width {h.shape[1]} != {params.spec.n_in}")
    inputs = []
    n_layers = len(params.weights)
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        t = h @ W + b
        if i < n_layers - 1:
            h = np.maximum(t, 0.0)
    out = apply_activation(params.spec.out_activation, t)
    trace = MlpTrace(inputs, t, out)
    return (out[0] if single else out), trace


def mlp_backward(params: MlpParams, trace: MlpTrace, grad_out: np.ndarray) -> tuple[MlpParams, np.ndarray]:
    """Reverse-mode gradients: ``(grads shaped like params, dL/dx)``."""
    g = np.asarray(grad_out, dtype=np.float64)
    if g.size != trace.out.size:
        raise ContractError(f"gradient shape {g.shape} does not match output {trace.out.shape}")
    g = g.reshape(trace.out.shape) * activation_grad(params.spec.out_activation, trace.pre, trace.out)
    gW = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        h = trace.inputs[i]
        gW[i] = h.T @ g
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
        if i > 0:
            g = g * (h > 0.0)
    grad_x = g[0] if trace.out.shape[0] == 1 and np.ndim(grad_out) == 1 else g
    return MlpParams(params.spec, gW, gb), grad_x


# ---------------------------------------------------------------------------
# Decoder heads
# ---------------------------------------------------------------------------

DIR_HARMONICS = (1, 2)


def encode_direction(d: np.ndarray) -> np.ndarray:
    """Per-axis ``[d, sin(k*pi*d), cos(k*pi*d)]`` for k in 1, 2 (15 values)."""
    d = np.asarray(d, dtype=np.float64)
    parts = [d]
    for k in DIR_HARMONICS:
        parts += [np.sin(k * np.pi * d), np.cos(k * np.pi * d)]
    return np.concatenate(parts, axis=-1)


DIR_ENCODING_WIDTH = 3 * (1 + 2 * len(DIR_HARMONICS))


def density_spec(n_in: int, geo_features: int = 15, hidden: int = 64, layers: int = 1) -> MlpSpec:
    return MlpSpec(n_in, hidden, layers, 1 + geo_features, "identity")


def color_spec(geo_features: int = 15, hidden: int = 64, layers: int = 2) -> MlpSpec:
    return MlpSpec(geo_features + DIR_ENCODING_WIDTH, hidden, layers, 3, "sigmoid")


def image_spec(n_in: int, hidden: int = 64, layers: int = 2) -> MlpSpec:
    return MlpSpec(n_in, hidden, layers, 3, "sigmoid")


@dataclass
class DensityTrace:
    mlp: MlpTrace
    sigma: np.ndarray


def decode_density(params: MlpParams, y_noisy: np.ndarray):
    """``(sigma, geometry features, trace)``; sigma is exp of the clamped first output."""
    raw, trace = mlp_forward(params, np.atleast_2d(y_noisy))
    sigma = apply_activation("exp_clamped", raw[:, 0])
    return sigma, raw[:, 1:], DensityTrace(trace, sigma)


def decode_density_backward(params: MlpParams, trace: DensityTrace, grad_sigma, grad_geo):
    g_raw = np.empty_like(trace.mlp.out)
    g_raw[:, 0] = np.asarray(grad_sigma) * activation_grad("exp_clamped", trace.mlp.pre[:, 0], trace.sigma)
    g_raw[:, 1:] = grad_geo
    return mlp_backward(params, trace.mlp, g_raw)


def decode_color(params: MlpParams, geo: np.ndarray, dir_encoding: np.ndarray):
    """RGB in [0, 1] from geometry features and an encoded view direction."""
    inp = np.concatenate([np.atleast_2d(geo), np.atleast_2d(dir_encoding)], axis=1)
    return mlp_forward(params, inp)


def decode_color_backward(params: MlpParams, trace: MlpTrace, grad_rgb, n_geo: int):
    grads, g_in = mlp_backward(params, trace, grad_rgb)
    return grads, g_in[:, :n_geo]
