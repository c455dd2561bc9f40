"""Learned Laplace/Cauchy model of feature values, rate loss and quantizers.

The scale ``b`` is kept positive through ``b = softplus(b_raw)``.
Bin masses are evaluated with tail-stable formulas so that features far
from the location still get a meaningful rate until the mass floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .field_core import FeatureTable, InputDomainError, ContractError

MASS_FLOOR = 2.0**-40
LN2 = math.log(2.0)


def _parse_enum(cls, value):
    if isinstance(value, cls):
        return value
    try:
        if isinstance(value, str):
            return cls[value.upper().replace("-", "_")]
        return cls(value)
    except (KeyError, ValueError):
        names = ", ".join(m.name.lower() for m in cls)
        raise ContractError(f"unknown {cls.__name__.lower()} {value!r} (expected one of {names})") from None


class Kind(IntEnum):
    LAPLACE = 0
    CAUCHY = 1

    @classmethod
    def parse(cls, value) -> "Kind":
        return _parse_enum(cls, value)


class Quantizer(IntEnum):
    MID_RISE = 0
    MID_TREAD = 1

    @classmethod
    def parse(cls, value) -> "Quantizer":
        return _parse_enum(cls, value)

    @classmethod
    def for_kind(cls, kind: Kind) -> "Quantizer":
        return cls.MID_RISE if Kind.parse(kind) is Kind.LAPLACE else cls.MID_TREAD


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(b):
    b = np.asarray(b, dtype=np.float64)
    return b + np.log(-np.expm1(-b))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class DistributionParams:
    kind: Kind
    mu: float
    b_raw: float

    def __post_init__(self):
        self.kind = Kind.parse(self.kind)
        if not math.isfinite(self.mu) or not math.isfinite(self.b_raw):
            raise InputDomainError(f"non-finite distribution params mu={self.mu} b_raw={self.b_raw}")

    @classmethod
    def from_scale(cls, kind, mu: float = 0.0, b: float = 0.01) -> "DistributionParams":
        if b <= 0:
            raise InputDomainError(f"scale must be positive, got {b}")
        return cls(Kind.parse(kind), float(mu), float(softplus_inv(b)))

    @property
    def b(self) -> float:
        return float(softplus(self.b_raw))


@dataclass(frozen=True)
class QuantSpec:
    """Quantization step and reconstruction rule.

    ``delta`` is rounded to the nearest float32 so that an exported header
    reproduces the exact same dequantized values.
    """

    delta: float = 0.15
    quantizer: Quantizer = Quantizer.MID_TREAD

    def __post_init__(self):
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise InputDomainError(f"quantization step must be positive, got {self.delta}")
        object.__setattr__(self, "delta", float(np.float32(self.delta)))
        object.__setattr__(self, "quantizer", Quantizer.parse(self.quantizer))

    @classmethod
    def for_kind(cls, kind, delta: float = 0.15) -> "QuantSpec":
        return cls(delta, Quantizer.for_kind(kind))


# ---------------------------------------------------------------------------
# Distribution primitives
# ---------------------------------------------------------------------------


def cdf(params: DistributionParams, x):
    z = (np.asarray(x, dtype=np.float64) - params.mu) / params.b
    if params.kind is Kind.LAPLACE:
        return 0.5 + 0.5 * np.sign(z) * (-np.expm1(-np.abs(z)))
    return 0.5 + np.arctan(z) / math.pi


def pdf(params: DistributionParams, x):
    b = params.b
    z = (np.asarray(x, dtype=np.float64) - params.mu) / b
    if params.kind is Kind.LAPLACE:
        return np.exp(-np.abs(z)) / (2.0 * b)
    return 1.0 / (math.pi * b * (1.0 + z * z))


def _raw_mass(kind: Kind, zl, zu):
    """P(upper) - P(lower) for standardized bounds, avoiding tail cancellation."""
    if kind is Kind.LAPLACE:
        right = 0.5 * (np.exp(-np.maximum(zl, 0.0)) - np.exp(-np.maximum(zu, 0.0)))
        left = 0.5 * (np.exp(np.minimum(zu, 0.0)) - np.exp(np.minimum(zl, 0.0)))
        mid = 1.0 - 0.5 * np.exp(-np.abs(zl)) - 0.5 * np.exp(-np.abs(zu))
        return np.where(zl >= 0, right, np.where(zu <= 0, left, mid))
    prod = zl * zu
    with np.errstate(divide="ignore", invalid="ignore"):
        same_side = np.arctan((zu - zl) / (1.0 + prod))
    straddle = np.arctan(zu) - np.arctan(zl)
    return np.where(prod > -1.0, same_side, straddle) / math.pi


def bin_mass(params: DistributionParams, v, delta: float):
    """Probability of the width-``delta`` bin centred on ``v``, floored at 2**-40."""
    if delta <= 0:
        raise InputDomainError(f"delta must be positive, got {delta}")
    b = params.b
    v = np.asarray(v, dtype=np.float64)
    zl = (v - 0.5 * delta - params.mu) / b
    zu = (v + 0.5 * delta - params.mu) / b
    return np.maximum(_raw_mass(params.kind, zl, zu), MASS_FLOOR)


def self_information(params: DistributionParams, v, delta: float):
    """``-log2 bin_mass`` elementwise."""
    return -np.log2(bin_mass(params, v, delta))


# ---------------------------------------------------------------------------
# Rate loss
# ---------------------------------------------------------------------------


@dataclass
class RateResult:
    bits: float
    grad_features: np.ndarray
    grad_mu: float
    grad_b_raw: float


def rate_from_values(values: np.ndarray, params: DistributionParams, delta: float) -> RateResult:
    """Mean self-information of ``values`` and its analytic gradients.

    ``values`` are the already-perturbed features; the gradient with
    respect to them equals the gradient with respect to the clean features
    since the additive noise is held constant.
    """
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    b = params.b
    lo = v - 0.5 * delta
    hi = v + 0.5 * delta
    raw = _raw_mass(params.kind, (lo - params.mu) / b, (hi - params.mu) / b)
    live = raw > MASS_FLOOR
    mass = np.where(live, raw, MASS_FLOOR)
    bits = float(np.sum(-np.log2(mass)) / n)

    p_hi = pdf(params, hi)
    p_lo = pdf(params, lo)
    # d(-log2 m)/dm, zero where the floor is active
    dm = np.where(live, -1.0 / (mass * LN2 * n), 0.0)
    dmass_dv = p_hi - p_lo
    # dP(x)/db = -pdf(x) * (x - mu) / b for both families
    dmass_db = (-p_hi * (hi - params.mu) + p_lo * (lo - params.mu)) / b
    grad_v = dm * dmass_dv
    grad_mu = float(-np.sum(grad_v))
    grad_b = float(np.sum(dm * dmass_db))
    grad_b_raw = grad_b * float(_sigmoid(params.b_raw))
    return RateResult(bits, grad_v, grad_mu, grad_b_raw)


def rate_loss(table: FeatureTable, params: DistributionParams, quant: QuantSpec,
              rng: np.random.Generator | None) -> RateResult:
    """Noisy-surrogate rate in bits per stored feature.

    Every feature is perturbed by fresh ``U[-delta/2, delta/2]`` noise drawn
    from ``rng``; pass ``rng=None`` to evaluate at the clean values.
    """
    values = table.data
    if rng is not None:
        values = values + rng.uniform(-0.5 * quant.delta, 0.5 * quant.delta, size=values.shape)
    return rate_from_values(values, params, quant.delta)


def inject_noise(y: np.ndarray, delta: float, rng: np.random.Generator) -> np.ndarray:
    """Additive ``U[-delta/2, delta/2]`` quantization proxy; ``delta == 0`` is a no-op."""
    if delta < 0:
        raise InputDomainError(f"delta must be non-negative, got {delta}")
    y = np.asarray(y, dtype=np.float64)
    if delta == 0:
        return y.copy()
    return y + rng.uniform(-0.5 * delta, 0.5 * delta, size=y.shape)


# ---------------------------------------------------------------------------
# Quantizers
# ---------------------------------------------------------------------------


def quantize_indices(x, quant: QuantSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InputDomainError("cannot quantize non-finite values")
    if quant.quantizer is Quantizer.MID_RISE:
        return np.ceil(x / quant.delta).astype(np.int64)
    return np.floor(x / quant.delta + 0.5).astype(np.int64)


def dequantize(k, quant: QuantSpec, dtype=np.float32) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    if quant.quantizer is Quantizer.MID_RISE:
        k = k - 0.5
    return (quant.delta * k).astype(dtype)


def quantize(x, quant: QuantSpec):
    """Reconstruction value(s) and integer bin index(es) of ``x``.

    Values are returned in float64 so that ``|value - x| <= delta / 2``
    holds without float32 rounding; :func:`dequantize` gives the stored
    float32 reconstruction.
    """
    k = quantize_indices(x, quant)
    value = dequantize(k, quant, dtype=np.float64)
    if np.ndim(x) == 0:
        return float(value), int(k)
    return value, k


def bin_centers(k, quant: QuantSpec) -> np.ndarray:
    return dequantize(k, quant, dtype=np.float64)


def check_binding(params: DistributionParams, quant: QuantSpec, override: bool = False) -> None:
    if not override and Quantizer.for_kind(params.kind) is not quant.quantizer:
        raise ContractError(
            f"{quant.quantizer.name.lower()} quantizer does not match {params.kind.name.lower()} model"
        )
