"""Multi-resolution hash-grid storage, spatial hashing and d-linear encoding.

All levels live in one flat ``(total_entries, F)`` array so that the
gradient scatter of every level is a single ``bincount`` per feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

HASH_PRIMES = (1, 2654435761, 805459861)

INIT_RANGE = 1e-4


class InputDomainError(ValueError):
    """Raised when an input lies outside an operation's domain."""


class ContractError(ValueError):
    """Raised on shape or configuration mismatches between collaborating objects."""


@dataclass(frozen=True)
class GridConfig:
    levels: int = 16
    log2_table_size: int = 19
    features_per_entry: int = 2
    n_min: int = 16
    n_max: int = 2048
    dims: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ContractError(f"levels must be >= 1, got {self.levels}")
        if self.features_per_entry < 1:
            raise ContractError(f"features_per_entry must be >= 1, got {self.features_per_entry}")
        if self.n_min < 1 or self.n_max < self.n_min or self.n_max > 2**20:
            raise ContractError(f"need 1 <= n_min <= n_max <= 2**20, got {self.n_min}, {self.n_max}")
        if self.dims not in (2, 3):
            raise ContractError(f"dims must be 2 or 3, got {self.dims}")
        if not 0 <= self.log2_table_size <= 30:
            raise ContractError(f"log2_table_size out of range: {self.log2_table_size}")

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table_size

    @property
    def growth_factor(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp((math.log(self.n_max) - math.log(self.n_min)) / (self.levels - 1))

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_entry


def level_resolutions(config: GridConfig) -> list[int]:
    """Per-level grid resolutions ``floor(n_min * g**l)``."""
    g = config.growth_factor
    return [int(math.floor(config.n_min * g**l)) for l in range(config.levels)]


def level_entries(config: GridConfig) -> list[int]:
    return [min(config.table_size, (n + 1) ** config.dims) for n in level_resolutions(config)]


@dataclass
class FeatureTable:
    """Trainable features of every level, stacked level-major.

    ``data[offsets[l]:offsets[l + 1]]`` holds level ``l``.
    """

    config: GridConfig
    data: np.ndarray
    resolutions: list[int] = field(init=False)
    entries: list[int] = field(init=False)
    offsets: np.ndarray = field(init=False)

    def __post_init__(self):
        self.resolutions = level_resolutions(self.config)
        self.entries = level_entries(self.config)
        self.offsets = np.concatenate([[0], np.cumsum(self.entries)]).astype(np.int64)
        expected = (int(self.offsets[-1]), self.config.features_per_entry)
        if self.data.shape != expected:
            raise ContractError(f"table data has shape {self.data.shape}, expected {expected}")

    @classmethod
    def zeros(cls, config: GridConfig, dtype=np.float64) -> "FeatureTable":
        n = sum(level_entries(config))
        return cls(config, np.zeros((n, config.features_per_entry), dtype=dtype))

    @property
    def hashed(self) -> list[bool]:
        return [(n + 1) ** self.config.dims > self.config.table_size for n in self.resolutions]

    @property
    def n_features(self) -> int:
        return self.data.size

    def level(self, l: int) -> np.ndarray:
        return self.data[self.offsets[l]:self.offsets[l + 1]]

    def copy(self) -> "FeatureTable":
        return FeatureTable(self.config, self.data.copy())


def init_table(config: GridConfig, seed: int) -> FeatureTable:
    """Uniform initialisation on [-1e-4, 1e-4], deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    n = sum(level_entries(config))
    data = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(n, config.features_per_entry))
    return FeatureTable(config, data)


def _level_index(corners: np.ndarray, resolution: int, config: GridConfig) -> np.ndarray:
    """Table row (within one level) for integer corner coordinates ``(..., d)``."""
    d = config.dims
    side = resolution + 1
    if side**d <= config.table_size:
        strides = side ** np.arange(d, dtype=np.int64)
        return corners.astype(np.int64) @ strides
    # coordinates <= 2**20 keep every product far below 2**63
    c = corners.astype(np.int64)
    h = c[..., 0] * HASH_PRIMES[0]
    for k in range(1, d):
        h ^= c[..., k] * HASH_PRIMES[k]
    return h & (config.table_size - 1)


def spatial_hash(corner, resolution: int, config: GridConfig) -> int:
    """Row of ``corner`` within the level of the given resolution.

    Dense levels use first-axis-fastest linear indexing; hashed levels XOR
    the coordinates multiplied by :data:`HASH_PRIMES` modulo the table size.
    """
    c = np.asarray(corner)
    if c.shape != (config.dims,) or not np.issubdtype(c.dtype, np.integer):
        raise InputDomainError(f"corner must be {config.dims} integers, got {corner!r}")
    if np.any(c < 0) or np.any(c > resolution):
        raise InputDomainError(f"corner {tuple(c)} outside [0, {resolution}]")
    return int(_level_index(c, resolution, config))


@dataclass
class EncodeTrace:
    """Per-level corner rows (global), weights, and interpolated output.

    ``indices`` and ``weights`` have shape ``(L, B, 2**d)``; ``output`` is
    ``(B, L*F)``.
    """

    indices: np.ndarray
    weights: np.ndarray
    output: np.ndarray
    n_rows: int


def _level_corners(cell: np.ndarray, frac: np.ndarray, resolution: int, config: GridConfig):
    """Weights and level-local rows of the 2**d corners of each cell.

    Built one axis at a time; corner order matches
    ``itertools.product((0, 1), repeat=d)``.
    """
    side = resolution + 1
    dense = side**config.dims <= config.table_size
    B = cell.shape[0]
    w = rows = None
    for k in range(config.dims):
        wk = np.stack([1.0 - frac[:, k], frac[:, k]], axis=1)
        ck = cell[:, k:k + 1] + np.array([0, 1])
        ik = ck * (side**k if dense else HASH_PRIMES[k])
        if w is None:
            w, rows = wk, ik
            continue
        w = (w[:, :, None] * wk[:, None, :]).reshape(B, -1)
        if dense:
            rows = (rows[:, :, None] + ik[:, None, :]).reshape(B, -1)
        else:
            rows = (rows[:, :, None] ^ ik[:, None, :]).reshape(B, -1)
    if not dense:
        rows &= config.table_size - 1
    return w, rows


def encode(x: np.ndarray, table: FeatureTable) -> tuple[np.ndarray, EncodeTrace]:
    """Interpolated multi-resolution features for positions ``x`` in [0, 1]^d.

    ``x`` may be a single position ``(d,)`` or a batch ``(B, d)``; the
    output is ``(L*F,)`` or ``(B, L*F)`` accordingly, levels concatenated
    in order.
    """
    config = table.config
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != config.dims:
        raise ContractError(f"positions must have shape (B, {config.dims}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputDomainError("positions must be finite")
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise InputDomainError("positions must lie in [0, 1]^d")

    B, d = x.shape
    F = config.features_per_entry
    C = 2**d
    indices = np.empty((config.levels, B, C), dtype=np.int64)
    weights = np.empty((config.levels, B, C), dtype=np.float64)
    out = np.empty((B, config.levels * F), dtype=np.float64)

    for l, n in enumerate(table.resolutions):
        p = x * n
        cell = np.minimum(np.floor(p), n - 1).astype(np.int64)
        frac = p - cell
        w, rows = _level_corners(cell, frac, n, config)
        rows += table.offsets[l]
        indices[l] = rows
        weights[l] = w
        out[:, l * F:(l + 1) * F] = np.einsum("bc,bcf->bf", w, table.data[rows])

    trace = EncodeTrace(indices, weights, out, table.data.shape[0])
    return (out[0] if single else out), trace


def encode_backward(trace: EncodeTrace, grad_y: np.ndarray, grad_table: np.ndarray) -> None:
    """Scatter-add ``dL/dy`` into ``grad_table`` (same shape as ``table.data``)."""
    L, B, C = trace.indices.shape
    grad_y = np.asarray(grad_y, dtype=np.float64).reshape(B, -1)
    if grad_y.shape[1] % L:
        raise ContractError(f"grad_y width {grad_y.shape[1]} not a multiple of {L} levels")
    F = grad_y.shape[1] // L
    if grad_table.shape != (trace.n_rows, F):
        raise ContractError(f"grad_table shape {grad_table.shape} != {(trace.n_rows, F)}")
    flat_idx = trace.indices.reshape(-1)
    g = grad_y.reshape(B, L, F).transpose(1, 0, 2)  # (L, B, F)
    for f in range(F):
        contrib = (trace.weights * g[:, :, f:f + 1]).reshape(-1)
        grad_table[:, f] += np.bincount(flat_idx, weights=contrib, minlength=trace.n_rows)
