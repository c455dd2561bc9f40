"""Deterministic rate-distortion training of hash-grid fields.

Every random draw of step ``s`` comes from ``default_rng([seed, s, stream])``
so that a run is a pure function of its configuration.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import nets
from ._malloc import tune_allocator
from .entropy_model import (DistributionParams, Kind, Quantizer, QuantSpec, dequantize,
                            inject_noise, quantize_indices, rate_loss)
from .field_core import ContractError, FeatureTable, GridConfig, encode, encode_backward, init_table
from .rd_objective import HybridState, LambdaSchedule, global_loss, psnr, rgb_loss, rgb_loss_grad
from .render import composite, composite_backward, sample_along
from .tasks import ImageTask, VolumeTask

log = logging.getLogger(__name__)

STREAM_BATCH, STREAM_FEATURE_NOISE, STREAM_RATE_NOISE, STREAM_JITTER = range(4)


class NumericalError(ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    task: str = "image"
    # grid
    levels: int = 16
    log2_table_size: int = 19
    features_per_entry: int = 2
    n_min: int = 16
    n_max: int = 2048
    # decoders
    hidden_width: int = 64
    image_layers: int = 2
    density_layers: int = 1
    color_layers: int = 2
    geo_features: int = 15
    # compression
    delta: float = 0.15
    distribution: str = "cauchy"
    quantizer: str | None = None
    lambda_mode: str = "fixed"
    rate_lambda: float = 0.0
    lambda_bar: float | None = None
    hybrid_threshold: float | None = None
    mu_init: float = 0.0
    b_init: float = 0.01
    # optimisation
    iterations: int = 30000
    batch_size: int | None = None  # 4096 pixels (image) or 1024 rays (volume)
    samples_per_ray: int = 64
    lr_features: float = 1e-2
    lr_mlp: float = 1e-3
    lr_dist: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps_features: float = 1e-15
    eps: float = 1e-15
    seed: int = 0
    log_every: int = 100
    # volume task
    n_views: int = 8
    n_heldout: int = 2
    view_size: int = 64
    sphere_radius: float = 0.3
    sphere_density: float = 60.0
    camera_radius: float = 1.6
    fov_deg: float = 45.0
    eval_samples_per_ray: int = 128

    def __post_init__(self):
        if self.task not in ("image", "volume"):
            raise ContractError(f"task must be 'image' or 'volume', got {self.task!r}")
        if self.iterations < 1 or self.batch < 1 or self.samples_per_ray < 1:
            raise ContractError("iterations, batch_size and samples_per_ray must be >= 1")
        for name in ("lr_features", "lr_mlp", "lr_dist"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")
        Kind.parse(self.distribution)
        self.schedule  # validates the lambda fields

    @property
    def batch(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 4096 if self.task == "image" else 1024

    @property
    def dims(self) -> int:
        return 2 if self.task == "image" else 3

    @property
    def grid(self) -> GridConfig:
        return GridConfig(self.levels, self.log2_table_size, self.features_per_entry,
                          self.n_min, self.n_max, self.dims)

    @property
    def kind(self) -> Kind:
        return Kind.parse(self.distribution)

    @property
    def quant(self) -> QuantSpec:
        q = Quantizer.parse(self.quantizer) if self.quantizer else Quantizer.for_kind(self.kind)
        return QuantSpec(self.delta, q)

    @property
    def schedule(self) -> LambdaSchedule:
        return LambdaSchedule(self.lambda_mode, self.rate_lambda, self.lambda_bar, self.hybrid_threshold)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        data = dict(data)
        if "lambda" in data:
            data["rate_lambda"] = data.pop("lambda")
        for key in data:
            if key not in known:
                raise ContractError(f"unknown config key {key!r}")
        return cls(**data)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# Model and optimiser state
# ---------------------------------------------------------------------------


@dataclass
class Model:
    table: FeatureTable
    mlps: dict  # name -> MlpParams, in checkpoint order
    dist: DistributionParams

    def copy(self) -> "Model":
        return Model(self.table.copy(), {k: m.copy() for k, m in self.mlps.items()},
                     dataclasses.replace(self.dist))

    def mlp_arrays(self) -> list[np.ndarray]:
        return [a for m in self.mlps.values() for a in m.arrays()]


def init_model(config: TrainConfig) -> Model:
    table = init_table(config.grid, config.seed)
    rng = np.random.default_rng([config.seed, 0xC0DE])
    n_in = config.grid.output_dim
    if config.task == "image":
        mlps = {"image": nets.init_mlp(nets.image_spec(n_in, config.hidden_width, config.image_layers), rng)}
    else:
        mlps = {
            "density": nets.init_mlp(nets.density_spec(n_in, config.geo_features, config.hidden_width,
                                                       config.density_layers), rng),
            "color": nets.init_mlp(nets.color_spec(config.geo_features, config.hidden_width,
                                                   config.color_layers), rng),
        }
    dist = DistributionParams.from_scale(config.kind, config.mu_init, config.b_init)
    return Model(table, mlps, dist)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def like(cls, arrays) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_update(params: list, grads: list, state: AdamState, lr: float,
                betas=(0.9, 0.99), eps: float = 1e-15) -> None:
    """In-place bias-corrected Adam step over a parameter group."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("parameter, gradient and state lists differ in length")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class OptimizerState:
    features: AdamState
    mlp: AdamState
    dist: AdamState

    @classmethod
    def for_model(cls, model: Model) -> "OptimizerState":
        return cls(AdamState.like([model.table.data]), AdamState.like(model.mlp_arrays()),
                   AdamState.like([np.zeros(2)]))


@dataclass
class TrainState:
    config: TrainConfig
    model: Model
    optim: OptimizerState
    hybrid: HybridState = field(default_factory=HybridState)
    step: int = 0


def init_state(config: TrainConfig) -> TrainState:
    model = init_model(config)
    return TrainState(config, model, OptimizerState.for_model(model))


class StepMetrics(NamedTuple):
    step: int
    l_rgb: float
    rate_bits: float
    lambda_eff: float
    loss: float
    wall: float

    @property
    def psnr(self) -> float:
        return psnr(self.l_rgb)


@dataclass
class Grads:
    table: np.ndarray
    mlps: dict
    mu: float
    b_raw: float

    def mlp_arrays(self) -> list[np.ndarray]:
        return [a for m in self.mlps.values() for a in m.arrays()]


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, stream])


def sample_batch(task, config: TrainConfig, step: int) -> np.ndarray:
    """Indices of the training items (pixels or cube-crossing rays) of a step."""
    n = task.n_train
    if config.batch >= n:
        return np.arange(n)
    rng = step_rng(config.seed, step, STREAM_BATCH)
    return np.sort(rng.choice(n, size=config.batch, replace=False))


def _image_forward(model: Model, task: ImageTask, batch, delta, rng):
    y, trace = encode(task.positions[batch], model.table)
    y_hat = inject_noise(y, delta, rng) if rng is not None else y
    rgb, mtrace = nets.mlp_forward(model.mlps["image"], y_hat)
    return rgb, (trace, mtrace)


def _image_backward(model: Model, cache, grad_rgb, grads: Grads):
    trace, mtrace = cache
    g_mlp, g_y = nets.mlp_backward(model.mlps["image"], mtrace, grad_rgb)
    grads.mlps["image"] = g_mlp
    encode_backward(trace, g_y, grads.table)


def _ray_samples(config: TrainConfig, rays, batch, n_samples, rng):
    s = sample_along(rays.origins[batch], rays.dirs[batch], rays.t_near[batch], rays.t_far[batch],
                     n_samples, rng, stratified=rng is not None)
    s.positions = np.clip(s.positions, 0.0, 1.0)
    return s


def _volume_forward(model: Model, config: TrainConfig, rays, batch, n_samples, delta, noise_rng, jitter_rng):
    s = _ray_samples(config, rays, batch, n_samples, jitter_rng)
    R, N = s.t.shape
    y, trace = encode(s.positions.reshape(-1, 3), model.table)
    y_hat = inject_noise(y, delta, noise_rng) if noise_rng is not None else y
    sigma, geo, dtrace = nets.decode_density(model.mlps["density"], y_hat)
    dirs = np.repeat(rays.dirs[batch], N, axis=0)
    color, ctrace = nets.decode_color(model.mlps["color"], geo, nets.encode_direction(dirs))
    sigma = sigma.reshape(R, N)
    color = color.reshape(R, N, 3)
    rgb, _, comp = composite(sigma, color, s.delta)
    return rgb, (s, trace, dtrace, ctrace, comp, color)


def _volume_backward(model: Model, cache, grad_rgb, grads: Grads):
    s, trace, dtrace, ctrace, comp, color = cache
    g_sigma, g_color = composite_backward(comp, color, s.delta, grad_rgb)
    n_geo = model.mlps["density"].spec.n_out - 1
    g_cmlp, g_geo = nets.decode_color_backward(model.mlps["color"], ctrace, g_color.reshape(-1, 3), n_geo)
    g_dmlp, g_y = nets.decode_density_backward(model.mlps["density"], dtrace, g_sigma.reshape(-1), g_geo)
    grads.mlps["density"] = g_dmlp
    grads.mlps["color"] = g_cmlp
    encode_backward(trace, g_y, grads.table)


class LossParts(NamedTuple):
    l_rgb: float
    rate_bits: float
    loss: float
    lambda_eff: float


def loss_and_grads(model: Model, config: TrainConfig, task, step: int,
                   hybrid: HybridState | None = None) -> tuple[LossParts, Grads]:
    """Full objective of one step and its exact gradient for every parameter."""
    quant = config.quant
    batch = sample_batch(task, config, step)
    noise_rng = step_rng(config.seed, step, STREAM_FEATURE_NOISE)
    if task.kind == "image":
        rgb, cache = _image_forward(model, task, batch, quant.delta, noise_rng)
        target = task.targets[batch]
    else:
        jitter_rng = step_rng(config.seed, step, STREAM_JITTER)
        rays = task.train_rays
        idx = task.train_index[batch]
        rgb, cache = _volume_forward(model, config, rays, idx, config.samples_per_ray,
                                     quant.delta, noise_rng, jitter_rng)
        target = rays.targets[idx]
    l_rgb = rgb_loss(rgb, target)
    rate = rate_loss(model.table, model.dist, quant, step_rng(config.seed, step, STREAM_RATE_NOISE))
    total = global_loss(l_rgb, rate.bits, config.schedule, hybrid)

    grads = Grads(np.zeros_like(model.table.data), {}, 0.0, 0.0)
    grad_rgb = total.d_rgb * rgb_loss_grad(rgb, target)
    if task.kind == "image":
        _image_backward(model, cache, grad_rgb, grads)
    else:
        _volume_backward(model, cache, grad_rgb, grads)
    if total.d_rate != 0.0:
        grads.table += total.d_rate * rate.grad_features
        grads.mu = total.d_rate * rate.grad_mu
        grads.b_raw = total.d_rate * rate.grad_b_raw
    return LossParts(l_rgb, rate.bits, total.loss, total.lambda_eff), grads


def train_step(state: TrainState, task) -> StepMetrics:
    """Advance ``state`` by one optimisation step (in place)."""
    t0 = time.perf_counter()
    config = state.config
    schedule = config.schedule
    hybrid = None
    if schedule.mode == "hybrid":
        hybrid = state.hybrid
    parts, grads = loss_and_grads(state.model, config, task, state.step, hybrid)
    if not math.isfinite(parts.loss):
        raise NumericalError(f"non-finite loss at step {state.step}", {
            "step": state.step, "l_rgb": parts.l_rgb, "rate_bits": parts.rate_bits,
            "mu": state.model.dist.mu, "b": state.model.dist.b,
            "max_abs_feature": float(np.abs(state.model.table.data).max()),
        })
    if hybrid is not None:
        hybrid.observe(parts.l_rgb, schedule.threshold)

    model = state.model
    betas = (config.beta1, config.beta2)
    adam_update([model.table.data], [grads.table], state.optim.features, config.lr_features, betas,
                config.eps_features)
    adam_update(model.mlp_arrays(), grads.mlp_arrays(), state.optim.mlp, config.lr_mlp, betas, config.eps)
    dist = np.array([model.dist.mu, model.dist.b_raw])
    adam_update([dist], [np.array([grads.mu, grads.b_raw])], state.optim.dist, config.lr_dist, betas, config.eps)
    model.dist.mu, model.dist.b_raw = float(dist[0]), float(dist[1])

    metrics = StepMetrics(state.step, parts.l_rgb, parts.rate_bits, parts.lambda_eff, parts.loss,
                          time.perf_counter() - t0)
    state.step += 1
    return metrics


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def quantized_table(table: FeatureTable, quant: QuantSpec) -> FeatureTable:
    """The table as it would be reconstructed after export (float32 values)."""
    return FeatureTable(table.config, dequantize(quantize_indices(table.data, quant), quant))


def predict(model: Model, config: TrainConfig, task, split: str = "heldout",
            table: FeatureTable | None = None) -> np.ndarray:
    """Noise-free predictions for every pixel of ``split``."""
    if table is not None:
        model = Model(table, model.mlps, model.dist)
    if task.kind == "image":
        rgb, _ = _image_forward(model, task, np.arange(task.n_train), 0.0, None)
        return rgb
    rays = task.heldout_rays if split == "heldout" else task.train_rays
    out = np.zeros_like(rays.targets)
    hit = np.flatnonzero(rays.hit)
    for start in range(0, hit.size, 2048):
        idx = hit[start:start + 2048]
        out[idx], _ = _volume_forward(model, config, rays, idx, config.eval_samples_per_ray, 0.0, None, None)
    return out


def evaluate(model: Model, config: TrainConfig, task, split: str = "heldout",
             table: FeatureTable | None = None) -> float:
    """PSNR of noise-free predictions on ``split`` (image task: all pixels)."""
    pred = predict(model, config, task, split, table)
    if task.kind == "image":
        target = task.targets
    else:
        target = (task.heldout_rays if split == "heldout" else task.train_rays).targets
    return psnr(rgb_loss(pred, target))


@dataclass
class TrainResult:
    config: TrainConfig
    model: Model
    metrics: list  # StepMetrics emitted every log_every steps
    final_psnr: float
    seconds: float
    state: TrainState

    @property
    def table(self) -> FeatureTable:
        return self.model.table

    @property
    def dist(self) -> DistributionParams:
        return self.model.dist


def build_task(config: TrainConfig, input_path=None):
    if config.task == "image":
        from .tasks import synthetic_image
        return ImageTask.from_ppm(input_path) if input_path else ImageTask(synthetic_image(64))
    from .render import AnalyticScene
    scene = AnalyticScene(radius=config.sphere_radius, density=config.sphere_density)
    return VolumeTask.orbit(scene, config.n_views, config.n_heldout, config.view_size,
                            config.camera_radius, config.fov_deg)


def train(task, config: TrainConfig, callback=None) -> TrainResult:
    """Run ``config.iterations`` steps and evaluate the final model."""
    if task.dims != config.dims:
        raise ContractError(f"task is {task.dims}-D but config expects {config.dims}-D")
    tune_allocator()
    t0 = time.perf_counter()
    state = init_state(config)
    logged = []
    for i in range(config.iterations):
        m = train_step(state, task)
        if i % config.log_every == 0 or i == config.iterations - 1:
            logged.append(m)
            log.debug("step %d l_rgb %.3e R %.3f lambda %.2e", m.step, m.l_rgb, m.rate_bits, m.lambda_eff)
            if callback is not None:
                callback(m)
    seconds = time.perf_counter() - t0
    final = evaluate(state.model, config, task)
    return TrainResult(config, state.model, logged, final, seconds, state)


# ---------------------------------------------------------------------------
# Metrics CSV and checkpoints
# ---------------------------------------------------------------------------

METRICS_HEADER = "step,l_rgb,rate_bits,lambda_eff,loss,psnr"


def metrics_csv(metrics) -> str:
    lines = [METRICS_HEADER]
    for m in metrics:
        lines.append(f"{m.step},{m.l_rgb:.9g},{m.rate_bits:.9g},{m.lambda_eff:.9g},{m.loss:.9g},{m.psnr:.6f}")
    return "\n".join(lines) + "\n"


CHECKPOINT_MAGIC = b"CAWC"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(model: Model, config: TrainConfig) -> bytes:
    """Serialize a model.

    Layout: magic ``CAWC``, u16 version, u32 header length, UTF-8 JSON
    header (config and array shapes, sorted keys), then little-endian
    float32 data in this order: feature table (level-major, entry-major,
    feature-minor), each MLP in header order as W0, b0, W1, b1, ...
    (weights stored input-major), then ``mu`` and ``b_raw``.
    """
    arrays = [model.table.data] + model.mlp_arrays() + [np.array([model.dist.mu, model.dist.b_raw])]
    header = {
        "config": config.to_dict(),
        "mlps": {name: dataclasses.asdict(m.spec) for name, m in model.mlps.items()},
        "mlp_order": list(model.mlps),
        "shapes": [list(a.shape) for a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    return CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(blob)) + blob + payload


class CheckpointError(ValueError):
    pass


def load_checkpoint_bytes(raw: bytes) -> tuple[TrainConfig, Model]:
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[10:10 + hlen])
    config = TrainConfig.from_dict(header["config"])
    pos = 10 + hlen
    arrays = []
    for shape in header["shapes"]:
        n = int(np.prod(shape))
        chunk = raw[pos:pos + 4 * n]
        if len(chunk) != 4 * n:
            raise CheckpointError("truncated checkpoint")
        arrays.append(np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape))
        pos += 4 * n
    table = FeatureTable(config.grid, arrays[0])
    mlps = {}
    k = 1
    for name in header["mlp_order"]:
        spec = nets.MlpSpec(**header["mlps"][name])
        n_layers = len(spec.widths) - 1
        layer = arrays[k:k + 2 * n_layers]
        mlps[name] = nets.MlpParams(spec, layer[0::2], layer[1::2])
        k += 2 * n_layers
    mu, b_raw = arrays[k]
    return config, Model(table, mlps, DistributionParams(config.kind, float(mu), float(b_raw)))
