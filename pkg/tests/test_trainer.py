import math

import numpy as np
import pytest

from rdfield import nets
from rdfield.entropy_model import DistributionParams
from rdfield.field_core import ContractError, encode
from rdfield.rd_objective import rgb_loss, rgb_loss_grad
from rdfield.tasks import ImageTask, TaskDataError, VolumeTask, synthetic_image
from rdfield.render import AnalyticScene
from rdfield.trainer import (STREAM_FEATURE_NOISE, AdamState, CheckpointError, Grads, NumericalError, TrainConfig, _image_backward,
                             _image_forward, adam_update, build_task, checkpoint_bytes, evaluate, init_model,
                             init_state, load_checkpoint_bytes, loss_and_grads, metrics_csv, sample_batch, train,
                             step_rng, train_step)

MICRO_IMAGE = dict(task="image", levels=4, log2_table_size=10, n_min=4, n_max=32, iterations=2000, seed=0)


@pytest.fixture(scope="module")
def image32():
    return ImageTask(synthetic_image(32))


@pytest.fixture(scope="module")
def micro_runs(image32):
    base = TrainConfig(**MICRO_IMAGE, log_every=1)
    return {lam: train(image32, base.replace(rate_lambda=lam)) for lam in (0.0, 1e-3)}


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradients_keep_parameters():
    p = np.array([1.0, -2.0, 3.0])
    state = AdamState.like([p])
    for _ in range(20):
        adam_update([p], [np.zeros(3)], state, 0.1)
    assert p.tolist() == [1.0, -2.0, 3.0]


def test_adam_first_step_is_lr():
    p = np.zeros(4)
    state = AdamState.like([p])
    adam_update([p], [np.array([0.3, -2.0, 1e-3, 50.0])], state, 0.01)
    np.testing.assert_allclose(p, [-0.01, 0.01, -0.01, -0.01], rtol=1e-9)


def test_adam_matches_scalar_reimplementation():
    lr, b1, b2, eps = 0.05, 0.9, 0.99, 1e-8
    p = np.array([3.0])
    state = AdamState.like([p])
    x, m, v = 3.0, 0.0, 0.0
    for t in range(1, 11):
        adam_update([p], [2.0 * (p - 1.0)], state, lr, (b1, b2), eps)
        g = 2.0 * (x - 1.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    assert abs(p[0] - x) < 1e-12


def test_adam_length_mismatch():
    with pytest.raises(ContractError):
        adam_update([np.zeros(2)], [], AdamState.like([np.zeros(2)]), 0.1)


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def test_config_validation_and_roundtrip():
    cfg = TrainConfig(**MICRO_IMAGE)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert TrainConfig.from_dict({"lambda": 0.5}).rate_lambda == 0.5
    assert cfg.batch == 4096 and TrainConfig(task="volume").batch == 1024
    with pytest.raises(ContractError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ContractError):
        TrainConfig(iterations=0)
    with pytest.raises(ContractError):
        TrainConfig(lr_mlp=0.0)
    with pytest.raises(ContractError):
        TrainConfig(task="audio")
    with pytest.raises(ContractError):
        TrainConfig(lambda_mode="hybrid", rate_lambda=1e-3)
    with pytest.raises(ContractError):
        TrainConfig(distribution="gauss")
    with pytest.raises(ContractError):
        TrainConfig(quantizer="rounding").quant


def test_defaults_follow_reference_values():
    cfg = TrainConfig()
    assert cfg.iterations == 30000
    assert (cfg.mu_init, cfg.b_init) == (0.0, 0.01)
    assert (cfg.lr_features, cfg.lr_mlp, cfg.lr_dist) == (1e-2, 1e-3, 1e-3)
    assert (cfg.beta1, cfg.beta2, cfg.eps_features) == (0.9, 0.99, 1e-15)
    assert init_model(cfg.replace(levels=2, log2_table_size=8)).dist.b == pytest.approx(0.01)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def micro_volume():
    return VolumeTask.orbit(AnalyticScene(), n_views=2, n_heldout=1, size=8)


def test_whole_pipeline_gradient_check(micro_volume):
    cfg = TrainConfig(task="volume", levels=2, log2_table_size=6, n_min=2, n_max=4, hidden_width=16,
                      geo_features=3, samples_per_ray=8, batch_size=24, rate_lambda=0.01, seed=3)
    model = init_model(cfg)
    rng = np.random.default_rng(0)
    model.table.data[:] = rng.normal(scale=0.3, size=model.table.data.shape)
    for m in model.mlps.values():
        for b in m.biases:
            b[:] = rng.normal(scale=0.2, size=b.shape)
    model.dist = DistributionParams.from_scale(cfg.kind, 0.05, 0.2)
    step = 5
    _, grads = loss_and_grads(model, cfg, micro_volume, step)

    # 50 random scalar parameters across every group
    slots = []
    for i in rng.choice(model.table.data.size, 20, replace=False):
        slots.append((model.table.data.reshape(-1), grads.table.reshape(-1), i))
    arrays = model.mlp_arrays()
    garrays = grads.mlp_arrays()
    for k in rng.choice(len(arrays), 28):
        i = rng.integers(arrays[k].size)
        slots.append((arrays[k].reshape(-1), garrays[k].reshape(-1), i))
    theta = np.array([model.dist.mu, model.dist.b_raw])
    slots.append((theta, np.array([grads.mu, grads.b_raw]), 0))
    slots.append((theta, np.array([grads.mu, grads.b_raw]), 1))
    assert len(slots) == 50

    def loss():
        model.dist = DistributionParams(cfg.kind, theta[0], theta[1])
        return loss_and_grads(model, cfg, micro_volume, step)[0].loss

    analytic, numeric = [], []
    h = 1e-6
    for arr, g, i in slots:
        old = arr[i]
        arr[i] = old + h
        lp = loss()
        arr[i] = old - h
        lm = loss()
        arr[i] = old
        numeric.append((lp - lm) / (2 * h))
        analytic.append(g[i])
    analytic, numeric = np.array(analytic), np.array(numeric)
    assert np.count_nonzero(numeric) > 40
    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-4


def plain_fit_grads(model, cfg, task, step):
    """Gradient of the RGB loss alone, without noise or rate."""
    batch = sample_batch(task, cfg, step)
    rgb, cache = _image_forward(model, task, batch, 0.0, None)
    grads = Grads(np.zeros_like(model.table.data), {}, 0.0, 0.0)
    _image_backward(model, cache, rgb_loss_grad(rgb, task.targets[batch]), grads)
    return grads


def test_lambda_zero_small_delta_is_plain_fitting(image32):
    cfg = TrainConfig(**MICRO_IMAGE, delta=1e-12, batch_size=256)
    model = init_model(cfg)
    _, grads = loss_and_grads(model, cfg, image32, 0)
    ref = plain_fit_grads(model, cfg, image32, 0)
    np.testing.assert_allclose(grads.table, ref.table, rtol=1e-6, atol=1e-12)
    for a, b in zip(grads.mlp_arrays(), ref.mlp_arrays()):
        np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-12)
    assert grads.mu == 0.0 and grads.b_raw == 0.0


def test_lambda_zero_equals_rate_free_run(image32):
    # the rate draws its noise from a separate stream, so a run without any
    # rate term must match bit for bit when the rate weight is zero
    cfg = TrainConfig(**MICRO_IMAGE, batch_size=256)
    model = init_model(cfg)
    parts, grads = loss_and_grads(model, cfg, image32, 7)
    batch = sample_batch(image32, cfg, 7)
    rgb, cache = _image_forward(model, image32, batch, cfg.quant.delta, step_rng(cfg.seed, 7, STREAM_FEATURE_NOISE))
    ref = Grads(np.zeros_like(model.table.data), {}, 0.0, 0.0)
    _image_backward(model, cache, rgb_loss_grad(rgb, image32.targets[batch]), ref)
    assert parts.loss == rgb_loss(rgb, image32.targets[batch])
    assert np.array_equal(grads.table, ref.table)
    assert all(np.array_equal(a, b) for a, b in zip(grads.mlp_arrays(), ref.mlp_arrays()))
    assert grads.mu == 0.0 and grads.b_raw == 0.0


# ---------------------------------------------------------------------------
# Training runs
# ---------------------------------------------------------------------------


def test_determinism(image32):
    cfg = TrainConfig(**{**MICRO_IMAGE, "iterations": 40}, rate_lambda=1e-3, log_every=1)
    a, b = train(image32, cfg), train(image32, cfg)
    strip = lambda ms: [m[:-1] for m in ms]  # wall-clock excluded
    assert strip(a.metrics) == strip(b.metrics)
    assert a.table.data.tobytes() == b.table.data.tobytes()
    assert checkpoint_bytes(a.model, cfg) == checkpoint_bytes(b.model, cfg)
    c = train(image32, cfg.replace(seed=1))
    assert c.table.data.tobytes() != a.table.data.tobytes()


def test_micro_image_fits(micro_runs):
    r = micro_runs[0.0]
    assert r.metrics[-1].psnr > 30.0
    assert r.final_psnr > 30.0


def test_rate_penalty_lowers_rate(micro_runs):
    assert micro_runs[1e-3].metrics[-1].rate_bits < micro_runs[0.0].metrics[-1].rate_bits


def test_lambda_zero_leaves_distribution_untouched(micro_runs):
    cfg = micro_runs[0.0].config
    d = micro_runs[0.0].dist
    assert (d.mu, d.b) == (cfg.mu_init, pytest.approx(cfg.b_init, rel=1e-12))


def test_distribution_stays_valid(micro_runs):
    d = micro_runs[1e-3].dist
    assert math.isfinite(d.mu) and math.isfinite(d.b_raw) and d.b > 0
    assert d.b != pytest.approx(0.01)


def test_loss_moving_average_decreases(micro_runs):
    loss = np.array([m.loss for m in micro_runs[0.0].metrics])
    assert loss.size == 2000
    avg = np.convolve(loss, np.ones(500) / 500, mode="valid")
    violations = np.mean(avg[500:] > avg[:-500])
    assert violations <= 0.05


def test_untrained_psnr_on_mid_gray():
    task = ImageTask(np.full((16, 16, 3), 128, dtype=np.uint8))
    cfg = TrainConfig(**{**MICRO_IMAGE, "iterations": 1})
    model = init_model(cfg)
    y, _ = encode(task.positions, model.table)
    pred, _ = nets.mlp_forward(model.mlps["image"], y)
    mse = np.mean((pred - 128 / 255) ** 2)
    bias2 = np.mean((pred.mean() - 128 / 255) ** 2)
    assert evaluate(model, cfg, task) == pytest.approx(10 * math.log10(1 / mse), rel=1e-12)
    assert mse == pytest.approx(pred.var() + bias2, rel=1e-6)


def test_metrics_log_every(image32):
    cfg = TrainConfig(**{**MICRO_IMAGE, "iterations": 250}, batch_size=128)
    r = train(image32, cfg)
    assert [m.step for m in r.metrics] == [0, 100, 200, 249]
    csv = metrics_csv(r.metrics).splitlines()
    assert csv[0] == "step,l_rgb,rate_bits,lambda_eff,loss,psnr"
    assert len(csv) == 5 and csv[1].startswith("0,")


def test_train_step_aborts_on_nonfinite(image32):
    cfg = TrainConfig(**{**MICRO_IMAGE, "iterations": 1}, batch_size=64)
    state = init_state(cfg)
    state.model.mlps["image"].biases[-1][:] = np.nan
    with pytest.raises(NumericalError) as err:
        train_step(state, image32)
    assert err.value.snapshot["step"] == 0


def test_hybrid_training_switches(image32):
    cfg = TrainConfig(**{**MICRO_IMAGE, "iterations": 600}, lambda_mode="hybrid", rate_lambda=7e-4,
                      hybrid_threshold=5e-3, batch_size=256, log_every=1)
    r = train(image32, cfg)
    hyb = r.state.hybrid
    assert hyb.switched and hyb.switch_step >= 200
    effs = [m.lambda_eff for m in r.metrics]
    assert effs[0] == r.metrics[0].l_rgb
    assert all(e == 7e-4 for e in effs[hyb.switch_step:])


def test_dimension_mismatch(image32, micro_volume):
    with pytest.raises(ContractError):
        train(micro_volume, TrainConfig(**MICRO_IMAGE))


def test_build_task_missing_input(tmp_path):
    with pytest.raises(TaskDataError) as err:
        build_task(TrainConfig(**MICRO_IMAGE), tmp_path / "nope.ppm")
    assert "nope.ppm" in str(err.value)


def test_checkpoint_roundtrip(micro_volume):
    cfg = TrainConfig(task="volume", levels=2, log2_table_size=6, n_min=2, n_max=4, hidden_width=8,
                      geo_features=3, seed=2)
    model = init_model(cfg)
    model.dist = DistributionParams(cfg.kind, 0.25, -1.5)
    raw = checkpoint_bytes(model, cfg)
    cfg2, back = load_checkpoint_bytes(raw)
    assert cfg2 == cfg
    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)
    assert np.array_equal(back.table.data, f32(model.table.data))
    for a, b in zip(back.mlp_arrays(), model.mlp_arrays()):
        assert np.array_equal(a, f32(b))
    assert list(back.mlps) == ["density", "color"]
    assert back.dist.mu == 0.25 and back.dist.b_raw == -1.5
    with pytest.raises(CheckpointError):
        load_checkpoint_bytes(raw[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint_bytes(b"XXXX" + raw[4:])
