"""Train-export-evaluate runs and rate-distortion sweeps over lambda."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .codec_io import encode_container, histogram, mode_share
from .entropy_model import bin_centers, quantize_indices, rate_from_values
from .report import RdRow
from .trainer import TrainConfig, TrainResult, build_task, evaluate, quantized_table, train

log = logging.getLogger(__name__)


@dataclass
class RunOutcome:
    row: RdRow
    result: TrainResult
    container: bytes
    payload_bytes: int
    float_psnr: float
    mode_share: float


def coded_rate(result: TrainResult) -> float:
    """Bits per feature of the exported indices under the learned model."""
    quant = result.config.quant
    centers = bin_centers(quantize_indices(result.table.data, quant), quant)
    return rate_from_values(centers, result.dist, quant.delta).bits


def run_point(config: TrainConfig, task) -> RunOutcome:
    """Train, export and evaluate the exported (quantized) model."""
    result = train(task, config)
    quant = config.quant
    blob, report = encode_container(result.table, quant, result.dist, override=True)
    q_psnr = evaluate(result.model, config, task, table=quantized_table(result.table, quant))
    row = RdRow(config.distribution, config.lambda_mode, config.schedule.strength, q_psnr,
                len(blob), coded_rate(result), result.seconds)
    share = mode_share(histogram(result.table, quant))
    return RunOutcome(row, result, blob, report.payload_bytes, result.final_psnr, share)


def point_config(base: TrainConfig, dist: str, mode: str, lam: float) -> TrainConfig:
    if mode == "adaptive":
        return base.replace(distribution=dist, lambda_mode=mode, lambda_bar=lam, quantizer=None)
    return base.replace(distribution=dist, lambda_mode=mode, rate_lambda=lam, quantizer=None)


def _run_row(args) -> RdRow:
    config, input_path = args
    try:
        return run_point(config, build_task(config, input_path)).row
    except Exception as exc:  # a failed point must not stop the sweep
        log.warning("run %s/%s lambda=%g failed: %s", config.distribution, config.lambda_mode,
                    config.schedule.strength, exc)
        return RdRow(config.distribution, config.lambda_mode, config.schedule.strength, None, None, None, None)


def worker_cap() -> int:
    env = os.environ.get("CAWA_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, min(cap, int(env)))
        except ValueError:
            pass
    return cap


def sweep(base: TrainConfig, lambdas, modes=("fixed",), dists=("cauchy",), input_path=None,
          parallel: bool = False) -> list[RdRow]:
    """One row per (dist, mode, lambda), in that nesting order."""
    if not lambdas:
        raise ValueError("sweep needs at least one lambda value")
    points = [(d, m, float(lam)) for d in dists for m in modes for lam in lambdas]
    jobs = {}
    for i, (dist, mode, lam) in enumerate(points):
        try:
            jobs[i] = (point_config(base, dist, mode, lam), input_path)
        except ValueError as exc:
            log.warning("skipping %s/%s lambda=%g: %s", dist, mode, lam, exc)
    if parallel and worker_cap() > 1:
        with ProcessPoolExecutor(max_workers=worker_cap()) as pool:
            done = dict(zip(jobs, pool.map(_run_row, jobs.values())))
    else:
        done = {i: _run_row(job) for i, job in jobs.items()}
    return [done.get(i) or RdRow(d, m, lam, None, None, None, None) for i, (d, m, lam) in enumerate(points)]


def pareto_dominated(point: tuple[float, int], others) -> bool:
    """True if some (psnr, size) in ``others`` is at least as good on both and better on one."""
    p, s = point
    return any((op >= p and os_ <= s) and (op > p or os_ < s) for op, os_ in others)
