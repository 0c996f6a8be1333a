"""Throughput benchmark: wall time per forward across sequence lengths.

Modes time one representative layer (or the whole 7:1 hybrid module) in
forward-only mode — the tape is disabled so autodiff bookkeeping does not
pollute the numbers; an optional forward+backward mode is reported
separately. Each (mode, T) cell is the median of k timed iterations after a
couple of warmups, and per mode the log-log slope of time vs T is fitted,
which is the scale-free way to compare quadratic attention against the
linear chunked scan without arguing about constants.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as tc
from .blocks import (
    hybrid_module_forward,
    init_hybrid_module,
    init_sa_block,
    init_ss_block,
    sa_block_forward,
    ss_block_forward,
)
from .lm import build_tables, ModelConfig
from .tensor import Rng, Tensor, no_grad

__all__ = ["BenchConfig", "BenchRecord", "MODES", "estimate_bytes", "run_bench", "fit_slopes"]

MODES = ("attention-full", "ssd-recurrent", "ssd-chunked", "hybrid")


@dataclass
class BenchConfig:
    d_model: int = 64
    n_heads: int = 4
    d_state: int = 32
    chunk_len: int = 256
    ss_per_sa: int = 7
    batch: int = 1
    iters: int = 5
    warmup: int = 2
    with_backward: bool = False
    memory_limit_bytes: int = 4 << 30
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BenchRecord:
    mode: str
    seq_len: int
    batch: int
    median_s: float
    tokens_per_sec: float
    fp_mode: str
    iters: int
    warmup: int
    direction: str  # "forward" | "forward+backward"

    def to_dict(self) -> dict:
        return asdict(self)


def estimate_bytes(mode: str, T: int, cfg: BenchConfig) -> int:
    """Rough peak-memory estimate for the dominant intermediates."""
    item = tc.default_dtype().itemsize
    quad = cfg.batch * cfg.n_heads * T * T * item * 3  # scores, weights, grads headroom
    lin = cfg.batch * T * cfg.d_model * item * 40
    if mode == "attention-full":
        return quad + lin
    if mode == "hybrid":
        return quad + cfg.ss_per_sa * lin
    if mode == "ssd-chunked":
        q = min(cfg.chunk_len, T)
        return cfg.batch * cfg.n_heads * q * q * item * 3 + lin
    return lin


def _setup(mode: str, T: int, cfg: BenchConfig, rng: Rng):
    resid = 1.0 / math.sqrt(2.0 * (cfg.ss_per_sa + 1))
    mcfg = ModelConfig(
        d_model=cfg.d_model,
        n_modules=1,
        n_heads=cfg.n_heads,
        d_state=cfg.d_state,
        chunk_len=cfg.chunk_len,
        ss_per_sa=cfg.ss_per_sa,
        max_position=T,
    )
    tables = build_tables(mcfg)
    x = Tensor(rng.normal((cfg.batch, T, cfg.d_model)))
    if mode == "attention-full":
        p = init_sa_block(rng, cfg.d_model, cfg.n_heads, resid)
        return lambda: sa_block_forward(x, p, tables.attn)
    if mode == "ssd-recurrent":
        p = init_ss_block(rng, cfg.d_model, cfg.n_heads, cfg.d_state, cfg.chunk_len, resid)
        return lambda: ss_block_forward(x, p, tables.ssd, ssd_form="recurrent")
    if mode == "ssd-chunked":
        p = init_ss_block(rng, cfg.d_model, cfg.n_heads, cfg.d_state, cfg.chunk_len, resid)
        return lambda: ss_block_forward(x, p, tables.ssd, ssd_form="chunked")
    if mode == "hybrid":
        p = init_hybrid_module(
            rng, cfg.d_model, cfg.n_heads, cfg.d_state, cfg.chunk_len, cfg.ss_per_sa, resid
        )
        return lambda: hybrid_module_forward(x, p, tables.attn, tables.ssd)
    raise ValueError(f"unknown bench mode {mode!r}")


def _time_once(fn, with_backward: bool) -> float:
    if with_backward:
        t0 = time.perf_counter()
        out = fn()
        out.sum().backward()
        return time.perf_counter() - t0
    with no_grad():
        t0 = time.perf_counter()
        fn()
        return time.perf_counter() - t0


def run_bench(modes, lengths, cfg: BenchConfig) -> list[BenchRecord]:
    if list(lengths) != sorted(lengths):
        raise ValueError("lengths must be ascending")
    records = []
    direction = "forward+backward" if cfg.with_backward else "forward"
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r} (choose from {MODES})")
        for T in lengths:
            est = estimate_bytes(mode, T, cfg)
            if est > cfg.memory_limit_bytes:
                raise MemoryError(
                    f"mode {mode} at T={T} needs ~{est / 2**30:.1f} GiB "
                    f"(> limit {cfg.memory_limit_bytes / 2**30:.1f} GiB); "
                    "lower T or raise --memory-limit"
                )
            fn = _setup(mode, T, cfg, Rng(cfg.seed))
            for _ in range(cfg.warmup):
                _time_once(fn, cfg.with_backward)
            times = [_time_once(fn, cfg.with_backward) for _ in range(cfg.iters)]
            med = float(np.median(times))
            records.append(
                BenchRecord(
                    mode=mode,
                    seq_len=T,
                    batch=cfg.batch,
                    median_s=med,
                    tokens_per_sec=cfg.batch * T / med,
                    fp_mode=str(tc.default_dtype()),
                    iters=cfg.iters,
                    warmup=cfg.warmup,
                    direction=direction,
                )
            )
    return records


def fit_slopes(records: list[BenchRecord]) -> dict[str, float]:
    """Log-log slope of median time vs sequence length, per mode."""
    slopes = {}
    by_mode: dict[str, list[BenchRecord]] = {}
    for r in records:
        by_mode.setdefault(r.mode, []).append(r)
    for mode, rs in by_mode.items():
        if len(rs) < 2:
            continue
        xs = np.log([r.seq_len for r in rs])
        ys = np.log([r.median_s for r in rs])
        slopes[mode] = float(np.polyfit(xs, ys, 1)[0])
    return slopes


def records_to_csv(records: list[BenchRecord], slopes: dict[str, float]) -> str:
    lines = ["mode,seq_len,batch,median_s,tokens_per_sec,fp_mode,iters,warmup,direction,slope"]
    for r in records:
        s = slopes.get(r.mode)
        lines.append(
            f"{r.mode},{r.seq_len},{r.batch},{r.median_s:.6g},{r.tokens_per_sec:.6g},"
            f"{r.fp_mode},{r.iters},{r.warmup},{r.direction},{'' if s is None else f'{s:.4f}'}"
        )
    return "\n".join(lines) + "\n"
