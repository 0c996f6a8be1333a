"""Causal language model over the hybrid backbone.

Token ids are embedded, run through n_modules hybrid modules (each 7 SS + 1
SA sub-layer by default), normalised once more, and projected to vocabulary
logits. Two execution paths exist and must agree: the full-sequence forward
used for training, and the cached incremental path used for generation,
where every SS sub-layer keeps a fixed-size state and every SA sub-layer an
append-only rotated KV cache.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, replace

import numpy as np

from . import tensor as tc
from .blocks import (
    HybridModuleParams,
    hybrid_module_forward,
    init_hybrid_module,
    make_module_caches,
    module_named_parameters,
    rmsnorm,
)
from .data import VOCAB_SIZE
from .rope import FrequencyTable, build_frequencies
from .tensor import Rng, Tensor, cross_entropy, embedding_lookup, matmul, no_grad, param

__all__ = [
    "ModelConfig",
    "micro_config",
    "Tables",
    "LMParams",
    "init_lm",
    "named_parameters",
    "build_tables",
    "model_forward",
    "model_step",
    "init_caches",
    "cache_sizes",
    "generate",
    "cross_entropy",
]


@dataclass
class ModelConfig:
    d_model: int = 64
    n_modules: int = 2
    n_heads: int = 4
    d_state: int = 128
    chunk_len: int = 256
    vocab_size: int = VOCAB_SIZE
    max_position: int = 1024
    rope_base: float = 10000.0
    ss_per_sa: int = 7
    use_rope_on_ssd: bool = True
    long_position_scaling: bool = False
    long_scale_base: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("per-head dim must be even")
        if self.d_state % 2 != 0:
            raise ValueError("d_state must be even")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_sublayers(self) -> int:
        return self.n_modules * (self.ss_per_sa + 1)

    def to_dict(self) -> dict:
        return asdict(self)


def micro_config(**overrides) -> ModelConfig:
    """Desk-scale preset: trains the synthetic tasks on a laptop CPU."""
    base = ModelConfig(
        d_model=64, n_modules=2, n_heads=4, d_state=16, chunk_len=16, max_position=1024
    )
    return replace(base, **overrides) if overrides else base


@dataclass
class Tables:
    attn: FrequencyTable
    ssd: FrequencyTable


def build_tables(cfg: ModelConfig) -> Tables:
    return Tables(
        attn=build_frequencies(cfg.head_dim, cfg.rope_base, cfg.max_position),
        ssd=build_frequencies(cfg.d_state, cfg.rope_base, cfg.max_position),
    )


@dataclass
class LMParams:
    embed: Tensor  # [V, d]
    modules: list[HybridModuleParams]
    final_gain: Tensor  # [d]
    head: Tensor  # [d, V]


def init_lm(rng: Rng, cfg: ModelConfig) -> LMParams:
    resid_scale = 1.0 / np.sqrt(2.0 * cfg.n_sublayers)
    modules = [
        init_hybrid_module(
            rng.child(1000 + i),
            cfg.d_model,
            cfg.n_heads,
            cfg.d_state,
            cfg.chunk_len,
            cfg.ss_per_sa,
            resid_scale,
        )
        for i in range(cfg.n_modules)
    ]
    return LMParams(
        embed=param(rng.child(1).normal((cfg.vocab_size, cfg.d_model), 0.02)),
        modules=modules,
        final_gain=param(np.ones(cfg.d_model)),
        head=param(rng.child(2).normal((cfg.d_model, cfg.vocab_size), 0.02)),
    )


def named_parameters(params: LMParams) -> dict[str, Tensor]:
    out = {"embed": params.embed}
    for i, m in enumerate(params.modules):
        out.update(module_named_parameters(m, prefix=f"m{i}."))
    out["final_norm.gain"] = params.final_gain
    out["head"] = params.head
    return out


def _backbone(x, params: LMParams, cfg: ModelConfig, tables: Tables, caches, pos: int, ssd_form: str):
    lsb = cfg.long_scale_base if cfg.long_position_scaling else None
    for i, module in enumerate(params.modules):
        x = hybrid_module_forward(
            x,
            module,
            tables.attn,
            tables.ssd,
            caches=caches[i] if caches is not None else None,
            pos=pos,
            use_rope_on_ssd=cfg.use_rope_on_ssd,
            long_scale_base=lsb,
            ssd_form=ssd_form,
        )
    x = rmsnorm(x, params.final_gain)
    return matmul(x, params.head)


def model_forward(
    ids, params: LMParams, cfg: ModelConfig, tables: Tables, ssd_form: str = "chunked"
) -> Tensor:
    """Full-sequence logits [..., T, vocab] for token ids [..., T]."""
    ids = np.asarray(ids)
    if ids.shape[-1] > cfg.max_position:
        raise ValueError(f"sequence length {ids.shape[-1]} exceeds max_position {cfg.max_position}")
    x = embedding_lookup(params.embed, ids)
    return _backbone(x, params, cfg, tables, caches=None, pos=0, ssd_form=ssd_form)


def init_caches(params: LMParams, lead: tuple[int, ...] = ()):
    return [make_module_caches(m, lead) for m in params.modules]


def model_step(ids, params: LMParams, cfg: ModelConfig, tables: Tables, caches, pos: int) -> Tensor:
    """Cached forward of new rows starting at absolute position ``pos``."""
    ids = np.asarray(ids)
    if pos + ids.shape[-1] > cfg.max_position:
        raise ValueError(f"position {pos + ids.shape[-1]} exceeds max_position {cfg.max_position}")
    x = embedding_lookup(params.embed, ids)
    return _backbone(x, params, cfg, tables, caches=caches, pos=pos, ssd_form="chunked")


def cache_sizes(caches) -> tuple[int, int]:
    """(total SS state bytes, total SA KV bytes) across all modules."""
    ss = kv = 0
    for module_caches in caches:
        for c in module_caches:
            if hasattr(c, "h"):
                ss += c.nbytes
            else:
                kv += c.nbytes
    return ss, kv


def generate(
    prompt_ids,
    n_new: int,
    params: LMParams,
    cfg: ModelConfig,
    tables: Tables,
    temperature: float = 0.0,
    rng: Rng | None = None,
    trace_cb=None,
) -> np.ndarray:
    """Sample ``n_new`` tokens after the prompt using incremental caches only.

    Temperature 0 is greedy argmax (deterministic); otherwise softmax
    sampling from the given stream. ``trace_cb(step, ss_bytes, kv_bytes)`` is
    called after each step when provided — callers use it to watch the SS
    cache stay constant while the KV cache grows.
    """
    prompt = np.asarray(prompt_ids, dtype=np.int64)
    if prompt.size == 0:
        raise ValueError("prompt must be non-empty")
    if prompt.size + n_new > cfg.max_position:
        raise ValueError(
            f"prompt ({prompt.size}) + n_new ({n_new}) exceeds max_position {cfg.max_position}"
        )
    if temperature > 0 and rng is None:
        raise ValueError("sampling temperature > 0 requires an Rng")
    out = list(prompt)
    with no_grad():
        caches = init_caches(params)
        logits = model_step(prompt, params, cfg, tables, caches, pos=0)
        last = logits.data[-1]
        for step in range(n_new):
            if temperature <= 0:
                nxt = int(np.argmax(last))
            else:
                z = (last - last.max()) / temperature
                p = np.exp(z)
                p /= p.sum()
                nxt = int(np.searchsorted(np.cumsum(p), rng.uniform(())))
                nxt = min(nxt, cfg.vocab_size - 1)
            out.append(nxt)
            logits = model_step(
                np.asarray([nxt]), params, cfg, tables, caches, pos=len(out) - 1
            )
            last = logits.data[-1]
            if trace_cb is not None:
                ss, kv = cache_sizes(caches)
                trace_cb(step, ss, kv)
    return np.asarray(out, dtype=np.int64)
