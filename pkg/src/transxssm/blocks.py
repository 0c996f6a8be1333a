"""Building blocks of the hybrid model: RMSNorm, FFN, SS and SA sub-layers.

A hybrid module stacks ``ss_per_sa`` state-space sub-layers followed by one
self-attention sub-layer (7:1 by default), every sub-layer trailed by its own
feed-forward network. Normalisation is pre-norm: each residual branch reads
rmsnorm(x), and the skip connection wraps the branch, so a sub-layer whose
output projection is zero is exactly the identity. Both sub-layer kinds
rotate their position-bearing projections (Q/K here, C/B in the state-space
path) with the same frequency tables, which is the point of the design: one
positional code for the whole stack.

Decay scalars for the state-space path come from a sigmoid over a learned
projection, which confines them to (0, 1); the projection bias starts at +3
(decay ~0.95) so early training does not erase long-range signal.

Incremental decoding uses per-sub-layer caches: a fixed-size [N x P] state per
head for SS layers, and the growing rotated K / V tensors for SA layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .attention import attention_core
from .rope import FrequencyTable, log_position_scales, rotate_sequence
from .ssd import SSDInputs, ssd_chunked, ssd_recurrent
from .tensor import (
    Rng,
    Tensor,
    concat,
    matmul,
    param,
    permute,
    reshape,
    sigmoid,
    silu,
    softmax_rows,
    tmean,
    transpose,
)

__all__ = [
    "rmsnorm",
    "FFNParams",
    "ffn_forward",
    "SSBlockParams",
    "SABlockParams",
    "SubLayer",
    "HybridModuleParams",
    "SSCache",
    "KVCache",
    "ss_block_forward",
    "sa_block_forward",
    "hybrid_module_forward",
    "init_ffn",
    "init_ss_block",
    "init_sa_block",
    "init_hybrid_module",
    "make_module_caches",
    "module_named_parameters",
]

RMSNORM_EPS = 1e-6


def rmsnorm(x, gain, eps: float = RMSNORM_EPS) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain, over the last axis."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = x if isinstance(x, Tensor) else Tensor(x)
    ms = tmean(x * x, axis=-1, keepdims=True)
    return x * (ms + eps) ** -0.5 * gain


@dataclass
class FFNParams:
    norm_gain: Tensor  # [d]
    w1: Tensor  # [d, hidden]
    w2: Tensor  # [hidden, d]


def ffn_forward(x, p: FFNParams) -> Tensor:
    """Two linear maps with a smooth gate between; residual added by caller."""
    return matmul(silu(matmul(x, p.w1)), p.w2)


@dataclass
class SSBlockParams:
    norm_gain: Tensor
    w_x: Tensor  # [d, H*P]
    w_b: Tensor  # [d, H*N]
    w_c: Tensor  # [d, H*N]
    w_a: Tensor  # [d, H]
    a_bias: Tensor  # [H]
    w_o: Tensor  # [H*P, d]
    n_heads: int
    d_state: int
    head_dim: int
    chunk_len: int

    def __post_init__(self):
        if self.d_state % 2 != 0:
            raise ValueError("d_state must be even for pair rotation")


@dataclass
class SABlockParams:
    norm_gain: Tensor
    w_q: Tensor  # [d, d]
    w_k: Tensor  # [d, d]
    w_v: Tensor  # [d, d]
    w_o: Tensor  # [d, d]
    n_heads: int
    head_dim: int

    def __post_init__(self):
        if self.head_dim % 2 != 0:
            raise ValueError("per-head dim must be even for pair rotation")


@dataclass
class SubLayer:
    kind: str  # "ss" | "sa"
    block: SSBlockParams | SABlockParams
    ffn: FFNParams


@dataclass
class HybridModuleParams:
    layers: list[SubLayer]
    ss_per_sa: int = 7

    def __post_init__(self):
        expected = ["ss"] * self.ss_per_sa + ["sa"]
        if self.layer_pattern != expected:
            raise ValueError(
                f"sub-layer pattern {self.layer_pattern} != expected {expected}"
            )

    @property
    def layer_pattern(self) -> list[str]:
        return [l.kind for l in self.layers]


# -- caches -------------------------------------------------------------------


@dataclass
class SSCache:
    """Fixed-size recurrent state per head: [..., H, N, P]."""

    h: Tensor
    pos: int = 0

    @property
    def nbytes(self) -> int:
        return self.h.data.nbytes


@dataclass
class KVCache:
    """Rotated keys and values accumulated so far: [..., H, t, dh]."""

    k: Tensor | None = None
    v: Tensor | None = None
    pos: int = 0

    @property
    def nbytes(self) -> int:
        if self.k is None:
            return 0
        return self.k.data.nbytes + self.v.data.nbytes


def make_module_caches(p: HybridModuleParams, lead: tuple[int, ...] = ()):
    caches = []
    for layer in p.layers:
        if layer.kind == "ss":
            b = layer.block
            caches.append(
                SSCache(h=tc.zeros(lead + (b.n_heads, b.d_state, b.head_dim)))
            )
        else:
            caches.append(KVCache())
    return caches


# -- head folding ---------------------------------------------------------------


def _split_heads(t: Tensor, n_heads: int, size: int) -> Tensor:
    """[..., T, H*size] -> [..., H, T, size]."""
    lead = t.shape[:-2]
    T = t.shape[-2]
    r = reshape(t, lead + (T, n_heads, size))
    L = len(lead)
    return permute(r, tuple(range(L)) + (L + 1, L, L + 2))


def _merge_heads(t: Tensor) -> Tensor:
    """[..., H, T, size] -> [..., T, H*size]."""
    lead = t.shape[:-3]
    H, T, size = t.shape[-3:]
    L = len(lead)
    r = permute(t, tuple(range(L)) + (L + 1, L, L + 2))
    return reshape(r, lead + (T, H * size))


# -- forwards ---------------------------------------------------------------------


def ss_block_forward(
    x,
    p: SSBlockParams,
    table: FrequencyTable,
    cache: SSCache | None = None,
    pos: int = 0,
    use_rope: bool = True,
    long_scale_base: int | None = None,
    ssd_form: str = "chunked",
) -> Tensor:
    """State-space sub-layer with pre-norm and residual.

    Full-sequence mode runs the chunked scan (``ssd_form="recurrent"`` forces
    the recursion, used by the benchmark). With ``cache`` the call consumes
    the rows as a continuation of the cached prefix and updates the cache
    state in place; ``pos`` must equal the cache position.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if cache is not None and cache.pos != pos:
        raise ValueError(f"cache is at position {cache.pos}, got rows for {pos}")
    h = rmsnorm(x, p.norm_gain)
    a = sigmoid(matmul(h, p.w_a) + p.a_bias)  # [..., T, H]
    a = transpose(a)  # [..., H, T]
    B = _split_heads(matmul(h, p.w_b), p.n_heads, p.d_state)
    C = _split_heads(matmul(h, p.w_c), p.n_heads, p.d_state)
    Xv = _split_heads(matmul(h, p.w_x), p.n_heads, p.head_dim)
    inp = SSDInputs(a=a, B=B, C=C, X=Xv)
    if cache is not None:
        y, state = ssd_recurrent(
            inp, table, use_rope, state=cache.h, start_pos=pos,
            long_scale_base=long_scale_base, return_state=True,
        )
        cache.h = state
        cache.pos = pos + inp.seq_len
    elif ssd_form == "recurrent":
        y = ssd_recurrent(inp, table, use_rope, start_pos=pos, long_scale_base=long_scale_base)
    elif ssd_form == "chunked":
        y = ssd_chunked(
            inp, table, use_rope, chunk_len=p.chunk_len, start_pos=pos,
            long_scale_base=long_scale_base,
        )
    else:
        raise ValueError(f"unknown ssd_form {ssd_form!r}")
    return x + matmul(_merge_heads(y), p.w_o)


def sa_block_forward(
    x,
    p: SABlockParams,
    table: FrequencyTable,
    cache: KVCache | None = None,
    pos: int = 0,
    use_rope: bool = True,
    long_scale_base: int | None = None,
) -> Tensor:
    """Self-attention sub-layer with pre-norm and residual.

    Keys are cached already rotated; each new query is rotated at its own
    absolute position on arrival, so cached decoding never re-touches old
    entries.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if cache is not None and cache.pos != pos:
        raise ValueError(f"cache is at position {cache.pos}, got rows for {pos}")
    h = rmsnorm(x, p.norm_gain)
    T = h.shape[-2]
    q = _split_heads(matmul(h, p.w_q), p.n_heads, p.head_dim)
    k = _split_heads(matmul(h, p.w_k), p.n_heads, p.head_dim)
    v = _split_heads(matmul(h, p.w_v), p.n_heads, p.head_dim)
    if cache is None:
        y = attention_core(
            q, k, v, table, normalize="softmax", start_pos=pos,
            long_scale_base=long_scale_base,
        ) if use_rope else _unrotated_attention(q, k, v)
    else:
        positions = np.arange(pos, pos + T)
        scales = log_position_scales(positions, long_scale_base) if long_scale_base else None
        if use_rope:
            qr = rotate_sequence(q, positions, table, scales=scales)
            kr = rotate_sequence(k, positions, table)
        else:
            qr, kr = q, k
        if cache.k is None:
            K, V = kr, v
        else:
            K = concat([cache.k, kr], axis=-2)
            V = concat([cache.v, v], axis=-2)
        cache.k, cache.v = K, V
        cache.pos = pos + T
        total = K.shape[-2]
        mask = np.tril(np.ones((total, total), dtype=x.data.dtype))[pos : pos + T]
        scores = matmul(qr, transpose(K)) * (1.0 / math.sqrt(p.head_dim))
        y = matmul(softmax_rows(scores, mask), V)
    return x + matmul(_merge_heads(y), p.w_o)


def _unrotated_attention(q, k, v) -> Tensor:
    """Position-blind softmax attention (ablation comparisons only)."""
    T = q.shape[-2]
    mask = np.tril(np.ones((T, T), dtype=q.data.dtype))
    scores = matmul(q, transpose(k)) * (1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax_rows(scores, mask), v)


def hybrid_module_forward(
    x,
    p: HybridModuleParams,
    attn_table: FrequencyTable,
    ssd_table: FrequencyTable,
    caches=None,
    pos: int = 0,
    use_rope_on_ssd: bool = True,
    long_scale_base: int | None = None,
    ssd_form: str = "chunked",
) -> Tensor:
    """(SS + FFN) * ss_per_sa, then (SA + FFN), pre-norm residuals throughout."""
    for i, layer in enumerate(p.layers):
        cache = caches[i] if caches is not None else None
        if layer.kind == "ss":
            x = ss_block_forward(
                x, layer.block, ssd_table, cache=cache, pos=pos,
                use_rope=use_rope_on_ssd, long_scale_base=long_scale_base,
                ssd_form=ssd_form,
            )
        else:
            x = sa_block_forward(
                x, layer.block, attn_table, cache=cache, pos=pos,
                long_scale_base=long_scale_base,
            )
        x = x + ffn_forward(rmsnorm(x, layer.ffn.norm_gain), layer.ffn)
    return x


# -- initialisation -----------------------------------------------------------------

INIT_STD = 0.02
DECAY_BIAS_INIT = 3.0  # sigmoid(3) ~ 0.95


def init_ffn(rng: Rng, d_model: int, resid_scale: float) -> FFNParams:
    hidden = 4 * d_model
    return FFNParams(
        norm_gain=param(np.ones(d_model)),
        w1=param(rng.normal((d_model, hidden), INIT_STD)),
        w2=param(rng.normal((hidden, d_model), INIT_STD * resid_scale)),
    )


def init_ss_block(
    rng: Rng, d_model: int, n_heads: int, d_state: int, chunk_len: int, resid_scale: float
) -> SSBlockParams:
    head_dim = d_model // n_heads
    return SSBlockParams(
        norm_gain=param(np.ones(d_model)),
        w_x=param(rng.normal((d_model, n_heads * head_dim), INIT_STD)),
        w_b=param(rng.normal((d_model, n_heads * d_state), INIT_STD)),
        w_c=param(rng.normal((d_model, n_heads * d_state), INIT_STD)),
        w_a=param(rng.normal((d_model, n_heads), INIT_STD)),
        a_bias=param(np.full(n_heads, DECAY_BIAS_INIT)),
        w_o=param(rng.normal((n_heads * head_dim, d_model), INIT_STD * resid_scale)),
        n_heads=n_heads,
        d_state=d_state,
        head_dim=head_dim,
        chunk_len=chunk_len,
    )


def init_sa_block(rng: Rng, d_model: int, n_heads: int, resid_scale: float) -> SABlockParams:
    return SABlockParams(
        norm_gain=param(np.ones(d_model)),
        w_q=param(rng.normal((d_model, d_model), INIT_STD)),
        w_k=param(rng.normal((d_model, d_model), INIT_STD)),
        w_v=param(rng.normal((d_model, d_model), INIT_STD)),
        w_o=param(rng.normal((d_model, d_model), INIT_STD * resid_scale)),
        n_heads=n_heads,
        head_dim=d_model // n_heads,
    )


def init_hybrid_module(
    rng: Rng,
    d_model: int,
    n_heads: int,
    d_state: int,
    chunk_len: int,
    ss_per_sa: int,
    resid_scale: float,
) -> HybridModuleParams:
    layers = []
    for i in range(ss_per_sa):
        layers.append(
            SubLayer(
                kind="ss",
                block=init_ss_block(
                    rng.child(i, 0), d_model, n_heads, d_state, chunk_len, resid_scale
                ),
                ffn=init_ffn(rng.child(i, 1), d_model, resid_scale),
            )
        )
    layers.append(
        SubLayer(
            kind="sa",
            block=init_sa_block(rng.child(ss_per_sa, 0), d_model, n_heads, resid_scale),
            ffn=init_ffn(rng.child(ss_per_sa, 1), d_model, resid_scale),
        )
    )
    return HybridModuleParams(layers=layers, ss_per_sa=ss_per_sa)


def module_named_parameters(p: HybridModuleParams, prefix: str = "") -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for i, layer in enumerate(p.layers):
        base = f"{prefix}{layer.kind}{i}"
        b = layer.block
        if layer.kind == "ss":
            fields = ("norm_gain", "w_x", "w_b", "w_c", "w_a", "a_bias", "w_o")
        else:
            fields = ("norm_gain", "w_q", "w_k", "w_v", "w_o")
        for name in fields:
            out[f"{base}.{name}"] = getattr(b, name)
        out[f"{base}.ffn.norm_gain"] = layer.ffn.norm_gain
        out[f"{base}.ffn.w1"] = layer.ffn.w1
        out[f"{base}.ffn.w2"] = layer.ffn.w2
    return out
