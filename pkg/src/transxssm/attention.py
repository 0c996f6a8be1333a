"""Causal self-attention with rotary positions, quadratic and recurrent forms.

``causal_attention`` is the standard masked form: scores are inner products
of rotated queries and keys, so they depend on positions only through the
offset m - n. With ``normalize="none"`` the raw masked scores weight the
values directly — in that mode attention computes exactly the same masked
semiseparable product as an SSD layer with unit decays, which is the bridge
the hybrid model is built on.

``linear_attention_step`` is the kernelised recurrent form: feature-mapped
keys accumulate into a [d x P] state and a [d] normaliser, giving O(1) work
per generated token. The feature maps phi (query side) and varphi (key side)
are configurable; they default to the same positive map (elu+1) so the
normaliser cannot vanish for benign inputs. A small-denominator guard emits
the unnormalised numerator and counts the event rather than dividing by ~0,
which rotated features can occasionally produce.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .rope import FrequencyTable, log_position_scales, rotate, rotate_sequence
from .tensor import Tensor, concat, elu1, matmul, reshape, softmax_rows, transpose

__all__ = [
    "AttentionInputs",
    "causal_attention",
    "attention_core",
    "RecurrentAttnState",
    "init_recurrent_state",
    "linear_attention_step",
    "FEATURE_MAPS",
    "DENOM_EPS",
]

DENOM_EPS = 1e-6

FEATURE_MAPS = {
    "identity": lambda t: t,
    "elu1": elu1,
}


@dataclass
class AttentionInputs:
    """Queries/keys [T x d], values [T x P], and the head split of d."""

    q: Tensor
    k: Tensor
    v: Tensor
    n_heads: int = 1

    def __post_init__(self):
        self.q = self.q if isinstance(self.q, Tensor) else Tensor(self.q)
        self.k = self.k if isinstance(self.k, Tensor) else Tensor(self.k)
        self.v = self.v if isinstance(self.v, Tensor) else Tensor(self.v)
        d = self.q.shape[-1]
        if self.k.shape[-1] != d:
            raise ValueError("q and k must share the feature dimension")
        if d % self.n_heads != 0 or self.v.shape[-1] % self.n_heads != 0:
            raise ValueError("feature dims must divide evenly into heads")
        if (d // self.n_heads) % 2 != 0:
            raise ValueError("per-head dimension must be even for pair rotation")


def attention_core(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    table: FrequencyTable,
    normalize: str = "softmax",
    start_pos: int = 0,
    long_scale_base: int | None = None,
    return_weights: bool = False,
):
    """Single-head masked attention on [... x T x d] inputs.

    Rotation happens at absolute positions ``start_pos + t``; the binary
    lower-triangular mask enforces causality. Softmax mode scales scores by
    1/sqrt(d) (the raw mode is kept unscaled so it matches the SSD dual
    exactly).
    """
    if normalize not in ("softmax", "none"):
        raise ValueError(f"normalize must be 'softmax' or 'none', got {normalize!r}")
    T = q.shape[-2]
    pos = np.arange(start_pos, start_pos + T)
    scales = log_position_scales(pos, long_scale_base) if long_scale_base else None
    qr = rotate_sequence(q, pos, table, scales=scales)
    kr = rotate_sequence(k, pos, table)
    scores = matmul(qr, transpose(kr))
    mask = np.tril(np.ones((T, T), dtype=q.data.dtype))
    if normalize == "softmax":
        weights = softmax_rows(scores * (1.0 / math.sqrt(q.shape[-1])), mask)
    else:
        weights = scores * mask
    out = matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def causal_attention(
    inp: AttentionInputs,
    table: FrequencyTable,
    normalize: str = "softmax",
    start_pos: int = 0,
    long_scale_base: int | None = None,
) -> Tensor:
    """Multi-head causal attention over column-partitioned heads."""
    H = inp.n_heads
    dh = inp.q.shape[-1] // H
    pv = inp.v.shape[-1] // H
    outs = []
    for h in range(H):
        qh = inp.q[..., :, h * dh : (h + 1) * dh]
        kh = inp.k[..., :, h * dh : (h + 1) * dh]
        vh = inp.v[..., :, h * pv : (h + 1) * pv]
        outs.append(
            attention_core(
                qh, kh, vh, table, normalize=normalize, start_pos=start_pos,
                long_scale_base=long_scale_base,
            )
        )
    return outs[0] if H == 1 else concat(outs, axis=-1)


@dataclass
class RecurrentAttnState:
    """Accumulated feature-map sums for the recurrent attention form.

    ``s`` holds sum_j varphi(k~_j)^T v_j (shape [d x P]), ``z`` holds
    sum_j varphi(k~_j) (shape [d]); ``pos`` is the next position expected.
    """

    s: Tensor
    z: Tensor
    pos: int = 0
    guard_trips: int = 0
    eps: float = DENOM_EPS


def init_recurrent_state(d: int, p: int) -> RecurrentAttnState:
    return RecurrentAttnState(s=tc.zeros((d, p)), z=tc.zeros((d,)))


def linear_attention_step(
    state: RecurrentAttnState,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    m: int,
    table: FrequencyTable,
    fmap: str = "elu1",
    kmap: str | None = None,
):
    """One recurrent attention step at position ``m``.

    Returns (y, new_state). ``fmap`` is the query-side map phi; ``kmap`` the
    key-side map varphi (defaults to the same map).
    """
    if state.pos != m:
        raise ValueError(f"state is at position {state.pos}, got step for {m}")
    phi = FEATURE_MAPS[fmap]
    varphi = FEATURE_MAPS[kmap or fmap]
    q = q if isinstance(q, Tensor) else Tensor(q)
    k = k if isinstance(k, Tensor) else Tensor(k)
    v = v if isinstance(v, Tensor) else Tensor(v)
    d = q.shape[-1]
    p = v.shape[-1]
    fq = phi(rotate(q, m, table, role="q"))
    fk = varphi(rotate(k, m, table, role="k"))
    s_new = state.s + matmul(reshape(fk, (d, 1)), reshape(v, (1, p)))
    z_new = state.z + fk
    numer = reshape(matmul(reshape(fq, (1, d)), s_new), (p,))
    denom = (fq * z_new).sum()
    trips = state.guard_trips
    if abs(denom.item()) < state.eps:
        y = numer
        trips += 1
    else:
        y = numer / denom
    return y, RecurrentAttnState(s=s_new, z=z_new, pos=m + 1, guard_trips=trips, eps=state.eps)
