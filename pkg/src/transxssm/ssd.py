"""State-space duality layer math in three interchangeable forms.

The layer maps per-step inputs (a_t, B_t, C_t, x_t) to outputs

    y_t = sum_{s<=t} (a_t * a_{t-1} * ... * a_{s+1}) <C~_t, B~_s> x_s

where C~/B~ are the C/B rows rotated at their own absolute positions (the
same rotary embedding attention uses). Three implementations of that sum:

* ``ssd_recurrent`` — the O(T*N*P) state recursion h_t = a_t h_{t-1} + B~_t x_t,
  y_t = C~_t h_t. Constant memory in T; this is the inference path.
* ``ssd_matrix``   — the dense semiseparable form Y = (L o (C~ B~^T)) X with L
  the decay mask. Quadratic; gated to short sequences as the verification and
  teaching path.
* ``ssd_chunked``  — matrix form inside fixed-size chunks, recurrent state
  carry between chunks. Linear in T for fixed chunk length; the production
  path.

All decay products are accumulated in log space (a is confined to (0, 1], so
logs are finite and non-positive) to avoid underflow across long spans.

Shapes are written for single sequences (a: [T], B/C: [T x N], X: [T x P]);
every function also accepts stacked leading dimensions, e.g. [batch x heads x
T x N], which is how the model layers call them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .rope import FrequencyTable, log_position_scales, rotate_sequence
from .tensor import Tensor, concat, cumsum, exp, log, matmul, reshape, transpose

__all__ = [
    "SSDInputs",
    "decay_mask",
    "ssd_rope_scores",
    "ssd_recurrent",
    "ssd_matrix",
    "ssd_chunked",
    "MATRIX_FORM_MAX_T",
]

MATRIX_FORM_MAX_T = 4096

# exp(-1e6) underflows to exactly 0.0, keeping masked entries finite end to end
_MASKED_LOG = -1.0e6


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class SSDInputs:
    """One head's sequence inputs: decays a, projections B and C, values X."""

    a: Tensor  # [..., T], each entry in (0, 1]
    B: Tensor  # [..., T, N]
    C: Tensor  # [..., T, N]
    X: Tensor  # [..., T, P]

    def __post_init__(self):
        self.a = _as_tensor(self.a)
        self.B = _as_tensor(self.B)
        self.C = _as_tensor(self.C)
        self.X = _as_tensor(self.X)
        T = self.a.shape[-1]
        for name, t in (("B", self.B), ("C", self.C), ("X", self.X)):
            if t.shape[-2] != T or t.shape[:-2] != self.a.shape[:-1]:
                raise ValueError(f"{name} shape {t.shape} inconsistent with a {self.a.shape}")
        if self.B.shape[-1] != self.C.shape[-1]:
            raise ValueError("B and C must share the state dimension")
        _check_decay_range(self.a.data)

    @property
    def seq_len(self) -> int:
        return self.a.shape[-1]


def _check_decay_range(a: np.ndarray) -> None:
    if a.size and (a.min() <= 0.0 or a.max() > 1.0):
        raise ValueError("decay values must lie in (0, 1]")


def decay_mask(a) -> Tensor:
    """Lower-triangular decay mask L with L[j, i] = a_{i+1} * ... * a_j.

    Diagonal entries are exactly 1, everything above the diagonal exactly 0,
    and with a <= 1 the entries decrease moving left along a row. With a == 1
    this degenerates to the binary causal mask.
    """
    a = _as_tensor(a)
    _check_decay_range(a.data)
    T = a.shape[-1]
    lead = a.shape[:-1]
    cs = cumsum(log(a), axis=-1)
    col = reshape(cs, lead + (T, 1))
    row = reshape(cs, lead + (1, T))
    diff = col - row  # [..., T, T], entry (j, i) = log prod_{i<s<=j} a_s
    tril = np.tril(np.ones((T, T), dtype=a.data.dtype))
    masked = diff * tril + _MASKED_LOG * (1.0 - tril)
    return exp(masked)


def _rotated_roles(
    inp: SSDInputs,
    table: FrequencyTable | None,
    use_rope: bool,
    start_pos: int,
    long_scale_base: int | None,
) -> tuple[Tensor, Tensor]:
    if not use_rope:
        return inp.C, inp.B
    if table is None:
        raise ValueError("use_rope=True requires a frequency table")
    T = inp.seq_len
    pos = np.arange(start_pos, start_pos + T)
    scales = log_position_scales(pos, long_scale_base) if long_scale_base else None
    C = rotate_sequence(inp.C, pos, table, scales=scales)
    B = rotate_sequence(inp.B, pos, table)
    return C, B


def ssd_rope_scores(C, B, table: FrequencyTable, start_pos: int = 0) -> Tensor:
    """All-pairs scores S[m, n] = <rotate(C_m, m), rotate(B_n, n)>.

    Relative rotation falls out of the absolute ones, so S[m, n] equals
    C_m R_{m-n} B_n^T; for constant rows S is Toeplitz.
    """
    C, B = _as_tensor(C), _as_tensor(B)
    T = C.shape[-2]
    pos = np.arange(start_pos, start_pos + T)
    Cr = rotate_sequence(C, pos, table)
    Br = rotate_sequence(B, pos, table)
    return matmul(Cr, transpose(Br))


def ssd_matrix(
    inp: SSDInputs,
    table: FrequencyTable | None,
    use_rope: bool,
    start_pos: int = 0,
    long_scale_base: int | None = None,
) -> Tensor:
    """Dense semiseparable form Y = (L o (C~ B~^T)) X. Verification path."""
    T = inp.seq_len
    if T > MATRIX_FORM_MAX_T:
        raise ValueError(
            f"matrix form is gated to T <= {MATRIX_FORM_MAX_T} "
            f"(got {T}); use ssd_chunked"
        )
    C, B = _rotated_roles(inp, table, use_rope, start_pos, long_scale_base)
    S = matmul(C, transpose(B))
    L = decay_mask(inp.a)
    return matmul(L * S, inp.X)


def ssd_recurrent(
    inp: SSDInputs,
    table: FrequencyTable | None,
    use_rope: bool,
    state: Tensor | None = None,
    start_pos: int = 0,
    long_scale_base: int | None = None,
    return_state: bool = False,
):
    """State recursion h_t = a_t h_{t-1} + B~_t^T x_t, y_t = C~_t h_t.

    One pass over T with an [N x P] state per head — never materialises
    anything quadratic in T. ``state``/``start_pos`` continue a previous
    prefix (incremental decoding).
    """
    T = inp.seq_len
    lead = inp.a.shape[:-1]
    N = inp.B.shape[-1]
    P = inp.X.shape[-1]
    C, B = _rotated_roles(inp, table, use_rope, start_pos, long_scale_base)
    h = state if state is not None else tc.zeros(lead + (N, P))
    ys = []
    for t in range(T):
        b_t = B[..., t : t + 1, :]  # [..., 1, N]
        x_t = inp.X[..., t : t + 1, :]  # [..., 1, P]
        a_t = inp.a[..., t : t + 1]
        a_t = reshape(a_t, a_t.shape + (1,))  # [..., 1, 1]
        h = a_t * h + matmul(transpose(b_t), x_t)
        ys.append(matmul(C[..., t : t + 1, :], h))
    Y = concat(ys, axis=-2)
    if return_state:
        return Y, h
    return Y


def ssd_chunked(
    inp: SSDInputs,
    table: FrequencyTable | None,
    use_rope: bool,
    chunk_len: int,
    start_pos: int = 0,
    long_scale_base: int | None = None,
) -> Tensor:
    """Chunked scan: dense form within chunks, recurrent carry between them.

    Within a chunk of length Q the output is the masked-score matrix applied
    to the chunk's X plus the incoming state read out through C~; the state
    handed to the next chunk is the decayed old state plus the chunk's
    tail-weighted B~^T X summary. Cost is O(T * Q * (N + P)) — linear in T at
    fixed Q.
    """
    if chunk_len < 1:
        raise ValueError("chunk_len must be >= 1")
    T = inp.seq_len
    C, B = _rotated_roles(inp, table, use_rope, start_pos, long_scale_base)
    dt = inp.a.data.dtype
    lead = inp.a.shape[:-1]
    H: Tensor | None = None  # carried state [..., N, P]
    ys = []
    for lo in range(0, T, chunk_len):
        hi = min(lo + chunk_len, T)
        Lc = hi - lo
        a_c = inp.a[..., lo:hi]
        B_c = B[..., lo:hi, :]
        C_c = C[..., lo:hi, :]
        X_c = inp.X[..., lo:hi, :]

        cl = cumsum(log(a_c), axis=-1)  # [..., Lc], log prod_{chunk start..u}
        lg = cl - cl[..., 0:1]  # log prod over local steps 1..u
        col = reshape(lg, lead + (Lc, 1))
        row = reshape(lg, lead + (1, Lc))
        tril = np.tril(np.ones((Lc, Lc), dtype=dt))
        L = exp((col - row) * tril + _MASKED_LOG * (1.0 - tril))

        Y_c = matmul(L * matmul(C_c, transpose(B_c)), X_c)
        if H is not None:
            into = exp(cl)  # decay from before the chunk into each step
            Y_c = Y_c + matmul(C_c, H) * reshape(into, lead + (Lc, 1))

        tail = exp(cl[..., -1:] - cl)  # decay from each step to chunk end
        U = matmul(transpose(B_c * reshape(tail, lead + (Lc, 1))), X_c)
        if H is None:
            H = U
        else:
            total = reshape(exp(cl[..., -1:]), lead + (1, 1))
            H = total * H + U
        ys.append(Y_c)
    return concat(ys, axis=-2)
