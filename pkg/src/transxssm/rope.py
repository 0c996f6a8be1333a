"""Rotary position embedding shared by attention and state-space layers.

Feature vectors are split into consecutive pairs (x0,x1),(x2,x3),...; pair i
is rotated by angle m*theta_i at absolute position m, with

    theta_i = base**(-2*i/d),   i in [0, d/2)

Because each pair rotation is orthogonal, inner products of two rotated
vectors depend only on the position difference: <R_m q, R_n k> = q' R_{m-n} k.
That one identity is what lets the same code path encode positions for
attention queries/keys and for the state-space C/B projections — both sides
of the model see positional shifts identically.

The pair layout here matches the explicit block-diagonal rotation matrix
(``rotation_matrix`` builds it literally; it is the verification oracle for
the fast path). Some codebases rotate split halves instead — that layout is
not interchangeable with this one at the weight level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, custom_op, _accum, default_dtype

__all__ = [
    "FrequencyTable",
    "build_frequencies",
    "rotation_matrix",
    "rotate",
    "rotate_sequence",
    "relative_score",
    "log_position_scale",
    "log_position_scales",
]

ROLES = ("q", "k", "c", "b")

# Test hook: cmd_verify's mutation check flips this to corrupt the rotation
# sign and prove the property suite catches it. Never set in normal use.
_negate_sin_for_tests = False


@dataclass(frozen=True)
class FrequencyTable:
    """Angles and cos/sin caches for one head dimension.

    Immutable; ``extended`` returns a fresh table with a larger cache. The
    caches make per-token rotation O(d), which is what keeps the recurrent
    inference path linear.
    """

    d: int
    base: float
    theta: np.ndarray  # [d/2], strictly decreasing, theta[0] == 1
    cos: np.ndarray = field(repr=False)  # [max_position+1, d/2]
    sin: np.ndarray = field(repr=False)

    @property
    def max_position(self) -> int:
        return self.cos.shape[0] - 1

    def extended(self, max_position: int) -> "FrequencyTable":
        if max_position <= self.max_position:
            return self
        return build_frequencies(self.d, self.base, max_position)

    def angles(self, positions) -> tuple[np.ndarray, np.ndarray]:
        """cos/sin rows for integer position(s); validates cache bounds."""
        pos = np.asarray(positions)
        if pos.size and (pos.min() < 0 or pos.max() > self.max_position):
            raise ValueError(
                f"position out of cache range [0, {self.max_position}]; "
                "use extended() for longer sequences"
            )
        sin = self.sin
        if _negate_sin_for_tests:
            sin = -sin
        return self.cos[pos], sin[pos]


def build_frequencies(d: int, base: float = 10000.0, max_position: int = 4096) -> FrequencyTable:
    """Construct theta_i = base**(-2i/d) and its cos/sin caches."""
    if d < 2 or d % 2 != 0:
        raise ValueError(f"head dimension must be even and >= 2, got {d}")
    if base <= 0:
        raise ValueError(f"frequency base must be positive, got {base}")
    i = np.arange(d // 2, dtype=np.float64)
    theta = base ** (-2.0 * i / d)
    pos = np.arange(max_position + 1, dtype=np.float64)
    ang = pos[:, None] * theta[None, :]
    dt = default_dtype()
    return FrequencyTable(
        d=d,
        base=float(base),
        theta=theta.astype(dt),
        cos=np.cos(ang).astype(dt),
        sin=np.sin(ang).astype(dt),
    )


def rotation_matrix(table: FrequencyTable, m: int) -> np.ndarray:
    """Explicit d x d block-diagonal rotation for position m.

    Dense and O(d^2) to apply — exists as the independent oracle the fast
    pairwise path is verified against, and to evaluate relative rotations
    R_{m-n} directly in score tests.
    """
    d = table.d
    R = np.zeros((d, d), dtype=np.float64)
    for i in range(d // 2):
        c = math.cos(m * float(table.theta[i]))
        s = math.sin(m * float(table.theta[i]))
        R[2 * i, 2 * i] = c
        R[2 * i, 2 * i + 1] = -s
        R[2 * i + 1, 2 * i] = s
        R[2 * i + 1, 2 * i + 1] = c
    return R


def _apply_pairs(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate consecutive pairs of the last axis; cos/sin broadcast from [.., d/2]."""
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rotate(x, m: int, table: FrequencyTable, role: str | None = None) -> Tensor:
    """Rotate feature pairs of ``x`` [... x d] by the angles of position m.

    ``role`` tags the caller's intent (query/key/C/B); every role runs this
    same code path by design.
    """
    if role is not None and role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    return rotate_sequence(x, np.asarray([m]) if np.ndim(m) == 0 else m, table, _single=np.ndim(m) == 0)


def rotate_sequence(
    x,
    positions,
    table: FrequencyTable,
    scales: np.ndarray | None = None,
    _single: bool = False,
) -> Tensor:
    """Rotate rows of ``x`` [... x T x d] at ``positions`` [T].

    With ``_single`` (scalar position, set via ``rotate``) the position axis
    is collapsed: x is [... x d]. ``scales`` optionally multiplies each
    rotated row (the long-position log factor for query/C roles).
    """
    xt = x if isinstance(x, Tensor) else Tensor(x)
    if xt.shape[-1] != table.d:
        raise ValueError(f"last dim {xt.shape[-1]} != table dimension {table.d}")
    pos = np.asarray(positions)
    cos, sin = table.angles(pos)  # [T, d/2]
    if _single:
        cos, sin = cos[0], sin[0]
    elif xt.ndim < 2 or xt.shape[-2] != pos.shape[0]:
        raise ValueError(f"positions length {pos.shape[0]} does not match rows of {xt.shape}")
    s = None
    if scales is not None:
        s = np.asarray(scales, dtype=xt.data.dtype)
        s = s if _single else s[:, None]
    out = _apply_pairs(xt.data, cos, sin)
    if s is not None:
        out = out * s

    def backward(g):
        if xt.requires_grad:
            gg = g if s is None else g * s
            # inverse rotation: same angles, negated sin
            _accum(xt, _apply_pairs(gg, cos, -sin))

    return custom_op(out, (xt,), backward, "rope_rotate")


def relative_score(xq, m: int, xk, n: int, table: FrequencyTable) -> float:
    """<rotate(xq, m), rotate(xk, n)> — depends only on m - n."""
    q = rotate(xq, m, table, role="q").data
    k = rotate(xk, n, table, role="k").data
    return float(np.dot(q, k))


def log_position_scale(m: int, base: int) -> float:
    """Long-position amplification max(1, log_base(m+1)).

    Positions within the base are untouched; beyond it the rotated
    query-side vector is stretched logarithmically so rarely-seen high
    positions still produce well-separated scores. Applied to the query/C
    role only — scaling both sides would square the factor.
    """
    if base < 2:
        raise ValueError("log scale base must be >= 2")
    if m < 0:
        raise ValueError("position must be non-negative")
    return max(1.0, math.log(m + 1) / math.log(base))


def log_position_scales(positions, base: int) -> np.ndarray:
    if base < 2:
        raise ValueError("log scale base must be >= 2")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.size and pos.min() < 0:
        raise ValueError("position must be non-negative")
    return np.maximum(1.0, np.log(pos + 1.0) / math.log(base))
