"""Reverse-mode gradient driver and the finite-difference oracle.

The tape itself lives on ``Tensor`` nodes (see tensor.py); this module owns
the two operations built on top of it:

* ``backward(loss, params)`` — run the reverse sweep and collect a gradient
  per named parameter (zeros for parameters the loss never touched).
* ``grad_check(f, params, ...)`` — compare tape gradients against central
  finite differences. This is the numerical oracle used throughout the test
  suite; it re-evaluates ``f`` at perturbed points and never reuses the tape
  it is checking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor, Rng, no_grad

__all__ = ["backward", "zero_grads", "GradientReport", "ParamCheck", "grad_check"]


def backward(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. each named leaf parameter."""
    zero_grads(params)
    loss.backward()
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


@dataclass
class ParamCheck:
    max_rel_err: float
    worst_index: int
    worst_ad: float
    worst_fd: float
    n_checked: int


@dataclass
class GradientReport:
    """Per-parameter comparison of tape gradients vs central differences."""

    tol: float
    eps: float
    per_param: dict[str, ParamCheck] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        if not self.per_param:
            return 0.0
        return max(c.max_rel_err for c in self.per_param.values())

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def worst(self) -> tuple[str, ParamCheck] | None:
        if not self.per_param:
            return None
        name = max(self.per_param, key=lambda k: self.per_param[k].max_rel_err)
        return name, self.per_param[name]


def _rel_err(ad: float, fd: float) -> float:
    return abs(ad - fd) / max(abs(ad), abs(fd), 1e-8)


def grad_check(
    f,
    params: dict[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int = 256,
    seed: int = 0,
    zero_atol: float = 1e-9,
) -> GradientReport:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    Tensor. Coordinates are subsampled (at most ``max_coords`` per parameter,
    seeded) because a full check is quadratic in parameter count.

    Coordinates where both sides are numerically zero (< ``zero_atol``) count
    as agreeing: central differences cannot resolve a zero gradient below
    their own rounding noise, so the relative form would only be comparing
    noise against the denominator floor there.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError("eps must lie in [1e-7, 1e-3]")

    loss = f()
    grads = backward(loss, params)

    report = GradientReport(tol=tol, eps=eps)
    rng = Rng(seed)
    for pi, (name, p) in enumerate(sorted(params.items())):
        g_ad = grads[name].reshape(-1)
        n = p.data.size
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.child(pi).permutation(n)[:max_coords]
        flat = p.data.reshape(-1)
        worst = ParamCheck(0.0, -1, 0.0, 0.0, len(coords))
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + eps
            with no_grad():
                up = f().item()
            flat[ci] = orig - eps
            with no_grad():
                down = f().item()
            flat[ci] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"non-finite value at perturbed point of {name}[{ci}]")
            fd = (up - down) / (2.0 * eps)
            ad = float(g_ad[ci])
            if abs(ad) < zero_atol and abs(fd) < zero_atol:
                continue
            err = _rel_err(ad, fd)
            if err > worst.max_rel_err:
                worst.max_rel_err = err
                worst.worst_index = int(ci)
                worst.worst_ad = ad
                worst.worst_fd = fd
        report.per_param[name] = worst
    return report
