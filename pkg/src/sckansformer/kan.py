"""Kolmogorov-Arnold layers: per-edge learnable B-spline activations.

Each edge (q, p) of a layer carries its own univariate function
phi_{q,p}(x) = base_weight[q,p] * silu(x) + sum_m coeffs[q,p,m] * B_m(x),
where the B_m are B-spline basis functions of order ``k`` (the polynomial
degree of the pieces; cubic by default) on a uniform grid over [lo, hi]
extended by k knots on each side. The grid is static: no refinement during
training. Inputs are never clamped - outside [lo, hi] the extended knots
extrapolate, and the layer counts how often that happens so a drifting
activation distribution is visible in diagnostics.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    _make_output,
    add,
    matmul,
    no_grad,
    reshape,
    silu,
    transpose,
)


class SplineGrid:
    """Uniform extended knot vector shared by all edges of a layer."""

    def __init__(self, lo: float = -1.0, hi: float = 1.0, intervals: int = 5, order: int = 3):
        if not lo < hi:
            raise ConfigError(f"grid needs lo < hi, got [{lo}, {hi}]")
        if intervals < 1:
            raise ConfigError(f"grid needs intervals >= 1, got {intervals}")
        if order < 1:
            raise ConfigError(f"grid needs order >= 1, got {order}")
        self.lo = float(lo)
        self.hi = float(hi)
        self.intervals = int(intervals)
        self.order = int(order)
        step = (self.hi - self.lo) / self.intervals
        # G + 2k + 1 knots, non-decreasing by construction
        self.knots = self.lo + step * np.arange(-self.order, self.intervals + self.order + 1, dtype=np.float64)

    @property
    def num_basis(self) -> int:
        return self.intervals + self.order

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "intervals": self.intervals, "order": self.order}

    @classmethod
    def from_dict(cls, d: dict) -> "SplineGrid":
        return cls(d["lo"], d["hi"], d["intervals"], d["order"])


def _bases_np(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    """All basis values of the given degree at every element of x.

    Iterative bottom-up recursion; returns shape x.shape + (len(knots)-degree-1,).
    The degree-0 base case is the half-open indicator of the containing
    interval (one-hot over intervals).
    """
    flat = x.reshape(-1, 1)
    bases = ((flat >= knots[:-1]) & (flat < knots[1:])).astype(x.dtype)
    for d in range(1, degree + 1):
        left = (flat - knots[: -(d + 1)]) / (knots[d:-1] - knots[: -(d + 1)]) * bases[:, :-1]
        right = (knots[d + 1 :] - flat) / (knots[d + 1 :] - knots[1:-d]) * bases[:, 1:]
        bases = left + right
    return bases.reshape(*x.shape, -1)


def bspline_basis(x, grid: SplineGrid) -> np.ndarray:
    """Basis values (numpy, no tape) at scalar or array x: shape (..., G+k)."""
    arr = np.asarray(x, dtype=np.float64)
    return _bases_np(arr, grid.knots, grid.order)


def _basis_derivative_np(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    """dB_{i,k}/dx via the classical lower-degree difference formula."""
    lower = _bases_np(x, knots, degree - 1)  # (..., G+k+1)
    n = lower.shape[-1] - 1
    d_left = knots[degree : degree + n] - knots[:n]
    d_right = knots[degree + 1 : degree + 1 + n] - knots[1 : 1 + n]
    return degree * (lower[..., :-1] / d_left - lower[..., 1:] / d_right)


def spline_basis_op(x: Tensor, grid: SplineGrid) -> Tensor:
    """Differentiable basis expansion: [..., n] -> [..., n, G+k]."""
    x_data = x.data
    out = _bases_np(x_data, grid.knots, grid.order)

    def grad_fn(g):
        deriv = _basis_derivative_np(x_data, grid.knots, grid.order)
        return ((g * deriv).sum(axis=-1),)

    return _make_output(out, (x,), grad_fn, "spline_basis")


class KanLayer:
    """Parameters of one KAN layer: n_in*n_out spline edges plus a silu base path."""

    def __init__(
        self,
        n_in: int,
        n_out: int,
        grid: Optional[SplineGrid] = None,
        rng: Optional[np.random.Generator] = None,
        dtype=None,
    ):
        if n_in < 1 or n_out < 1:
            raise ConfigError(f"layer widths must be >= 1, got {n_in}->{n_out}")
        grid = grid or SplineGrid()
        rng = rng or np.random.default_rng(0)
        self.n_in = n_in
        self.n_out = n_out
        self.grid = grid
        coeffs = rng.normal(0.0, 0.1, size=(n_out, n_in, grid.num_basis)) / math.sqrt(n_in)
        bound = 1.0 / math.sqrt(n_in)
        base = rng.uniform(-bound, bound, size=(n_out, n_in))
        self.spline_coeffs = Tensor(coeffs, requires_grad=True, dtype=dtype)
        self.base_weight = Tensor(base, requires_grad=True, dtype=dtype)
        # out-of-domain diagnostics, updated per forward call
        self.inputs_seen = 0
        self.inputs_out_of_domain = 0

    @property
    def out_of_domain_fraction(self) -> float:
        if self.inputs_seen == 0:
            return 0.0
        return self.inputs_out_of_domain / self.inputs_seen

    def parameters(self) -> list:
        return [self.spline_coeffs, self.base_weight]

    def param_count(self) -> int:
        return self.n_in * self.n_out * (self.grid.num_basis + 1)


def kan_layer_forward(x: Tensor, p: KanLayer) -> Tensor:
    """Batched phi evaluation: out[b,q] = sum_p phi_{q,p}(x[b,p])."""
    if x.ndim != 2 or x.shape[1] != p.n_in:
        raise ShapeError(f"kan layer expects [B, {p.n_in}], got {x.shape}")
    b = x.shape[0]
    with no_grad():
        p.inputs_seen += x.size
        p.inputs_out_of_domain += int(((x.data < p.grid.lo) | (x.data > p.grid.hi)).sum())
    base = matmul(silu(x), transpose(p.base_weight, (1, 0)))
    bases = spline_basis_op(x, p.grid)  # [B, n_in, G+k]
    flat = reshape(bases, (b, p.n_in * p.grid.num_basis))
    coeff_mat = reshape(p.spline_coeffs, (p.n_out, p.n_in * p.grid.num_basis))
    spline = matmul(flat, transpose(coeff_mat, (1, 0)))
    return add(base, spline)


class KanStack:
    """Sequential KAN layers with verified width chaining."""

    def __init__(self, layers: list):
        if not layers:
            raise ConfigError("empty KAN stack")
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise ConfigError(f"width chain broken: {a.n_out} -> {b.n_in}")
        self.layers = list(layers)

    @classmethod
    def from_widths(
        cls,
        widths: list,
        grid: Optional[SplineGrid] = None,
        rng: Optional[np.random.Generator] = None,
        dtype=None,
    ) -> "KanStack":
        if len(widths) < 2:
            raise ConfigError(f"need at least two widths, got {widths}")
        rng = rng or np.random.default_rng(0)
        layers = [
            KanLayer(n_in, n_out, grid=grid, rng=rng, dtype=dtype)
            for n_in, n_out in zip(widths, widths[1:])
        ]
        return cls(layers)

    def parameters(self) -> list:
        return [t for layer in self.layers for t in layer.parameters()]


def kan_forward(x: Tensor, s: KanStack) -> Tensor:
    for layer in s.layers:
        x = kan_layer_forward(x, layer)
    return x
