"""Kolmogorov-Arnold layers with Gaussian-RBF (FastKAN) or B-spline (EfficientKAN) edges.

Each edge ``p -> i`` carries a learnable univariate function
``phi_ip(x) = sum_j c[i, p, j] * basis_j(x)``; a layer output is the sum of
its incoming edge functions.  Inputs are layer-normalised before the basis
expansion so a fixed grid covers them.
"""

from __future__ import annotations

import numpy as np

from ..layers import LayerNorm, Module, Parameter, xavier_uniform
from ..tensor import ShapeError, Tensor, as_tensor, matmul
from .base import IMAGE_SIDE, N_CLASSES, Classifier, ModelKind, ModelSpec, _check_options, as_images


def rbf_grid(n_grid: int, lo: float, hi: float) -> tuple[np.ndarray, float]:
    grid = np.linspace(lo, hi, n_grid)
    return grid, (hi - lo) / (n_grid - 1)


def kan_basis_rbf(x: Tensor, grid: np.ndarray, h: float | None = None) -> Tensor:
    """``exp(-((x - g_j) / h)^2)`` for every grid point; adds a trailing axis."""
    x = as_tensor(x)
    grid = np.asarray(grid, dtype=x.dtype)
    if h is None:
        h = float(grid[1] - grid[0])
    u = (x.data[..., None] - grid) / h
    phi = np.exp(-u * u)

    def bw(g):
        return ((g * phi * (-2.0 * u / h)).sum(axis=-1),)

    return Tensor._make(phi, (x,), bw, "rbf_basis")


def extended_knots(grid_size: int, order: int, lo: float, hi: float) -> np.ndarray:
    """Uniform knots on [lo, hi] padded with ``order`` extra knots per side."""
    step = (hi - lo) / grid_size
    return lo + step * np.arange(-order, grid_size + order + 1)


def _cox_de_boor(x: np.ndarray, knots: np.ndarray, order: int) -> list[np.ndarray]:
    """Bases of every degree 0..order; entry ``k`` has ``len(knots) - 1 - k`` columns."""
    xe = x[..., None]
    bases = [((xe >= knots[:-1]) & (xe < knots[1:])).astype(x.dtype)]
    for k in range(1, order + 1):
        prev = bases[-1]
        left = (xe - knots[:-(k + 1)]) / (knots[k:-1] - knots[:-(k + 1)])
        right = (knots[k + 1:] - xe) / (knots[k + 1:] - knots[1:-k])
        bases.append(left * prev[..., :-1] + right * prev[..., 1:])
    return bases


def kan_basis_bspline(x: Tensor, knots: np.ndarray, order: int = 3) -> Tensor:
    """B-spline bases of degree ``order`` via the Cox-de Boor recursion.

    ``knots`` must already include the ``order`` padding knots on each side
    (see :func:`extended_knots`).  Intervals are half-open, so the bases sum
    to one on ``[knots[order], knots[-order-1])``.
    """
    x = as_tensor(x)
    knots = np.asarray(knots, dtype=x.dtype)
    levels = _cox_de_boor(x.data, knots, order)
    out = levels[order]

    def bw(g):
        if order == 0:
            return (np.zeros(x.shape, dtype=g.dtype),)
        prev = levels[order - 1]
        k = order
        a = k / (knots[k:-1] - knots[:-(k + 1)])
        b = k / (knots[k + 1:] - knots[1:-k])
        deriv = a * prev[..., :-1] - b * prev[..., 1:]
        return ((g * deriv).sum(axis=-1),)

    return Tensor._make(out, (x,), bw, "bspline_basis")


class FastKANLayer(Module):
    def __init__(self, n_in: int, n_out: int, rng, n_grid: int = 8, grid_lo: float = -2.0,
                 grid_hi: float = 2.0, dtype=np.float32):
        self.n_in, self.n_out = n_in, n_out
        self.norm = LayerNorm(n_in, dtype=dtype)
        self.grid, self.h = rbf_grid(n_grid, grid_lo, grid_hi)
        self.coeffs = Parameter((rng.standard_normal((n_out, n_in, n_grid)) * 0.1).astype(dtype))

    def forward(self, x: Tensor) -> Tensor:
        return kan_layer_forward(self, x)


class EfficientKANLayer(Module):
    def __init__(self, n_in: int, n_out: int, rng, grid_size: int = 5, spline_order: int = 3,
                 grid_lo: float = -2.0, grid_hi: float = 2.0, dtype=np.float32):
        self.n_in, self.n_out = n_in, n_out
        self.order = spline_order
        self.norm = LayerNorm(n_in, dtype=dtype)
        self.knots = extended_knots(grid_size, spline_order, grid_lo, grid_hi)
        n_basis = grid_size + spline_order
        self.base_weight = Parameter(xavier_uniform((n_out, n_in), n_in, n_out, rng, dtype))
        self.coeffs = Parameter((rng.standard_normal((n_out, n_in, n_basis)) * 0.1).astype(dtype))

    def forward(self, x: Tensor) -> Tensor:
        return kan_layer_forward(self, x)


def kan_layer_forward(params: FastKANLayer | EfficientKANLayer, x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != params.n_in:
        raise ShapeError(f"KAN layer expects [batch, {params.n_in}], got {x.shape}")
    B = x.shape[0]
    xn = params.norm(x)
    if isinstance(params, FastKANLayer):
        basis = kan_basis_rbf(xn, params.grid, params.h)
    else:
        basis = kan_basis_bspline(xn, params.knots, params.order)
    n_basis = basis.shape[-1]
    coeffs = params.coeffs.reshape(params.n_out, params.n_in * n_basis)
    out = matmul(basis.reshape(B, params.n_in * n_basis), coeffs.T)
    if isinstance(params, EfficientKANLayer):
        out = out + matmul(xn.silu(), params.base_weight.T)
    return out


class KAN(Classifier):
    """[784, hidden..., 10] stack of FastKAN or EfficientKAN layers."""

    def __init__(self, spec: ModelSpec, rng, drop_rng, dtype=np.float32):
        widths = [IMAGE_SIDE * IMAGE_SIDE, *spec.hidden_dims, N_CLASSES]
        if spec.kind is ModelKind.FASTKAN:
            _check_options(spec, {"n_grid", "grid_lo", "grid_hi"})
            opts = dict(n_grid=8, grid_lo=-2.0, grid_hi=2.0) | spec.options
            self.layers = [FastKANLayer(a, b, rng, dtype=dtype, **opts) for a, b in zip(widths, widths[1:])]
        else:
            _check_options(spec, {"grid_size", "spline_order", "grid_lo", "grid_hi"})
            opts = dict(grid_size=5, spline_order=3, grid_lo=-2.0, grid_hi=2.0) | spec.options
            self.layers = [EfficientKANLayer(a, b, rng, dtype=dtype, **opts) for a, b in zip(widths, widths[1:])]

    def forward(self, x) -> Tensor:
        h = as_images(x).flatten(1)
        for layer in self.layers:
            h = layer(h)
        return h
