"""Finite-difference verification of every layer family and model.

Everything runs in float64 at tiny dimensions.  Stochastic parts are frozen:
dropout draws the same mask on every evaluation (or is disabled inside
models), JEM uses either no contrastive term or fixed negatives, and PETNN
replays the transition masks of a first forward pass.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .layers import (
    ACTIVATIONS,
    Conv2d,
    Dense,
    LayerNorm,
    MultiHeadAttention,
    activation,
    dropout,
    max_pool2d,
    softmax_cross_entropy,
)
from .models import (
    ALL_KINDS,
    GRUCell,
    JEMConfig,
    LSTMCell,
    ModelKind,
    PETNNGates,
    build_model,
    default_spec,
    extended_knots,
    gru_step,
    jem_loss,
    kan_basis_bspline,
    kan_basis_rbf,
    lstm_step,
    petnn_step,
)
from .tensor import Tensor, concat, finite_diff_gradcheck, stack

TOLERANCE = 1e-4
EPS = 1e-6
MAX_PROBES = 16
DTYPE = np.float64

Objective = Callable[[], Tensor]


@dataclass
class GradcheckResult:
    name: str
    convention: str
    discrepancy: float
    seconds: float
    tolerance: float = TOLERANCE
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and self.discrepancy <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        disc = f"{self.discrepancy:.3e}" if self.error is None else "error"
        tail = f"  {self.error}" if self.error else ""
        return f"{self.name:<30} {self.convention:<20} {disc:>10}  {status}{tail}"


def _leaf(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape).astype(DTYPE), requires_grad=True)


def _project(out: Tensor, rng) -> Tensor:
    """Scalar objective with a fixed random weighting of every output element."""
    w = Tensor(rng.standard_normal(out.shape).astype(DTYPE))
    return (out * w).sum()


# ---------------------------------------------------------------------------
# layer families; each builder returns (objective, parameters, convention)


def _tensor_ops(rng):
    a, b = _leaf(rng, 3, 4, lo=0.5, hi=2.0), _leaf(rng, 3, 4)
    w = rng.standard_normal((3, 4))

    def f():
        parts = [a.exp(), a.log(), a.sqrt(), b.tanh(), b.sigmoid(), b.softplus(), a ** 3, b / a,
                 b.softmax(axis=-1), b.logsumexp(axis=0) * a]
        y = stack(parts, 0).sum(axis=0) + concat([b[:, :2], a[:, 2:]], axis=1)
        return (y * w).sum() + (a @ b.T).mean() + b.T.reshape(12)[3:7].sum()

    return f, [a, b], "exact"


def _dense(rng):
    layer = Dense(5, 4, rng, dtype=DTYPE)
    x = _leaf(rng, 3, 5)
    return (lambda: _project(layer(x), np.random.default_rng(1))), [x, *layer.parameters()], "exact"


def _conv(stride, padding):
    def build(rng):
        layer = Conv2d(2, 3, 3, rng, stride=stride, padding=padding, dtype=DTYPE)
        x = _leaf(rng, 2, 2, 7, 7)
        return (lambda: _project(layer(x), np.random.default_rng(1))), [x, *layer.parameters()], "exact"

    return build


def _pool(rng):
    x = _leaf(rng, 2, 2, 6, 6)
    return (lambda: _project(max_pool2d(x, 2), np.random.default_rng(1))), [x], "exact"


def _layer_norm(rng):
    ln = LayerNorm(6, dtype=DTYPE)
    ln.gamma.data[:] = rng.uniform(0.5, 1.5, 6)
    ln.beta.data[:] = rng.uniform(-0.5, 0.5, 6)
    x = _leaf(rng, 4, 6)
    return (lambda: _project(ln(x), np.random.default_rng(1))), [x, *ln.parameters()], "exact"


def _activation(kind):
    def build(rng):
        x = _leaf(rng, 4, 5, lo=-3, hi=3)
        return (lambda: _project(activation(kind, x), np.random.default_rng(1))), [x], "exact"

    return build


def _cross_entropy(rng):
    logits = _leaf(rng, 5, 10, lo=-3, hi=3)
    labels = rng.integers(0, 10, 5)
    return (lambda: softmax_cross_entropy(logits, labels)), [logits], "exact"


def _dropout(rng):
    x = _leaf(rng, 4, 6)
    return (lambda: _project(dropout(x, 0.3, True, np.random.default_rng(7)), np.random.default_rng(1))), \
        [x], "frozen-mask"


def _attention(rng):
    attn = MultiHeadAttention(4, 2, rng, dtype=DTYPE)
    x = _leaf(rng, 2, 5, 4)
    return (lambda: _project(attn(x), np.random.default_rng(1))), [x, *attn.parameters()], "exact"


def _rbf(rng):
    grid = np.linspace(-2, 2, 8)
    x = _leaf(rng, 3, 4, lo=-2.5, hi=2.5)
    return (lambda: _project(kan_basis_rbf(x, grid), np.random.default_rng(1))), [x], "exact"


def _bspline(rng):
    knots = extended_knots(5, 3, -2.0, 2.0)
    # keep probes away from knots, where the cubic basis is only C2
    x = Tensor(rng.uniform(-1.95, -1.25, size=(3, 4)) + 0.8 * rng.integers(0, 4, size=(3, 4)), requires_grad=True)
    return (lambda: _project(kan_basis_bspline(x, knots, 3), np.random.default_rng(1))), [x], "exact"


def _lstm(rng):
    cell = LSTMCell(3, 4, rng, dtype=DTYPE)
    xs = [_leaf(rng, 2, 3) for _ in range(3)]

    def f():
        s = cell.initial_state(2, DTYPE)
        for x in xs:
            s = lstm_step(cell, x, s)
        return _project(s.h, np.random.default_rng(1)) + s.c.sum()

    return f, [*xs, *cell.parameters()], "exact"


def _gru(rng):
    cell = GRUCell(3, 4, rng, dtype=DTYPE)
    xs = [_leaf(rng, 2, 3) for _ in range(3)]

    def f():
        s = cell.initial_state(2, DTYPE)
        for x in xs:
            s = gru_step(cell, x, s)
        return _project(s.h, np.random.default_rng(1))

    return f, [*xs, *cell.parameters()], "exact"


def _petnn_cell(act):
    def build(rng):
        gates = PETNNGates(3, 5, 2, act, rng, dtype=DTYPE)
        gates.tau.data[:] = rng.uniform(-1, 1, 2)
        xs = [_leaf(rng, 2, 3) for _ in range(4)]
        masks = []
        s = gates.initial_state(2, DTYPE)
        for x in xs:
            s = petnn_step(gates, x, s)
            masks.append(s.m)

        def f():
            s = gates.initial_state(2, DTYPE)
            for x, m in zip(xs, masks):
                s = petnn_step(gates, x, s, mask=m)
            return _project(s.h, np.random.default_rng(1)) + (s.C * s.C).sum()

        return f, [*xs, *gates.parameters()], "frozen-mask"

    return build


LAYER_ITEMS: dict[str, Callable] = {
    "tensor ops": _tensor_ops,
    "dense": _dense,
    "conv2d (stride 1, pad 1)": _conv(1, 1),
    "conv2d (stride 2, pad 0)": _conv(2, 0),
    "max_pool2d": _pool,
    "layer_norm": _layer_norm,
    **{f"activation {k}": _activation(k) for k in ACTIVATIONS},
    "softmax_cross_entropy": _cross_entropy,
    "dropout": _dropout,
    "multi-head attention": _attention,
    "kan rbf basis": _rbf,
    "kan b-spline basis": _bspline,
    "lstm cell (3 steps)": _lstm,
    "gru cell (3 steps)": _gru,
    **{f"petnn cell {a}": _petnn_cell(a) for a in ("sigmoid", "gelu", "silu")},
}


# ---------------------------------------------------------------------------
# whole models at tiny dimensions

TINY_OVERRIDES: dict[ModelKind, dict] = {
    ModelKind.MLP: dict(hidden_dims=[5, 4]),
    ModelKind.CNN: dict(hidden_dims=[2, 3], options={"dense": 4}),
    ModelKind.LSTM: dict(hidden_dims=[4]),
    ModelKind.GRU: dict(hidden_dims=[4]),
    ModelKind.TRANSFORMER: dict(hidden_dims=[4], options={"n_heads": 2, "ffn_dim": 6}),
    ModelKind.JEM: dict(hidden_dims=[2, 2, 3], options={"dense": 4}),
    ModelKind.FASTKAN: dict(hidden_dims=[3]),
    ModelKind.EFFICIENTKAN: dict(hidden_dims=[3]),
    ModelKind.PETNN_SIGMOID: dict(layers=2, hidden_dims=[5], options={"cell_dim": 3}),
    ModelKind.PETNN_GELU: dict(layers=2, hidden_dims=[5], options={"cell_dim": 3}),
    ModelKind.PETNN_SILU: dict(layers=2, hidden_dims=[5], options={"cell_dim": 3}),
}


def tiny_model(kind: ModelKind, seed: int = 0):
    spec = default_spec(kind).with_overrides(dropout=0.0, **TINY_OVERRIDES[kind])
    model = build_model(spec, seed, DTYPE)
    model.eval()
    return model


def _model_item(kind: ModelKind):
    def build(rng):
        model = tiny_model(kind)
        x = Tensor(rng.uniform(0, 1, size=(2, 1, 28, 28)))
        y = rng.integers(0, 10, 2)
        convention = "exact"
        if kind.value.startswith("PETNN"):
            model(x)
            model.frozen_masks = model.last_masks
            convention = "frozen-mask"
        elif kind is ModelKind.JEM:
            convention = "energy weight 0"

            def f():
                return jem_loss(model, x, y, JEMConfig(), np.random.default_rng(0), energy_weight=0.0)

            return f, model.parameters(), convention
        return (lambda: softmax_cross_entropy(model(x), y)), model.parameters(), convention

    return build


def _jem_contrastive(rng):
    model = tiny_model(ModelKind.JEM)
    x = Tensor(rng.uniform(0, 1, size=(2, 1, 28, 28)))
    x_neg = rng.uniform(0, 1, size=(2, 1, 28, 28))
    y = rng.integers(0, 10, 2)

    def f():
        return jem_loss(model, x, y, JEMConfig(), np.random.default_rng(0), energy_weight=1.0, x_neg=x_neg)

    return f, model.parameters(), "fixed negatives"


MODEL_ITEMS: dict[str, Callable] = {
    **{f"model {k.value}": _model_item(k) for k in ALL_KINDS},
    "model JEM contrastive": _jem_contrastive,
}


def check_item(name: str, build: Callable, seed: int = 0, tolerance: float = TOLERANCE,
               max_probes: int | None = MAX_PROBES) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    convention = "?"
    try:
        f, params, convention = build(rng)
        disc = finite_diff_gradcheck(f, params, eps=EPS, max_probes=max_probes, rng=np.random.default_rng(seed))
        error = None
    except Exception as e:  # reported, not raised: one broken item must not hide the rest
        disc, error = float("inf"), f"{type(e).__name__}: {e}"
    return GradcheckResult(name, convention, disc, time.perf_counter() - t0, tolerance, error)


def run_gradcheck(items: dict[str, Callable] | None = None, seed: int = 0, tolerance: float = TOLERANCE,
                  max_probes: int | None = MAX_PROBES,
                  on_result: Callable[[GradcheckResult], None] | None = None) -> list[GradcheckResult]:
    items = items if items is not None else {**LAYER_ITEMS, **MODEL_ITEMS}
    results = []
    for name, build in items.items():
        r = check_item(name, build, seed, tolerance, max_probes)
        results.append(r)
        if on_result is not None:
            on_result(r)
    return results
