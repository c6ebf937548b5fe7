"""Energy-transition recurrent network (PETNN).

Per step, with ``act`` the configured gate activation::

    T_t = R_t * act(T_{t-1} + Z_t) - 1          transition potential
    m_t = [T_t <= 0]                             transition mask
    C_t = (1 - m_t) C_{t-1} + m_t I_t + Z_c      memory cell
    h_t = LayerNorm(act((1 - s_w) h_{t-1} + s_w h~ + res(x_t)))

``R_t`` (softplus), ``Z_t``, ``I_t``, ``Z_c``, ``s_w = sigmoid(Z_w)`` and the
candidate pre-activation are independent affine maps of ``[h_{t-1}, x_t]``
stored as row blocks of one fused weight.  The candidate
``h~ = act(affine([h_{t-1}, x_t]) + C_t W_c)`` reads the memory cell, and
``res`` is a bias-free linear map of the input.

Where the mask fires, ``T_t`` is reset to ``softplus(tau)`` (a learned
per-unit re-excitation level) unless ``reexcite`` is off; without it a
negative potential only decays toward -1.  The mask is a constant for
backward (straight-through).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..layers import Dense, Dropout, LayerNorm, Module, Parameter, activation, orthogonal, xavier_uniform
from ..tensor import ShapeError, Tensor, as_tensor, where
from .base import IMAGE_SIDE, N_CLASSES, PETNN_ACTIVATION, Classifier, ModelSpec, _check_options
from .classical import image_rows

# Initial transition-gate scale R.  GELU and SiLU are unbounded with peak
# slopes ~1.13 and ~1.10, so R < 1/1.13 keeps the potential recursion
# contractive.  Sigmoid bounds T below R - 1 for any R, and R > 1 is needed
# for the mask to ever stay off.
_R_INIT = {"sigmoid": 1.5}
_R_INIT_DEFAULT = 0.8
_SMALL_BLOCK_SCALE = 0.1


@dataclass
class PETNNState:
    h: Tensor
    C: Tensor
    T: Tensor
    m: np.ndarray | None = None  # mask of the step that produced this state


class PETNNGates(Module):
    """Parameters of one PETNN layer.

    Row blocks of ``Wh``/``Wx``/``b`` in order: R, Z, I, Z_c (cell dim each),
    Z_w, candidate (hidden dim each).
    """

    def __init__(self, n_in: int, hidden: int, cell: int, gate_activation: str, rng,
                 reexcite: bool = True, dtype=np.float32):
        self.n_in, self.hidden, self.cell = n_in, hidden, cell
        self.gate_activation = gate_activation
        self.reexcite = reexcite
        G = 4 * cell + 2 * hidden
        fan_in = hidden + n_in
        Wh = np.concatenate([
            xavier_uniform((4 * cell + hidden, hidden), fan_in, cell, rng, dtype),
            orthogonal(hidden, hidden, rng, dtype),
        ])
        Wx = xavier_uniform((G, n_in), fan_in, hidden, rng, dtype)
        # small R and Z_c rows: R stays near its initial scale for every input, and a unit
        # that stops firing integrates Z_c slowly instead of letting C run away
        for block in (0, 3):
            rows = slice(block * cell, (block + 1) * cell)
            Wh[rows] *= _SMALL_BLOCK_SCALE
            Wx[rows] *= _SMALL_BLOCK_SCALE
        self.Wh = Parameter(Wh)
        self.Wx = Parameter(Wx)
        # nonzero biases: with h_0 = 0 and blank input rows a zero-bias layer
        # feeds LayerNorm a constant vector, whose Jacobian is ~1/sqrt(eps)
        bound = 1.0 / math.sqrt(fan_in)
        b = rng.uniform(-bound, bound, G).astype(dtype)
        b[:cell] = math.log(math.expm1(_R_INIT.get(gate_activation, _R_INIT_DEFAULT)))
        self.b = Parameter(b)
        self.Wc = Parameter(xavier_uniform((hidden, cell), cell, hidden, rng, dtype))
        self.Wres = Parameter(xavier_uniform((hidden, n_in), n_in, hidden, rng, dtype))
        self.tau = Parameter(np.zeros(cell, dtype=dtype))
        self.norm = LayerNorm(hidden, dtype=dtype)

    def initial_state(self, batch: int, dtype) -> PETNNState:
        return PETNNState(
            h=Tensor(np.zeros((batch, self.hidden), dtype=dtype)),
            C=Tensor(np.zeros((batch, self.cell), dtype=dtype)),
            T=Tensor(np.zeros((batch, self.cell), dtype=dtype)),
        )


def petnn_step(gates: PETNNGates, x_t, state: PETNNState, mask: np.ndarray | None = None,
               trace: dict | None = None) -> PETNNState:
    """Advance one layer by one time step.

    ``mask`` overrides the computed transition mask (used to freeze it for
    finite-difference checks).  When ``trace`` is a dict it receives every
    intermediate as a NumPy array, with ``T_pre`` the potential before any
    re-excitation reset.
    """
    x_t = as_tensor(x_t)
    c, H = gates.cell, gates.hidden
    if x_t.shape[-1] != gates.n_in or state.h.shape[-1] != H or state.C.shape[-1] != c or state.T.shape[-1] != c:
        raise ShapeError(
            f"petnn_step: input {x_t.shape}, state h{state.h.shape} C{state.C.shape} T{state.T.shape} "
            f"do not fit (in={gates.n_in}, hidden={H}, cell={c})"
        )
    act = gates.gate_activation
    g = state.h @ gates.Wh.T + x_t @ gates.Wx.T + gates.b
    R = g[:, :c].softplus()
    Z = g[:, c:2 * c]
    I = g[:, 2 * c:3 * c]
    Zc = g[:, 3 * c:4 * c]
    s_w = g[:, 4 * c:4 * c + H].sigmoid()
    cand_pre = g[:, 4 * c + H:]

    T_pre = R * activation(act, state.T + Z) - 1.0
    fired = (T_pre.data <= 0) if mask is None else np.asarray(mask, dtype=bool)
    m = fired.astype(T_pre.dtype)
    T = where(fired, gates.tau.softplus(), T_pre) if gates.reexcite else T_pre

    C = (1.0 - m) * state.C + m * I + Zc

    h_tilde = activation(act, cand_pre + C @ gates.Wc.T)
    mix = (1.0 - s_w) * state.h + s_w * h_tilde + x_t @ gates.Wres.T
    h = gates.norm(activation(act, mix))

    if not (np.isfinite(h.data).all() and np.isfinite(C.data).all() and np.isfinite(T.data).all()):
        raise FloatingPointError("petnn_step produced a non-finite state")
    if trace is not None:
        trace.update(R=R.data, Z=Z.data, I=I.data, Zc=Zc.data, s_w=s_w.data, h_tilde=h_tilde.data,
                     T_prev=state.T.data, C_prev=state.C.data, h_prev=state.h.data,
                     T_pre=T_pre.data, m=m, T=T.data, C=C.data, h=h.data)
    return PETNNState(h=h, C=C, T=T, m=fired)


class PETNN(Classifier):
    """Stacked PETNN layers scanning image rows; top hidden state -> 10 logits.

    ``frozen_masks`` (per layer, per step) replaces the computed transition
    masks when set; ``last_masks`` always holds the masks of the latest call.
    """

    def __init__(self, spec: ModelSpec, rng, drop_rng, dtype=np.float32):
        _check_options(spec, {"cell_dim", "reexcite", "gate_activation"})
        hidden = spec.hidden_dims[0]
        cell = int(spec.options.get("cell_dim", 48))
        act = (spec.activation_overrides or {}).get("gate") or spec.options.get("gate_activation") \
            or PETNN_ACTIVATION[spec.kind]
        reexcite = bool(spec.options.get("reexcite", True))
        ins = [IMAGE_SIDE] + [hidden] * (spec.layers - 1)
        self.layers = [PETNNGates(n_in, hidden, cell, act, rng, reexcite, dtype) for n_in in ins]
        self.drop = Dropout(spec.dropout, drop_rng)
        self.head = Dense(hidden, N_CLASSES, rng, dtype=dtype)
        self.frozen_masks: list[list[np.ndarray]] | None = None
        self.last_masks: list[list[np.ndarray]] = []
        self.traces: list[list[dict]] | None = None

    def forward(self, x) -> Tensor:
        rows = image_rows(x)
        B, T = rows.shape[0], rows.shape[1]
        seq = [rows[:, t, :] for t in range(T)]
        masks: list[list[np.ndarray]] = []
        record = self.traces is not None
        if record:
            self.traces = []
        for depth, gates in enumerate(self.layers):
            state = gates.initial_state(B, rows.dtype)
            out, layer_masks, layer_traces = [], [], []
            for t, x_t in enumerate(seq):
                frozen = self.frozen_masks[depth][t] if self.frozen_masks is not None else None
                tr = {} if record else None
                state = petnn_step(gates, x_t, state, mask=frozen, trace=tr)
                if record:
                    layer_traces.append(tr)
                layer_masks.append(state.m)
                out.append(state.h)
            masks.append(layer_masks)
            if record:
                self.traces.append(layer_traces)
            if depth < len(self.layers) - 1:
                out = [self.drop(h) for h in out]
            seq = out
        self.last_masks = masks
        return self.head(seq[-1])


def petnn_forward(model: PETNN, x) -> Tensor:
    return model(x)
