"""MLP, CNN, LSTM/GRU and Transformer classifiers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..layers import (
    Conv2d,
    Dense,
    Dropout,
    LayerNorm,
    Module,
    MultiHeadAttention,
    Parameter,
    max_pool2d,
    orthogonal,
    sinusoidal_positional_encoding,
    xavier_uniform,
)
from ..tensor import ShapeError, Tensor, as_tensor
from .base import IMAGE_SIDE, N_CLASSES, Classifier, ModelKind, ModelSpec, _check_options, as_images


class MLP(Classifier):
    """784 -> hidden... -> 10 with ReLU and dropout after every hidden layer."""

    def __init__(self, spec: ModelSpec, rng, drop_rng, dtype=np.float32):
        _check_options(spec, set())
        widths = [IMAGE_SIDE * IMAGE_SIDE, *spec.hidden_dims]
        self.hidden = [Dense(a, b, rng, init="xavier", dtype=dtype) for a, b in zip(widths, widths[1:])]
        self.head = Dense(widths[-1], N_CLASSES, rng, init="xavier", dtype=dtype)
        self.drop = Dropout(spec.dropout, drop_rng)

    def forward(self, x) -> Tensor:
        h = as_images(x).flatten(1)
        for layer in self.hidden:
            h = self.drop(layer(h).relu())
        return self.head(h)


def mlp_forward(model: MLP, x) -> Tensor:
    return model(x)


class CNN(Classifier):
    """conv(32)-ReLU-pool-conv(64)-ReLU-pool-dense(128)-ReLU-dropout-dense(10)."""

    def __init__(self, spec: ModelSpec, rng, drop_rng, dtype=np.float32):
        _check_options(spec, {"dense"})
        channels = [1, *spec.hidden_dims]
        self.convs = [Conv2d(a, b, 3, rng, padding=1, init="kaiming", dtype=dtype)
                      for a, b in zip(channels, channels[1:])]
        side = IMAGE_SIDE
        for _ in self.convs:
            side //= 2
        self.flat_dim = channels[-1] * side * side
        dense = int(spec.options.get("dense", 128))
        self.fc = Dense(self.flat_dim, dense, rng, init="kaiming", dtype=dtype)
        self.head = Dense(dense, N_CLASSES, rng, init="kaiming", dtype=dtype)
        self.drop = Dropout(spec.dropout, drop_rng)

    def features(self, x) -> Tensor:
        h = as_images(x)
        for conv in self.convs:
            h = max_pool2d(conv(h).relu(), 2)
        return h.flatten(1)

    def forward(self, x) -> Tensor:
        h = self.features(x)
        return self.head(self.drop(self.fc(h).relu()))


def cnn_forward(model: CNN, x) -> Tensor:
    return model(x)


# ---------------------------------------------------------------------------
# recurrent cells


@dataclass
class RecurrentState:
    h: Tensor
    c: Tensor | None = None  # LSTM only


class LSTMCell(Module):
    """Gate order along the fused axis: forget, input, output, candidate."""

    def __init__(self, n_in: int, hidden: int, rng, dtype=np.float32):
        H = hidden
        self.hidden = H
        self.Wh = Parameter(np.concatenate([orthogonal(H, H, rng, dtype) for _ in range(4)]))
        self.Wx = Parameter(xavier_uniform((4 * H, n_in), n_in, 4 * H, rng, dtype))
        b = np.zeros(4 * H, dtype=dtype)
        b[:H] = 1.0
        self.b = Parameter(b)

    def initial_state(self, batch: int, dtype) -> RecurrentState:
        z = Tensor(np.zeros((batch, self.hidden), dtype=dtype))
        return RecurrentState(h=z, c=z)


class GRUCell(Module):
    """``Wh_zr``/``Wx_zr`` hold the update then reset gate; ``*_n`` the candidate."""

    def __init__(self, n_in: int, hidden: int, rng, dtype=np.float32):
        H = hidden
        self.hidden = H
        self.Wh_zr = Parameter(np.concatenate([orthogonal(H, H, rng, dtype) for _ in range(2)]))
        self.Wx_zr = Parameter(xavier_uniform((2 * H, n_in), n_in, 2 * H, rng, dtype))
        b = np.zeros(2 * H, dtype=dtype)
        b[:H] = 0.5
        self.b_zr = Parameter(b)
        self.Wh_n = Parameter(orthogonal(H, H, rng, dtype))
        self.Wx_n = Parameter(xavier_uniform((H, n_in), n_in, H, rng, dtype))
        self.b_n = Parameter(np.zeros(H, dtype=dtype))

    def initial_state(self, batch: int, dtype) -> RecurrentState:
        return RecurrentState(h=Tensor(np.zeros((batch, self.hidden), dtype=dtype)))


def lstm_step(params: LSTMCell, x_t: Tensor, state: RecurrentState) -> RecurrentState:
    H = params.hidden
    x_t = as_tensor(x_t)
    if x_t.shape[-1] != params.Wx.shape[1] or state.h.shape[-1] != H:
        raise ShapeError(f"lstm_step: input {x_t.shape} / state {state.h.shape} do not fit the cell")
    z = state.h @ params.Wh.T + x_t @ params.Wx.T + params.b
    f = z[:, :H].sigmoid()
    i = z[:, H:2 * H].sigmoid()
    o = z[:, 2 * H:3 * H].sigmoid()
    c_tilde = z[:, 3 * H:].tanh()
    c = f * state.c + i * c_tilde
    h = o * c.tanh()
    return RecurrentState(h=h, c=c)


def gru_step(params: GRUCell, x_t: Tensor, state: RecurrentState, trace: dict | None = None) -> RecurrentState:
    H = params.hidden
    x_t = as_tensor(x_t)
    if x_t.shape[-1] != params.Wx_n.shape[1] or state.h.shape[-1] != H:
        raise ShapeError(f"gru_step: input {x_t.shape} / state {state.h.shape} do not fit the cell")
    h_prev = state.h
    zr = (h_prev @ params.Wh_zr.T + x_t @ params.Wx_zr.T + params.b_zr).sigmoid()
    z, r = zr[:, :H], zr[:, H:]
    h_tilde = ((r * h_prev) @ params.Wh_n.T + x_t @ params.Wx_n.T + params.b_n).tanh()
    h = (1.0 - z) * h_prev + z * h_tilde
    if trace is not None:
        trace.update(z=z.data, r=r.data, h_tilde=h_tilde.data, h_prev=h_prev.data, h=h.data)
    return RecurrentState(h=h)


def image_rows(x) -> Tensor:
    """[B,1,28,28] -> [B,28,28]: one 28-pixel row per time step."""
    x = as_images(x)
    return x.reshape(x.shape[0], IMAGE_SIDE, IMAGE_SIDE)


class RecurrentClassifier(Classifier):
    """Stacked LSTM or GRU over image rows; layer norm + dropout between layers."""

    def __init__(self, spec: ModelSpec, rng, drop_rng, dtype=np.float32):
        _check_options(spec, set())
        hidden = spec.hidden_dims[0]
        cell_cls = LSTMCell if spec.kind is ModelKind.LSTM else GRUCell
        self.step = lstm_step if spec.kind is ModelKind.LSTM else gru_step
        ins = [IMAGE_SIDE] + [hidden] * (spec.layers - 1)
        self.cells = [cell_cls(n_in, hidden, rng, dtype) for n_in in ins]
        self.norms = [LayerNorm(hidden, dtype=dtype) for _ in range(spec.layers - 1)]
        self.drop = Dropout(spec.dropout, drop_rng)
        self.head = Dense(hidden, N_CLASSES, rng, dtype=dtype)
        self.steps_consumed = 0

    def forward(self, x) -> Tensor:
        rows = image_rows(x)
        B, T = rows.shape[0], rows.shape[1]
        seq = [rows[:, t, :] for t in range(T)]
        for depth, cell in enumerate(self.cells):
            state = cell.initial_state(B, rows.dtype)
            out = []
            for x_t in seq:
                state = self.step(cell, x_t, state)
                out.append(state.h)
            if depth < len(self.norms):
                out = [self.drop(self.norms[depth](h)) for h in out]
            seq = out
        self.steps_consumed = T
        return self.head(seq[-1])


def rnn_sequence_forward(model: RecurrentClassifier, x) -> Tensor:
    return model(x)


# ---------------------------------------------------------------------------
# transformer


class EncoderBlock(Module):
    """Post-norm encoder block: attention and ReLU feed-forward, each residual."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, p: float, rng, drop_rng, dtype):
        self.attn = MultiHeadAttention(d_model, n_heads, rng, dtype)
        self.norm1 = LayerNorm(d_model, dtype=dtype)
        self.ff1 = Dense(d_model, ffn_dim, rng, dtype=dtype)
        self.ff2 = Dense(ffn_dim, d_model, rng, dtype=dtype)
        self.norm2 = LayerNorm(d_model, dtype=dtype)
        self.drop = Dropout(p, drop_rng)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.drop(self.attn(x)))
        return self.norm2(x + self.drop(self.ff2(self.ff1(x).relu())))


class Transformer(Classifier):
    def __init__(self, spec: ModelSpec, rng, drop_rng, dtype=np.float32):
        _check_options(spec, {"n_heads", "ffn_dim", "positional"})
        d = spec.hidden_dims[0]
        heads = int(spec.options.get("n_heads", 4))
        ffn = int(spec.options.get("ffn_dim", 2 * d))
        self.positional = spec.options.get("positional", "sinusoidal")
        self.embed = Dense(IMAGE_SIDE, d, rng, dtype=dtype)
        if self.positional == "sinusoidal":
            self.pe = Tensor(sinusoidal_positional_encoding(IMAGE_SIDE, d, dtype=dtype))
        elif self.positional == "learned":
            self.pe = Parameter((rng.standard_normal((IMAGE_SIDE, d)) * 0.02).astype(dtype))
        else:
            raise ValueError(f"positional must be 'sinusoidal' or 'learned', got {self.positional!r}")
        self.blocks = [EncoderBlock(d, heads, ffn, spec.dropout, rng, drop_rng, dtype) for _ in range(spec.layers)]
        self.drop = Dropout(spec.dropout, drop_rng)
        self.head = Dense(d, N_CLASSES, rng, dtype=dtype)

    def attention_weights(self) -> list[np.ndarray]:
        return [b.attn.last_weights for b in self.blocks]

    def forward(self, x) -> Tensor:
        tokens = self.drop(self.embed(image_rows(x)) + self.pe)
        for block in self.blocks:
            tokens = block(tokens)
        return self.head(tokens.mean(axis=1))


def transformer_forward(model: Transformer, x) -> Tensor:
    return model(x)
