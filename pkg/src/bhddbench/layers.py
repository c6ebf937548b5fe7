"""Layer vocabulary shared by all benchmark models.

Functional ops (``conv2d``, ``max_pool2d``, ``layer_norm``,
``softmax_cross_entropy`` ...) carry hand-written backward rules; the
``Module`` subclasses own parameters and call into them.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, matmul

ACTIVATIONS = ("sigmoid", "tanh", "relu", "gelu", "silu")


# ---------------------------------------------------------------------------
# parameters and modules


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Minimal container: parameter discovery, train/eval flag, state dicts."""

    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr


# ---------------------------------------------------------------------------
# initialisers


def xavier_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def kaiming_normal(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def orthogonal(rows: int, cols: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols].astype(dtype)


# ---------------------------------------------------------------------------
# dense


class Dense(Module):
    """Affine map ``x W^T + b`` with ``W`` of shape ``[out, in]``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, init: str = "xavier",
                 bias: bool = True, dtype=np.float32):
        if init == "xavier":
            w = xavier_uniform((n_out, n_in), n_in, n_out, rng, dtype)
        elif init == "kaiming":
            w = kaiming_normal((n_out, n_in), n_in, rng, dtype)
        elif init == "zeros":
            w = np.zeros((n_out, n_in), dtype=dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.W = Parameter(w)
        self.b = Parameter(np.zeros(n_out, dtype=dtype)) if bias else None
        self.n_in, self.n_out = n_in, n_out

    def forward(self, x: Tensor) -> Tensor:
        return dense_forward(self, x)


def dense_forward(layer: Dense, x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != layer.n_in:
        raise ShapeError(f"dense expects last dimension {layer.n_in}, got input shape {x.shape}")
    out = matmul(x, layer.W.T)
    if layer.b is not None:
        out = out + layer.b
    return out


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x [B,C,H,W]`` with ``weight [O,C,k,k]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    O, C2, kh, kw = weight.shape
    if C != C2:
        raise ShapeError(f"conv2d channel mismatch: input {C}, kernel {C2}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < kh or Wp < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(O, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    need_x = x.requires_grad

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(weight.shape)
        gb = g2.sum(axis=0) if bias is not None else None
        gx = None
        if need_x:
            gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(np.ascontiguousarray(out), parents, bw, "conv2d")


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, init: str = "kaiming", dtype=np.float32):
        fan_in = in_ch * k * k
        if init == "kaiming":
            w = kaiming_normal((out_ch, in_ch, k, k), fan_in, rng, dtype)
        else:
            w = xavier_uniform((out_ch, in_ch, k, k), fan_in, out_ch * k * k, rng, dtype)
        self.kernels = Parameter(w)
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernels, self.bias, self.stride, self.padding)


def max_pool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling.

    Trailing rows/columns that do not fill a window are dropped.  Ties send
    the gradient to the first element of the window in row-major order.
    """
    x = as_tensor(x)
    B, C, H, W = x.shape
    Ho, Wo = H // window, W // window
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"input {H}x{W} smaller than pooling window {window}")
    k = window
    blocks = (x.data[:, :, :Ho * k, :Wo * k]
              .reshape(B, C, Ho, k, Wo, k)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(B, C, Ho, Wo, k * k))
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros((B, C, H, W), dtype=g.dtype)
        gx[:, :, :Ho * k, :Wo * k] = (gb.reshape(B, C, Ho, Wo, k, k)
                                      .transpose(0, 1, 2, 4, 3, 5)
                                      .reshape(B, C, Ho * k, Wo * k))
        return (gx,)

    return Tensor._make(out, (x,), bw, "max_pool2d")


# ---------------------------------------------------------------------------
# activations, normalisation, dropout


def activation(kind: str, x: Tensor) -> Tensor:
    x = as_tensor(x)
    if kind == "sigmoid":
        return x.sigmoid()
    if kind == "tanh":
        return x.tanh()
    if kind == "relu":
        return x.relu()
    if kind == "gelu":
        return x.gelu()
    if kind == "silu":
        return x.silu()
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    d = x.shape[-1]
    if gamma.shape != (d,):
        raise ShapeError(f"layer_norm over last axis {d} but gamma has shape {gamma.shape}")
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return Tensor._make(out.astype(a.dtype, copy=False), (x, gamma, beta), bw, "layer_norm")


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5, dtype=np.float32):
        if eps <= 0:
            raise ValueError("layer norm eps must be positive")
        self.gamma = Parameter(np.ones(d, dtype=dtype))
        self.beta = Parameter(np.zeros(d, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) * np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    return x * Tensor(mask)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return dropout(x, self.p, self.training, self.rng)


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return Tensor._make(np.asarray(loss, dtype=z.dtype), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# attention


def sinusoidal_positional_encoding(T: int, d_model: int, dtype=np.float64) -> np.ndarray:
    if d_model % 2:
        raise ValueError(f"sinusoidal encoding needs an even d_model, got {d_model}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_i / d_model)
    pe = np.empty((T, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe.astype(dtype)


class MultiHeadAttention(Module):
    """Full-visibility multi-head self-attention.

    The attention weights of the most recent forward call are kept in
    ``last_weights`` with shape ``[B, heads, T, T]``.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, dtype=np.float32):
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.d_model, self.n_heads = d_model, n_heads
        self.q = Dense(d_model, d_model, rng, dtype=dtype)
        self.k = Dense(d_model, d_model, rng, dtype=dtype)
        self.v = Dense(d_model, d_model, rng, dtype=dtype)
        self.o = Dense(d_model, d_model, rng, dtype=dtype)
        self.last_weights: np.ndarray | None = None

    def forward(self, tokens: Tensor) -> Tensor:
        return scaled_dot_attention(self, tokens)


def scaled_dot_attention(params: MultiHeadAttention, tokens: Tensor) -> Tensor:
    B, T, d = tokens.shape
    if d != params.d_model:
        raise ShapeError(f"attention expects d_model {params.d_model}, got {d}")
    H = params.n_heads
    dk = d // H

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, T, H, dk).transpose(0, 2, 1, 3)

    q, k, v = heads(params.q(tokens)), heads(params.k(tokens)), heads(params.v(tokens))
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dk))
    weights = scores.softmax(axis=-1)
    params.last_weights = weights.data
    ctx = matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, T, d)
    return params.o(ctx)
