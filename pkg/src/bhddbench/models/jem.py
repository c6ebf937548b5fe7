"""Joint energy model: a CNN classifier whose logits double as an energy.

The marginal energy of an image is ``-logsumexp_y f(x)[y]``.  Training adds a
contrastive term ``E(x) - E(x_neg)`` where ``x_neg`` comes from a few steps of
Langevin dynamics started at uniform noise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..layers import Conv2d, Dense, Dropout, max_pool2d, softmax_cross_entropy
from ..tensor import Tensor, grad
from .base import IMAGE_SIDE, N_CLASSES, Classifier, ModelSpec, _check_options, as_images

log = logging.getLogger(__name__)

PIXEL_LO, PIXEL_HI = 0.0, 1.0


class SamplerError(RuntimeError):
    """Langevin sampling produced a non-finite energy."""


@dataclass
class JEMConfig:
    langevin_steps: int = 5
    step_size: float = 10.0
    noise_scale: float = 0.005
    energy_weight: float = 1.0
    replay_buffer: bool = False
    buffer_size: int = 10000
    reinit_prob: float = 0.05

    def validate(self) -> None:
        if self.langevin_steps < 1:
            raise ValueError("langevin_steps must be >= 1")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")


_JEM_OPTIONS = {"dense"} | set(JEMConfig.__dataclass_fields__)


class JEM(Classifier):
    """Three conv/SiLU/pool stages, a SiLU dense layer, then 10 logits."""

    def __init__(self, spec: ModelSpec, rng, drop_rng, dtype=np.float32, sampler_rng=None):
        _check_options(spec, _JEM_OPTIONS)
        channels = [1, *spec.hidden_dims]
        self.convs = [Conv2d(a, b, 3, rng, padding=1, init="kaiming", dtype=dtype)
                      for a, b in zip(channels, channels[1:])]
        side = IMAGE_SIDE
        for _ in self.convs:
            side //= 2
        dense = int(spec.options.get("dense", 128))
        self.fc = Dense(channels[-1] * side * side, dense, rng, init="kaiming", dtype=dtype)
        self.head = Dense(dense, N_CLASSES, rng, init="kaiming", dtype=dtype)
        self.drop = Dropout(spec.dropout, drop_rng)
        cfg_keys = set(JEMConfig.__dataclass_fields__)
        self.jem_cfg = JEMConfig(**{k: v for k, v in spec.options.items() if k in cfg_keys})
        self.jem_cfg.validate()
        self.sampler_rng = sampler_rng if sampler_rng is not None else np.random.default_rng(0)
        self.buffer: np.ndarray | None = None
        self.sampler_failures = 0

    def forward(self, x) -> Tensor:
        h = as_images(x)
        for conv in self.convs:
            h = max_pool2d(conv(h).silu(), 2)
        h = self.drop(self.fc(h.flatten(1)).silu())
        return self.head(h)

    def energy(self, x) -> Tensor:
        return jem_marginal_energy(self, x)

    def loss(self, x, labels, rng=None) -> Tensor:
        return jem_loss(self, x, labels, self.jem_cfg, rng if rng is not None else self.sampler_rng)


def jem_marginal_energy(model: Classifier, x) -> Tensor:
    """Per-sample ``-logsumexp`` of the class logits, shape ``[B]``."""
    return -model(x).logsumexp(axis=-1)


def _initial_negatives(model, cfg: JEMConfig, rng, n: int, dtype) -> np.ndarray:
    shape = (n, 1, IMAGE_SIDE, IMAGE_SIDE)
    fresh = rng.uniform(PIXEL_LO, PIXEL_HI, size=shape).astype(dtype)
    if not cfg.replay_buffer:
        return fresh
    buf = getattr(model, "buffer", None)
    if buf is None or len(buf) == 0:
        return fresh
    pick = rng.integers(0, len(buf), size=n)
    keep = rng.random(n) >= cfg.reinit_prob
    fresh[keep] = buf[pick[keep]]
    return fresh


def sgld_sample(model: Classifier, cfg: JEMConfig, rng: np.random.Generator, n: int = 1,
                init: np.ndarray | None = None, dtype=None) -> np.ndarray:
    """Draw ``n`` negative images by Langevin descent on the marginal energy.

    Each step applies ``x <- clip(x - step_size/2 * dE/dx + noise_scale * eps)``
    and costs exactly one energy gradient evaluation.  The model runs in eval
    mode while sampling.
    """
    cfg.validate()
    if dtype is None:
        dtype = model.parameters()[0].dtype
    x = np.array(init, dtype=dtype) if init is not None else _initial_negatives(model, cfg, rng, n, dtype)
    was_training = model.training
    model.eval()
    try:
        for step in range(cfg.langevin_steps):
            xt = Tensor(x, requires_grad=True)
            energy = jem_marginal_energy(model, xt).sum()
            if not np.isfinite(energy.data):
                raise SamplerError(f"non-finite energy at Langevin step {step}")
            (gx,) = grad(energy, [xt])
            x = x - (cfg.step_size / 2.0) * gx
            if cfg.noise_scale > 0:
                x = x + cfg.noise_scale * rng.standard_normal(x.shape)
            x = np.clip(x, PIXEL_LO, PIXEL_HI).astype(dtype, copy=False)
    finally:
        model.train(was_training)
    if cfg.replay_buffer and hasattr(model, "buffer"):
        buf = model.buffer
        model.buffer = x.copy() if buf is None else np.concatenate([x, buf])[: cfg.buffer_size]
    return x


def jem_loss(model: Classifier, x, labels, cfg: JEMConfig, rng: np.random.Generator,
             energy_weight: float | None = None, x_neg: np.ndarray | None = None) -> Tensor:
    """Cross-entropy plus ``weight * (mean E(x) - mean E(x_neg))``.

    ``x_neg`` is treated as data: no gradient flows through the sampler.
    """
    lam = cfg.energy_weight if energy_weight is None else energy_weight
    x = as_images(x)
    logits = model(x)
    ce = softmax_cross_entropy(logits, labels)
    if lam == 0:
        return ce
    if x_neg is None:
        x_neg = sgld_sample(model, cfg, rng, n=x.shape[0], dtype=x.dtype)
    e_pos = (-logits.logsumexp(axis=-1)).mean()
    e_neg = jem_marginal_energy(model, Tensor(np.asarray(x_neg, dtype=x.dtype))).mean()
    return ce + (e_pos - e_neg) * lam
