"""Model kinds, declarative specs and the ``build_model`` factory."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from ..layers import Module, softmax_cross_entropy
from ..tensor import ShapeError, Tensor

IMAGE_SIDE = 28
N_CLASSES = 10


class ModelKind(str, Enum):
    MLP = "MLP"
    CNN = "CNN"
    LSTM = "LSTM"
    GRU = "GRU"
    TRANSFORMER = "Transformer"
    JEM = "JEM"
    FASTKAN = "FastKAN"
    EFFICIENTKAN = "EfficientKAN"
    PETNN_SIGMOID = "PETNN_Sigmoid"
    PETNN_GELU = "PETNN_GELU"
    PETNN_SILU = "PETNN_SiLU"

    @classmethod
    def parse(cls, name: str) -> "ModelKind":
        key = name.strip().lower().replace("-", "_").replace(" ", "_").replace("(", "").replace(")", "")
        for kind in cls:
            if kind.value.lower() == key or kind.name.lower() == key:
                return kind
        raise ValueError(f"unknown model kind {name!r}; choose from {[k.value for k in cls]}")


# benchmark row order
ALL_KINDS: tuple[ModelKind, ...] = tuple(ModelKind)

PETNN_ACTIVATION = {
    ModelKind.PETNN_SIGMOID: "sigmoid",
    ModelKind.PETNN_GELU: "gelu",
    ModelKind.PETNN_SILU: "silu",
}


@dataclass
class ModelSpec:
    """Declarative description of one benchmark architecture.

    ``options`` carries family-specific knobs (attention heads, KAN grid,
    PETNN cell size, JEM sampler constants ...); unknown keys are rejected by
    the family constructor.
    """

    kind: ModelKind
    layers: int
    hidden_dims: list[int]
    dropout: float
    activation_overrides: dict[str, str] | None = None
    options: dict[str, Any] = field(default_factory=dict)

    def validate(self) -> None:
        if not isinstance(self.kind, ModelKind):
            raise ValueError(f"kind must be a ModelKind, got {self.kind!r}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if not self.hidden_dims or any(int(d) < 1 for d in self.hidden_dims):
            raise ValueError(f"hidden_dims must be positive, got {self.hidden_dims}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["kind"] = ModelKind.parse(d["kind"])
        return cls(**d)

    def with_overrides(self, **changes) -> "ModelSpec":
        new = copy.deepcopy(self)
        options = changes.pop("options", None)
        for k, v in changes.items():
            setattr(new, k, v)
        if options:
            new.options.update(options)
        return new


_DEFAULTS: dict[ModelKind, dict] = {
    ModelKind.MLP: dict(layers=3, hidden_dims=[256, 128], dropout=0.25),
    ModelKind.CNN: dict(layers=4, hidden_dims=[32, 64], dropout=0.25, options={"dense": 128}),
    ModelKind.LSTM: dict(layers=2, hidden_dims=[192], dropout=0.25),
    ModelKind.GRU: dict(layers=2, hidden_dims=[192], dropout=0.25),
    ModelKind.TRANSFORMER: dict(layers=2, hidden_dims=[64], dropout=0.25,
                                options={"n_heads": 4, "ffn_dim": 128, "positional": "sinusoidal"}),
    ModelKind.JEM: dict(layers=5, hidden_dims=[16, 32, 64], dropout=0.1, options={"dense": 128}),
    ModelKind.FASTKAN: dict(layers=2, hidden_dims=[64], dropout=0.0,
                            options={"n_grid": 8, "grid_lo": -2.0, "grid_hi": 2.0}),
    ModelKind.EFFICIENTKAN: dict(layers=2, hidden_dims=[64], dropout=0.0,
                                 options={"grid_size": 5, "spline_order": 3, "grid_lo": -2.0, "grid_hi": 2.0}),
}
for _kind in PETNN_ACTIVATION:
    _DEFAULTS[_kind] = dict(layers=3, hidden_dims=[192], dropout=0.1, options={"cell_dim": 48, "reexcite": True})


def default_spec(kind: ModelKind | str) -> ModelSpec:
    """Default architecture for ``kind``."""
    if isinstance(kind, str):
        kind = ModelKind.parse(kind)
    d = copy.deepcopy(_DEFAULTS[kind])
    return ModelSpec(kind=kind, **d)


def _check_options(spec: ModelSpec, allowed: set[str]) -> None:
    extra = set(spec.options) - allowed
    if extra:
        raise ValueError(f"{spec.kind.value}: unknown options {sorted(extra)}")


class Classifier(Module):
    """Maps ``[B, 1, 28, 28]`` images to ``[B, 10]`` logits."""

    spec: ModelSpec

    def loss(self, x: Tensor, labels, rng: np.random.Generator | None = None) -> Tensor:
        return softmax_cross_entropy(self(x), labels)


def as_images(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if x.ndim != 4 or x.shape[1:] != (1, IMAGE_SIDE, IMAGE_SIDE):
        raise ShapeError(f"expected images of shape [B, 1, {IMAGE_SIDE}, {IMAGE_SIDE}], got {x.shape}")
    return x


def build_model(spec: ModelSpec, seed: int, dtype=np.float32) -> Classifier:
    """Instantiate and initialise the architecture described by ``spec``.

    Initial parameters are a pure function of ``(spec, seed, dtype)``.
    """
    from .classical import CNN, MLP, RecurrentClassifier, Transformer
    from .jem import JEM
    from .kan import KAN
    from .petnn import PETNN

    spec.validate()
    init_rng = np.random.default_rng([seed, 0])
    drop_rng = np.random.default_rng([seed, 1])
    kind = spec.kind
    if kind is ModelKind.MLP:
        model = MLP(spec, init_rng, drop_rng, dtype)
    elif kind is ModelKind.CNN:
        model = CNN(spec, init_rng, drop_rng, dtype)
    elif kind in (ModelKind.LSTM, ModelKind.GRU):
        model = RecurrentClassifier(spec, init_rng, drop_rng, dtype)
    elif kind is ModelKind.TRANSFORMER:
        model = Transformer(spec, init_rng, drop_rng, dtype)
    elif kind is ModelKind.JEM:
        model = JEM(spec, init_rng, drop_rng, dtype, sampler_rng=np.random.default_rng([seed, 2]))
    elif kind in (ModelKind.FASTKAN, ModelKind.EFFICIENTKAN):
        model = KAN(spec, init_rng, drop_rng, dtype)
    else:
        model = PETNN(spec, init_rng, drop_rng, dtype)
    model.spec = spec
    return model


def parameter_report(model: Module) -> dict[str, int]:
    """Per-parameter element counts plus a ``total`` entry."""
    report = {name: p.size for name, p in model.named_parameters()}
    report["total"] = sum(report.values())
    return report
