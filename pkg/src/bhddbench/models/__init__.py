"""The eleven benchmark architectures."""

from .base import (
    ALL_KINDS,
    IMAGE_SIDE,
    N_CLASSES,
    Classifier,
    ModelKind,
    ModelSpec,
    build_model,
    default_spec,
    parameter_report,
)
from .classical import (
    CNN,
    MLP,
    GRUCell,
    LSTMCell,
    RecurrentClassifier,
    RecurrentState,
    Transformer,
    cnn_forward,
    gru_step,
    lstm_step,
    mlp_forward,
    rnn_sequence_forward,
    transformer_forward,
)
from .jem import JEM, JEMConfig, SamplerError, jem_loss, jem_marginal_energy, sgld_sample
from .kan import (
    KAN,
    EfficientKANLayer,
    FastKANLayer,
    extended_knots,
    kan_basis_bspline,
    kan_basis_rbf,
    kan_layer_forward,
)
from .petnn import PETNN, PETNNGates, PETNNState, petnn_forward, petnn_step

__all__ = [name for name in dir() if not name.startswith("_")]
