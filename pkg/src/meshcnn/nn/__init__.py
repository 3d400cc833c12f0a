"""Mesh CNN layers, model, optimizer and training loop."""

from .layers import (
    ConvFilter,
    LevelMismatch,
    MeshPool,
    ShapeMismatch,
    dense_softmax_ce,
    mesh_conv,
    mesh_conv_grad,
    mesh_pool,
    mesh_pool_grad,
    relu,
    relu_grad,
    softmax,
)
from .model import (
    BlockSpec,
    ModelParams,
    ModelSpec,
    Operators,
    build_operators,
    chebyshev_spec,
    init_params,
    loss_and_grad,
    model_forward,
    default_spec,
    predict,
    zero_params,
)
from .optim import AdamState, adam_step
from .train import EmptyFold, SingleClassFold, TrainConfig, train, train_fold, write_history
from .gradcheck import GradcheckReport, gradcheck
from .checkpoint import load_checkpoint, save_checkpoint
