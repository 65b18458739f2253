"""Dense math substrate: autodiff tensors, MLPs, Adam, time embeddings."""

from gpm.nn.adam import AdamState, adam_step
from gpm.nn.mlp import (
    MLPSpec,
    NetworkParams,
    TimeModulation,
    flatten_grads,
    fourier_features,
    grad,
    init_params,
    jacobian_params,
    load_params,
    mlp_apply,
    mlp_forward,
    param_leaves,
    save_params,
    time_embedding,
)
from gpm.nn.tensor import Tensor, backward, leaf, no_grad

__all__ = [
    "AdamState", "adam_step", "MLPSpec", "NetworkParams", "TimeModulation",
    "flatten_grads", "fourier_features", "grad", "init_params",
    "jacobian_params", "load_params", "mlp_apply", "mlp_forward",
    "param_leaves", "save_params", "time_embedding", "Tensor", "backward",
    "leaf", "no_grad",
]
