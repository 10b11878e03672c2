"""Models and DP-SGD steps, in plaintext or on secret shares."""

from .plain import (
    MODEL_KINDS,
    Batch,
    Model,
    accuracy,
    clip,
    clip_rows,
    dp_sgd_step,
    init_model,
    layer_dims,
    load_params,
    loss,
    mean_gradient,
    param_count,
    per_example_gradients,
    per_example_loss,
    poisson_subsample,
    predict_logits,
    save_params,
    softmax,
    unpack,
)
from .shares import (
    SharedModel,
    clipped_gradient_sum,
    flat_grads,
    peek_model,
    reveal_model,
    sgd_update,
    share_model,
    shared_softmax,
)

__all__ = [
    "MODEL_KINDS", "Batch", "Model", "accuracy", "clip", "clip_rows", "dp_sgd_step",
    "init_model", "layer_dims", "load_params", "loss", "mean_gradient", "param_count",
    "per_example_gradients", "per_example_loss", "poisson_subsample", "predict_logits",
    "save_params", "softmax", "unpack",
    "SharedModel", "clipped_gradient_sum", "flat_grads", "peek_model", "reveal_model",
    "sgd_update", "share_model", "shared_softmax",
]
