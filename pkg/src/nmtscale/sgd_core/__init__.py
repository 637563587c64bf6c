from .model import (
    PAD_ID,
    ForwardCache,
    ModelParams,
    SubBatchTensors,
    TrainConfig,
    backward,
    central_difference,
    collect_grads,
    finite_diff_grad,
    forward,
    label_smoothed_nll,
    log_softmax,
    sentence_losses,
)
from .optim import AdamState, adam_update, lr_at

__all__ = [
    "PAD_ID", "ForwardCache", "ModelParams", "SubBatchTensors", "TrainConfig", "backward",
    "central_difference", "collect_grads", "finite_diff_grad", "forward", "label_smoothed_nll",
    "log_softmax", "sentence_losses", "AdamState", "adam_update", "lr_at",
]
