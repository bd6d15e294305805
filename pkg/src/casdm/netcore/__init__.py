from casdm.netcore import autodiff as ad
from casdm.netcore.autodiff import Tensor, backward, constant, grad, leaf, stop_gradient
from casdm.netcore.gradcheck import finite_diff_grad, max_rel_error, rel_error_norm
from casdm.netcore.optim import AdamState, adam_step, ema_update
from casdm.netcore.params import (
    ContainerFormatError,
    ParamStore,
    fan_in_init,
    load_params,
    read_container,
    save_params,
    truncated_normal,
    write_container,
)

__all__ = [
    "ad",
    "Tensor",
    "backward",
    "constant",
    "grad",
    "leaf",
    "stop_gradient",
    "finite_diff_grad",
    "max_rel_error",
    "rel_error_norm",
    "AdamState",
    "adam_step",
    "ema_update",
    "ContainerFormatError",
    "ParamStore",
    "fan_in_init",
    "load_params",
    "read_container",
    "save_params",
    "truncated_normal",
    "write_container",
]
