"""From-scratch reverse-mode autodiff, the adaptation network, and its optimizer."""

from .autograd import (  # noqa: F401
    Tensor,
    add,
    clip,
    conv2d,
    dense,
    grad_enabled,
    grl,
    leaky_relu,
    log,
    mul,
    nearest_upsample,
    no_grad,
    sigmoid,
    softplus,
    square,
    tmean,
    tsum,
)
from .model import (  # noqa: F401
    AdaptModel,
    GrlSchedule,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from .optim import DivergedError, OptimizerConfig, SgdNesterov  # noqa: F401
