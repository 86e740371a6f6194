from .gradcheck import analytic_gradients, check_gradients, numeric_gradients, relative_error
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import AdamState, PoisonedGradientError, adam_step
from .schedule import DomainError, ScheduleConfig, lr_schedule
from .tensor import (
    ConfigError,
    ContractError,
    DegenerateRowError,
    DimensionError,
    EmptyLossError,
    KernelError,
    NonFiniteError,
    Tensor,
    add,
    backward,
    cross_entropy_masked,
    dropout,
    embedding,
    gelu,
    layer_norm,
    linear,
    masked_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    softmax,
    sub,
    sum_,
    take_rows,
    topological_order,
    transpose,
    zero_grad,
)
