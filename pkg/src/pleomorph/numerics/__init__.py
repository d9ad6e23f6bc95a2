from .gradcheck import GradCheckReport, grad_check, grad_check_report
from .losses import cosine_similarity, smooth_l1
from .nn import BatchNorm, Conv2d, Linear, Module
from .ops import (
    add,
    avg_pool2d,
    batch_norm,
    conv2d,
    conv_output_size,
    dense_concat,
    flatten,
    global_avg_pool,
    linear,
    matmul,
    max_pool2d,
    mean,
    mul,
    relu,
    reshape,
    split_channels,
    sub,
    sum_all,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Parameter, Tape, Tensor, active_tape, as_tensor
