from mirank.core.ops import (
    AVG_POOL_TIME, BATCH_NORM, CONV2D, DENSE, DROPOUT, ELU, FLATTEN, SOFTMAX_XENT,
    DimensionError, MissingContextError, NonFiniteError,
    avg_pool_time, batch_norm, conv2d, dense, dropout, elu, softmax, softmax_xent, vjp,
)
from mirank.core.optim import AdamState, adam_update, max_norm_project
