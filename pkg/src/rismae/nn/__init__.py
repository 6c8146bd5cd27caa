from .functional import (
    AttentionParams,
    LayerNormParams,
    MlpParams,
    gelu_mlp,
    layer_norm,
    multi_head_attention,
)
from .gradcheck import numerical_grad, rel_error
from .layers import (
    Dropout,
    MLP,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    NumericalError,
    Stack,
    TransformerBlock,
    gelu,
    gelu_grad,
    softmax,
    trunc_normal,
)
from .optim import OptimizerState, adamw_step
from .serialize import load_params, save_params
