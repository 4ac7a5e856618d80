from .autograd import Parameter, Tensor, default_dtype, get_default_dtype, no_grad
from .gradcheck import grad_check
from .layers import (
    Conv1d,
    ConvFeedForward,
    Dropout,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    TransformerLayer,
    TransformerLayerConfig,
    TransformerStack,
    sinusoidal_pe,
)
from .optim import ModelParams, TrainingError, adam_step, clip_by_global_norm, lr_schedule
