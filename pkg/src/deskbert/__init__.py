"""Desk-scale multilingual encoder pretraining, fine-tuning and evaluation on numpy."""

from .encoder import EncoderConfig, EncoderModel, count_params, preset
from .mlm import MaskingPolicy, apply_masking, mlm_loss
from .tensor import Tensor, backward, no_grad, precision
from .tokenizer import Vocab, train_bpe

__all__ = [
    "EncoderConfig", "EncoderModel", "count_params", "preset",
    "MaskingPolicy", "apply_masking", "mlm_loss",
    "Tensor", "backward", "no_grad", "precision",
    "Vocab", "train_bpe",
]

__version__ = "0.1.0"
