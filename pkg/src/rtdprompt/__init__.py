"""Zero-shot and few-shot text classification by replaced-token-detection
prompt scoring, with a from-scratch mini encoder and toy pre-training loop."""

from .model import (DiscriminatorOutput, ModelConfig, WeightContainer,
                    discriminator_forward, generator_forward, load_weights,
                    save_weights)
from .prompt import BUILTIN_TEMPLATES, Prediction, Template, classify, parse_template, regress
from .tensor import Tensor, elementwise, grad_check, layer_norm, matmul, row_softmax
from .tokenizer import Encoding, Vocab, build_sequence, decode, load_vocab, wordpiece

__version__ = "0.1.0"

__all__ = [
    "BUILTIN_TEMPLATES", "DiscriminatorOutput", "Encoding", "ModelConfig",
    "Prediction", "Template", "Tensor", "Vocab", "WeightContainer",
    "build_sequence", "classify", "decode", "discriminator_forward",
    "elementwise", "generator_forward", "grad_check", "layer_norm",
    "load_vocab", "load_weights", "matmul", "parse_template", "regress",
    "row_softmax", "save_weights", "wordpiece",
]
