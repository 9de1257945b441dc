"""Mixup-sign FP quantization, timestep-aware LoRA and denoising-factor loss
for small diffusion models, on numpy."""
from .calib import calibrate_model, search_mixup, search_signed, search_unsigned
from .diffusion import make_schedule, sample
from .fpq import FpFormat, FpQuantizerParams, fp_quantize, int_quantize
from .finetune import FinetuneConfig, diagnose, dfa_loss, finetune, plain_loss
from .lora import LoraHub, QuantizedDenoiser, Router, quantized_forward
from .nn import DenoiserModel, GradientTape

__version__ = "0.1.0"

__all__ = [
    "calibrate_model", "search_mixup", "search_signed", "search_unsigned",
    "make_schedule", "sample",
    "FpFormat", "FpQuantizerParams", "fp_quantize", "int_quantize",
    "FinetuneConfig", "diagnose", "dfa_loss", "finetune", "plain_loss",
    "LoraHub", "QuantizedDenoiser", "Router", "quantized_forward",
    "DenoiserModel", "GradientTape",
]
