"""Per-instance neural video codec with a scale-recursive shared generator."""

from .model import ModelConfig, ParameterStore, build_model, count_params, generate, match_budget
from .training import TrainConfig, fit, prune_global, qat_finetune, compress_model
from .codec import decode_video, parse, serialize, estimate_rate
from .metrics import RDPoint, bd_rate, bpp, psnr, ssim
from .video import SynthSpec, load_video, save_video, synth_video

__all__ = [
    "ModelConfig", "ParameterStore", "build_model", "count_params", "generate",
    "match_budget", "TrainConfig", "fit", "prune_global", "qat_finetune",
    "compress_model", "decode_video", "parse", "serialize", "estimate_rate",
    "RDPoint", "bd_rate", "bpp", "psnr", "ssim",
    "SynthSpec", "load_video", "save_video", "synth_video",
]
