"""Band-split selective state-space speech enhancement on a small numpy autodiff core."""

from .dsp import AudioClip, StftConfig, istft, stft, wav_read, wav_write
from .model import ModelConfig, build_model, count_flops, count_params, enhance
from .checkpoint import checkpoint_load, checkpoint_save

__version__ = "0.1.0"

__all__ = [
    "AudioClip", "StftConfig", "stft", "istft", "wav_read", "wav_write",
    "ModelConfig", "build_model", "count_params", "count_flops", "enhance",
    "checkpoint_save", "checkpoint_load",
]
