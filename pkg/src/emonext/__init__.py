"""EmoNeXt facial expression recognition on a small numpy autodiff engine."""
from .model import CLASS_NAMES, EmoNeXt, ModelConfig, PRESETS, build, forward, predict, preset
from .tensor import Tensor, no_grad

__all__ = ["CLASS_NAMES", "EmoNeXt", "ModelConfig", "PRESETS", "Tensor", "build", "forward", "no_grad", "predict", "preset"]
__version__ = "0.1.0"
