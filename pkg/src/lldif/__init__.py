"""Low-light facial expression recognition with a diffusion-estimated embedding prior."""

from .config import CLASS_NAMES, ModelConfig, TrainConfig, desk_profile, paper_profile

__version__ = "0.1.0"

__all__ = ["CLASS_NAMES", "ModelConfig", "TrainConfig", "desk_profile", "paper_profile", "__version__"]
