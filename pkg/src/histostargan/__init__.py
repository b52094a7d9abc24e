"""Multi-domain stain transfer with a bottleneck segmentation branch."""

from .core import RngStream, TrainConfig, load_config, sample_latent, save_config
from .nets import ModelBundle

__all__ = ["RngStream", "TrainConfig", "ModelBundle", "load_config", "save_config", "sample_latent"]
__version__ = "0.1.0"
