"""PPO with clipped, leaky, rollback and directional-clamp surrogates, in plain NumPy."""

__version__ = "0.1.0"

from .surrogate import ConfigError, Direction, SurrogateConfig, Variant, classify_direction  # noqa: E402
from .trainer import TrainConfig, preset_config, train  # noqa: E402

__all__ = [
    "__version__",
    "ConfigError",
    "Direction",
    "SurrogateConfig",
    "Variant",
    "classify_direction",
    "TrainConfig",
    "preset_config",
    "train",
]
