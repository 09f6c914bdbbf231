"""Camera/LiDAR driving policy with a cascaded look-predict-refine decoder,
a deterministic 2D closed-loop simulator and an evaluation harness."""

__version__ = "0.1.0"

from .config import Config, desk_profile, load_config  # noqa: E402
from .model import StudentModel  # noqa: E402

__all__ = ["Config", "StudentModel", "desk_profile", "load_config", "__version__"]
