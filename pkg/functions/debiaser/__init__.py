from .config import ConfigError, RunConfig, load_config
from .functions import DebiasPipeline

__version__ = "0.1"
