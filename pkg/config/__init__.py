# Config module
from .run_config import ConfigError, RunConfig, load_config, parse_config_text
