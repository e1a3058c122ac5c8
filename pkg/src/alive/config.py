# ALIVE Configuration Module
# Configuration management for the self-play engine
# Handles loading from config.yaml and .env files

import os
import yaml
from pathlib import Path
from typing import Dict, Any, Optional
from dotenv import load_dotenv


class Config:
    """Configuration manager for the ALIVE engine."""

    def __init__(self, config_path: str = "config.yaml", data: Optional[Dict[str, Any]] = None):
        """
        Initialize configuration manager.

        Args:
            config_path (str): Path to YAML configuration file.
            data (Optional[Dict[str, Any]]): Already-parsed configuration; skips the file.
        """
        self.config_path = Path(config_path)
        self.config_data: Dict[str, Any] = {}

        # Load environment variables
        load_dotenv()

        if data is not None:
            self.config_data = dict(data)
        else:
            self._load_config()

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Config":
        """Build a configuration from an in-memory mapping."""
        return cls(config_path="<memory>", data=data)

    def _load_config(self) -> None:
        """Load configuration from YAML file."""
        if not self.config_path.exists():
            raise FileNotFoundError(f"Config file not found: {self.config_path}")

        with open(self.config_path, 'r') as f:
            loaded = yaml.safe_load(f)

        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValueError(f"Config file {self.config_path} must contain a key-value mapping")
        self.config_data = loaded

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get configuration value with dot notation support.

        Flat dotted keys (``clip.eps_low: 0.2``) take precedence over nested
        sections (``clip: {eps_low: 0.2}``); both spellings are accepted.

        Args:
            key (str): Configuration key (supports dot notation like 'clip.eps_low').
            default (Any): Default value if key not found.

        Returns:
            Any: Configuration value.
        """
        if key in self.config_data:
            return self.config_data[key]

        keys = key.split('.')
        value = self.config_data

        for i, k in enumerate(keys):
            if not isinstance(value, dict):
                return default
            if k in value:
                value = value[k]
                continue
            # Section holding flat dotted remainder, e.g. {"match": {"case.sensitive": ...}}
            rest = '.'.join(keys[i:])
            if rest in value:
                return value[rest]
            return default

        return value

    def get_env(self, key: str, default: Optional[str] = None) -> Optional[str]:
        """
        Get environment variable value.

        Args:
            key (str): Environment variable name.
            default (Optional[str]): Default value if not found.

        Returns:
            Optional[str]: Environment variable value.
        """
        return os.getenv(key, default)

    def save(self, path: Path) -> None:
        """Write the configuration as YAML (used for run snapshots)."""
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            yaml.safe_dump(self.config_data, f, sort_keys=True)

    @property
    def run_root(self) -> str:
        """Get the directory new runs are created under."""
        return self.get('data.runs_dir', 'runs')

    @property
    def templates_dir(self) -> Optional[str]:
        """Get the optional prompt template override directory."""
        return self.get('templates.dir')
