"""
Configuration module for the noise-space sampler.
Environment-driven settings for output locations, logging and concurrency.
"""

from functools import lru_cache
from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings, read from ``NOISESPACE_*`` environment variables."""

    model_config = SettingsConfigDict(env_prefix="NOISESPACE_", extra="ignore")

    # Default root for run directories when a config omits output_dir
    OUTPUT_ROOT: Path = Path("runs")

    # Logging
    LOG_LEVEL: str = "INFO"

    # Chains run concurrently on a thread pool of this size
    MAX_WORKERS: int = 4

    # tqdm progress bars for multi-chain runs
    PROGRESS: bool = True

    def get_logging_config(self) -> dict:
        """Get keyword arguments for ``logging.basicConfig``."""
        return {
            "level": self.LOG_LEVEL.upper(),
            "format": "%(asctime)s - %(levelname)s - %(message)s",
        }


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """
    Get the cached settings instance.

    Returns:
        Settings instance
    """
    return Settings()
