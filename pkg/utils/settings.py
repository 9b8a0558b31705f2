# utils/settings.py
"""
Environment-driven runtime settings
Values come from MAXSHAPE_* variables, optionally loaded from a .env file
"""

from functools import lru_cache
from pathlib import Path

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-wide settings; experiment parameters live in RunConfig instead"""

    model_config = SettingsConfigDict(env_prefix="MAXSHAPE_", extra="ignore")

    log_level: str = "INFO"
    log_json: bool = False
    threads: int = Field(1, ge=1)
    runs_dir: Path = Path("runs")
    default_seed: int = 0


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    load_dotenv()
    return Settings()
