from __future__ import annotations

from functools import lru_cache

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=None, extra="ignore")

    output_dir: str = Field("runs", alias="ZDALAB_OUTPUT_DIR")
    log_level: str = Field("INFO", alias="LOG_LEVEL")
    default_dt: float = Field(1e-3, alias="ZDALAB_DT", gt=0)
    eigen_tol: float = Field(1e-8, alias="ZDALAB_EIGEN_TOL", gt=0)
    rank_tol: float = Field(1e-9, alias="ZDALAB_RANK_TOL", gt=0)
    detection_threshold: float = Field(1e-4, alias="ZDALAB_THRESHOLD", gt=0)
    debounce_samples: int = Field(3, alias="ZDALAB_DEBOUNCE", ge=1)
    record_every: int = Field(10, alias="ZDALAB_RECORD_EVERY", ge=1)
    api_key: str | None = Field(None, alias="API_KEY")
    cache_ttl_seconds: int = Field(300, alias="CACHE_TTL_SECONDS")
    port: int = Field(8000, alias="PORT")


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings()
