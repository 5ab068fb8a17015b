from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s %(levelname)s %(name)s %(message)s"
    MEMORY_CAP_SCALARS: int = 2**31
    METRICS_FILENAME: str = "metrics.prom"

    model_config = SettingsConfigDict(env_file=".env", env_prefix="FBSDENET_", extra="ignore")


settings = Settings()
