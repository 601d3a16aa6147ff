import logging

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    LOG_LEVEL: str = "INFO"
    OUTPUT_DIR: str = "runs"
    WORKERS: int = 1
    DEFAULT_SEED: int = 20230101
    AUC_TAU_MAX: float = 0.1  # meters
    ACC_DIAMETER_FRACTION: float = 0.1
    API_MAX_SCENES: int = 50  # upper bound for experiments started over HTTP

    model_config = SettingsConfigDict(env_file=".env", extra='ignore')


settings = Settings()


def configure_logging(level: str = None):
    logging.basicConfig(
        level=(level or settings.LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
