import os
from functools import lru_cache

from dotenv import load_dotenv
from pydantic import BaseModel, Field

load_dotenv()


class Settings(BaseModel):
    log_level: str = "INFO"
    seed: int = 42
    threads: int = Field(1, ge=1)
    debug_finite: bool = False


def _flag(value: str) -> bool:
    return value.strip().lower() in ("1", "true", "yes", "on")


@lru_cache()
def get_settings() -> Settings:
    # environment wins over .env, .env over built-in defaults
    return Settings(
        log_level=os.getenv("DQSS_LOG_LEVEL", "INFO"),
        seed=int(os.getenv("DQSS_SEED", "42")),
        threads=int(os.getenv("DQSS_THREADS", "1")),
        debug_finite=_flag(os.getenv("DQSS_DEBUG_FINITE", "false")),
    )
