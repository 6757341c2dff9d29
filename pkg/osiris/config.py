import os
import platform
from dataclasses import dataclass
from functools import lru_cache

from dotenv import load_dotenv

load_dotenv()


def _database_url() -> str:
    url = os.getenv("OSIRIS_DATABASE_URL") or os.getenv("DATABASE_URL")

    # No URL configured: local SQLite file next to the working directory
    if not url or not url.strip():
        if platform.system() == "Windows" or os.access(os.getcwd(), os.W_OK):
            url = "sqlite:///osiris_runs.db"
        else:
            url = "sqlite:////tmp/osiris_runs.db"

    url = url.strip().replace('"', "").replace("'", "")

    # SQLAlchemy wants 'postgresql://' instead of 'postgres://'
    if url.startswith("postgres://"):
        url = url.replace("postgres://", "postgresql://", 1)
    return url


def _int_env(name: str, default: int, minimum: int = 0) -> int:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return max(minimum, int(raw))
    except ValueError:
        return default


@dataclass(frozen=True)
class Settings:
    database_url: str
    workers: int
    log_level: str
    functional_max_n: int
    seed: int


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings(
        database_url=_database_url(),
        workers=_int_env("OSIRIS_WORKERS", os.cpu_count() or 1, minimum=1),
        log_level=os.getenv("OSIRIS_LOG_LEVEL", "INFO").upper(),
        functional_max_n=_int_env("OSIRIS_FUNCTIONAL_MAX_N", 1024, minimum=2),
        seed=_int_env("OSIRIS_SEED", 0),
    )
