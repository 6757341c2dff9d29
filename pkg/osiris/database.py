import logging

from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

from .config import get_settings

logger = logging.getLogger(__name__)

Base = declarative_base()


def make_engine(url: str):
    """Engine for `url`; on failure an in-memory SQLite engine so a simulation never aborts on storage."""
    # Force SSL mode for hosted PostgreSQL if not present
    if url.startswith("postgresql://") and "sslmode" not in url and "localhost" not in url:
        url += "&sslmode=require" if "?" in url else "?sslmode=require"
    try:
        connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
        return create_engine(url, future=True, echo=False, connect_args=connect_args)
    except Exception as e:
        logger.error("results store unavailable at %s: %s", url, e)
        return create_engine("sqlite:///:memory:", future=True, connect_args={"check_same_thread": False})


def make_session_factory(engine):
    return sessionmaker(bind=engine, autoflush=False, autocommit=False, future=True)


DB_URL = get_settings().database_url
engine = make_engine(DB_URL)
SessionLocal = make_session_factory(engine)


def init_db(bind=None) -> None:
    from . import models  # noqa: F401  registers the tables

    Base.metadata.create_all(bind=bind or engine)


def get_db():
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()
