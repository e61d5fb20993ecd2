from contextlib import contextmanager

from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker
from sqlalchemy.pool import StaticPool

from kinesim.core.config import settings

Base = declarative_base()

SessionLocal = sessionmaker(autocommit=False, autoflush=False)
engine = None


def configure_engine(database_url: str = settings.database_url):
    """(Re)bind the session factory; in-memory sqlite shares one connection"""
    global engine
    if database_url.startswith("sqlite"):
        kwargs = {"connect_args": {"check_same_thread": False}}
        if database_url in ("sqlite://", "sqlite:///:memory:"):
            kwargs["poolclass"] = StaticPool
    else:
        kwargs = {}
    engine = create_engine(database_url, **kwargs)
    SessionLocal.configure(bind=engine)
    return engine


def init_db() -> None:
    from kinesim import models  # noqa: F401  registers the tables

    if engine is None:
        configure_engine()
    Base.metadata.create_all(bind=engine)


@contextmanager
def get_db():
    """Session bound to the configured engine, closed on exit"""
    if engine is None:
        configure_engine()
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()
