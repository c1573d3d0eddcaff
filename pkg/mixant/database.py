from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

from mixant.settings import DATABASE_URL


def make_engine(url: str):
    # sqlite connections are shared between the API's worker threads
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    return create_engine(url, connect_args=connect_args)


engine = make_engine(DATABASE_URL)

SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

Base = declarative_base()


def get_db():
    """
    Generator function to manage database sessions.

    Yields:
        Session: A SQLAlchemy database session, closed once the request is done.
    """
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()


def init_db():
    """Create the registry tables when they do not exist yet (alembic manages upgrades)."""
    from mixant import models  # noqa: F401

    Base.metadata.create_all(bind=engine)
