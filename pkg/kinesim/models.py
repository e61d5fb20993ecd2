"""
Run registry tables: one row per CLI invocation plus the files it wrote.
"""

from sqlalchemy import Column, DateTime, ForeignKey, Integer, String, Text
from sqlalchemy.orm import relationship
from sqlalchemy.sql import func

from kinesim.database import Base


class RunRecord(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String, nullable=False, index=True)
    seed = Column(Integer)
    config_json = Column(Text)
    summary_json = Column(Text)
    status = Column(String, default="running")  # running | ok | failed
    error = Column(Text)
    started_at = Column(DateTime(timezone=True), server_default=func.now())
    finished_at = Column(DateTime(timezone=True))

    artifacts = relationship("ArtifactRecord", back_populates="run", cascade="all, delete-orphan")


class ArtifactRecord(Base):
    __tablename__ = "artifacts"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id", ondelete="CASCADE"), nullable=False)
    path = Column(String, nullable=False)
    kind = Column(String)
    sha256 = Column(String)

    run = relationship("RunRecord", back_populates="artifacts")
