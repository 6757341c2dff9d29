from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, BigInteger
from sqlalchemy.orm import relationship
from sqlalchemy.sql import func

from .database import Base


class ParameterSetRow(Base):
    __tablename__ = "parameter_sets"
    id = Column(Integer, primary_key=True, index=True)
    name = Column(String(32), unique=True, index=True, nullable=False)
    n = Column(Integer, nullable=False)
    slots = Column(Integer, nullable=False)
    l_eff = Column(Integer, nullable=False)
    alpha = Column(Integer, nullable=False)
    dnum = Column(Integer, nullable=False)
    q0_bits = Column(String(64), nullable=False)  # JSON list, split q0 has two entries
    qi_bits = Column(Integer, nullable=False)
    p_bits = Column(Integer, nullable=False)
    h = Column(Integer, nullable=False)
    boot_alpha = Column(Integer, nullable=True)
    boot_levels = Column(Integer, nullable=False, default=0)


class Run(Base):
    __tablename__ = "runs"
    id = Column(Integer, primary_key=True, index=True)
    command = Column(String(16), nullable=False, index=True)  # simulate, perf, sweep, storage
    workload = Column(String(128), nullable=True, index=True)
    parameter_set = Column(String(32), nullable=True)
    chip_digest = Column(String(64), nullable=True)
    cycles = Column(BigInteger, nullable=True)
    stall_cycles = Column(BigInteger, nullable=True)
    mults = Column(BigInteger, nullable=True)
    dram_bytes = Column(BigInteger, nullable=True)
    utilization = Column(Float, nullable=True)
    intensity = Column(Float, nullable=True)
    report_json = Column(Text, nullable=True)
    created_at = Column(DateTime(timezone=True), server_default=func.now())

    points = relationship("SweepPoint", back_populates="run", cascade="all, delete-orphan")


class SweepPoint(Base):
    __tablename__ = "sweep_points"
    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id", ondelete="CASCADE"), nullable=False, index=True)
    varied = Column(String(32), nullable=False)
    value = Column(Float, nullable=False)
    cycles = Column(BigInteger, nullable=False)
    stall_fraction = Column(Float, nullable=False)
    utilization = Column(Float, nullable=False)
    mults = Column(BigInteger, nullable=False)
    intensity = Column(Float, nullable=False)

    run = relationship("Run", back_populates="points")
